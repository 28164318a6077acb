//! Run-directory behavior: resume, hash checks, determinism and the CLI.

use std::path::Path;
use std::process::Command;

use mobpred::config::Config;
use mobpred::pipeline::{Pipeline, StageStatus, GEO, RESULTS};
use mobpred::Error;

fn tiny() -> Config {
    Config::from_toml(include_str!("../configs/tiny.toml")).unwrap()
}

fn swept(dir: &Path) -> Pipeline {
    let p = Pipeline::create(dir, tiny(), 2).unwrap();
    p.sweep().unwrap();
    p
}

#[test]
fn sweep_covers_the_whole_grid() {
    let dir = tempfile::tempdir().unwrap();
    let p = swept(dir.path());
    let cfg = &p.cfg;
    let expected = cfg.granularity.m_values.len() * cfg.queries.criteria().len() * cfg.sweep.models.len();
    let manifest = p.run.read_manifest().unwrap();
    assert_eq!(manifest.cells.len(), expected);
    assert!(manifest.cells.values().all(|c| c.status == StageStatus::Done));
    for stage in ["generate", "prepare", "evaluate"] {
        assert_eq!(manifest.stages[stage].status, StageStatus::Done, "{stage}");
    }
    assert_eq!(manifest.seed, cfg.seed);
    assert!(manifest.stages["generate"].seeds.contains_key("world"));
    assert!(!manifest.tool_version.is_empty());

    // every output listed with its hash, and no temp files left behind
    for rec in manifest.stages.values().chain(manifest.cells.values()) {
        for (rel, hash) in &rec.outputs {
            assert_eq!(&mobpred::pipeline::sha256_file(&dir.path().join(rel)).unwrap(), hash);
        }
    }
    for entry in walk(dir.path()) {
        let name = entry.file_name().unwrap().to_string_lossy().to_string();
        assert!(!name.contains(".tmp."), "leftover {name}");
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn resume_recomputes_exactly_the_damaged_cell() {
    let dir = tempfile::tempdir().unwrap();
    let p = swept(dir.path());
    let results = std::fs::read(dir.path().join(RESULTS)).unwrap();

    let untouched = p.sweep().unwrap();
    assert!(untouched.trained.is_empty());

    std::fs::remove_file(dir.path().join("cells/m10_successive__forest-app/forest.json")).unwrap();
    let resumed = p.sweep().unwrap();
    assert_eq!(resumed.trained, vec!["m10_successive__forest-app".to_string()]);
    assert_eq!(std::fs::read(dir.path().join(RESULTS)).unwrap(), results);
}

#[test]
fn altered_artifacts_abort_with_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = swept(dir.path());
    let pred = dir.path().join("cells/m5_successive__markov/predictions.csv");
    let mut text = std::fs::read_to_string(&pred).unwrap();
    text.push_str("0,0,0\n");
    std::fs::write(&pred, text).unwrap();
    assert!(matches!(p.sweep(), Err(Error::HashMismatch { .. })));

    let geo = dir.path().join(GEO);
    std::fs::write(&geo, "user_id,timestamp,x,y\n").unwrap();
    assert!(matches!(p.prepare(), Err(Error::HashMismatch { .. })));
    let manifest = p.run.read_manifest().unwrap();
    assert_eq!(manifest.stages["prepare"].status, StageStatus::Failed);
}

#[test]
fn stages_refuse_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::create(dir.path(), tiny(), 1).unwrap();
    assert!(matches!(p.prepare(), Err(Error::MissingInput(_))));
    assert!(matches!(p.evaluate(), Err(Error::EmptyInput(_))));
    p.generate().unwrap();
    assert!(matches!(p.load_prepared(), Err(Error::MissingInput(_))));
}

#[test]
fn run_directory_is_bound_to_its_config() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::create(dir.path(), tiny(), 1).unwrap();
    let mut other = tiny();
    other.seed += 1;
    assert!(matches!(Pipeline::create(dir.path(), other, 1), Err(Error::InvalidConfig(_))));
    assert_eq!(Pipeline::open(dir.path(), 1).unwrap().cfg, tiny());
}

#[test]
fn identical_configs_reproduce_every_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = swept(a.path()).run.read_manifest().unwrap();
    let mb = {
        let p = Pipeline::create(b.path(), tiny(), 1).unwrap();
        p.sweep().unwrap();
        p.run.read_manifest().unwrap()
    };
    let outputs = |m: &mobpred::pipeline::Manifest| {
        m.stages
            .values()
            .chain(m.cells.values())
            .flat_map(|r| r.outputs.clone())
            .collect::<std::collections::BTreeMap<_, _>>()
    };
    assert_eq!(outputs(&ma), outputs(&mb));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mobpred")).args(args).output().unwrap()
}

#[test]
fn cli_runs_stages_and_reports_errors_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.toml");

    let missing = cli(&["--out", out, "prepare"]);
    assert!(!missing.status.success());
    let err = String::from_utf8(missing.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=missing_input message=\""), "{err}");

    let ok = |args: &[&str]| {
        let o = cli(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let fresh = dir.path().join("fresh");
    let fresh = fresh.to_str().unwrap();
    ok(&["--config", config, "--out", fresh, "--jobs", "2", "generate"]);
    ok(&["--out", fresh, "prepare"]);
    let trained = ok(&["--out", fresh, "train", "--model", "markov", "--scenario", "m5_successive"]);
    assert!(trained.contains("trained 1 cells"), "{trained}");
    ok(&["--out", fresh, "evaluate"]);
    let report = ok(&["--out", fresh, "report"]);
    assert!(report.contains("markov"));

    let bad_seed = cli(&["--out", fresh, "--seed", "999", "report"]);
    assert!(!bad_seed.status.success());
    assert!(String::from_utf8(bad_seed.stderr).unwrap().contains("kind=invalid_config"));

    let bad_model = cli(&["--out", fresh, "train", "--model", "svm"]);
    assert!(String::from_utf8(bad_model.stderr).unwrap().starts_with("error: kind=parse"));

    // --seed on a fresh directory overrides the config file
    let seeded = dir.path().join("seeded");
    ok(&["--config", config, "--out", seeded.to_str().unwrap(), "--seed", "123", "generate"]);
    assert_eq!(Pipeline::open(&seeded, 1).unwrap().cfg.seed, 123);
}
