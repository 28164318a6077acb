use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".manifest.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Failed,
}

/// What one stage or cell read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Relative path -> sha256 of every declared input.
    pub inputs: BTreeMap<String, String>,
    /// Relative path -> sha256 of every output.
    pub outputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
    /// Sweep cells keyed by cell ID.
    pub cells: BTreeMap<String, StageRecord>,
}

impl Manifest {
    /// Recorded hash of a file produced by any successful stage or cell.
    pub fn produced_hash(&self, rel: &str) -> Option<&str> {
        self.stages
            .values()
            .chain(self.cells.values())
            .filter(|r| r.status == StageStatus::Done)
            .find_map(|r| r.outputs.get(rel))
            .map(String::as_str)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `path` through a sibling temp file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(
        ".{name}.tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// A run directory holding stage outputs, cells and the manifest.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn read_manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// Read-modify-write of the manifest under an exclusive lock.
    pub fn update_manifest<T>(&self, f: impl FnOnce(&mut Manifest) -> T) -> Result<T> {
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.path(LOCK))?;
        lock.lock()?;
        let mut manifest = self.read_manifest()?;
        let out = f(&mut manifest);
        manifest.tool_version = TOOL_VERSION.to_string();
        let written = write_atomic(&self.path(MANIFEST), |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)?;
            w.write_all(b"\n")?;
            Ok(())
        });
        lock.unlock()?;
        written.map(|_| out)
    }

    pub fn hash(&self, rel: &str) -> Result<String> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        sha256_file(&path)
    }

    /// Checks that each declared input exists and still has the hash its
    /// producer recorded.
    pub fn verify_inputs(&self, manifest: &Manifest, inputs: &[String]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for rel in inputs {
            let path = self.path(rel);
            let expected = manifest.produced_hash(rel).ok_or_else(|| Error::MissingInput(path.clone()))?;
            let actual = self.hash(rel)?;
            if actual != expected {
                return Err(Error::HashMismatch {
                    path,
                    expected: expected.to_string(),
                    actual,
                });
            }
            out.insert(rel.clone(), actual);
        }
        Ok(out)
    }

    /// Whether a finished record's outputs are all present and intact.
    /// Missing files mean "recompute"; altered files are an error.
    pub fn outputs_intact(&self, record: &StageRecord) -> Result<bool> {
        if record.status != StageStatus::Done {
            return Ok(false);
        }
        for (rel, expected) in &record.outputs {
            let path = self.path(rel);
            if !path.exists() {
                return Ok(false);
            }
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(Error::HashMismatch {
                    path,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, |w| Ok(w.write_all(b"hello")?)).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "hello");
        let failed = write_atomic(&p, |w| {
            w.write_all(b"partial")?;
            Err(Error::config("boom"))
        });
        assert!(failed.is_err());
        assert_eq!(fs::read_to_string(&p).unwrap(), "hello");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn input_verification() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).unwrap();
        fs::write(run.path("x.csv"), "a\n").unwrap();
        let hash = run.hash("x.csv").unwrap();
        run.update_manifest(|m| {
            m.stages.insert(
                "s".into(),
                StageRecord {
                    status: StageStatus::Done,
                    inputs: BTreeMap::new(),
                    outputs: [("x.csv".to_string(), hash.clone())].into(),
                    seeds: BTreeMap::new(),
                    error: None,
                },
            );
        })
        .unwrap();
        let m = run.read_manifest().unwrap();
        assert_eq!(run.verify_inputs(&m, &["x.csv".into()]).unwrap()["x.csv"], hash);
        assert!(matches!(run.verify_inputs(&m, &["y.csv".into()]), Err(Error::MissingInput(_))));
        fs::write(run.path("x.csv"), "b\n").unwrap();
        assert!(matches!(run.verify_inputs(&m, &["x.csv".into()]), Err(Error::HashMismatch { .. })));
        assert!(run.outputs_intact(&m.stages["s"]).is_err());
        fs::remove_file(run.path("x.csv")).unwrap();
        assert!(!run.outputs_intact(&m.stages["s"]).unwrap());
    }
}
