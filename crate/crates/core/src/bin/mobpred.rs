use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mobpred::config::Config;
use mobpred::pipeline::{parse_scenario, ModelSpec, Pipeline, CONFIG};
use mobpred::{Error, Result};

#[derive(Parser)]
#[command(name = "mobpred", version, about = "Next-place prediction experiments on synthetic mobility data")]
struct Cli {
    /// TOML config; defaults apply when omitted on a fresh run directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the world: geo.csv and events.csv.
    Generate,
    /// Cluster, extract trajectories, simulate and label queries.
    Prepare,
    /// Train model cells.
    Train {
        /// e.g. markov, lstm, forest:app, fusion_c:app+time. Repeatable; defaults to the sweep list.
        #[arg(long = "model")]
        models: Vec<String>,
        /// e.g. m25_successive, m50_important@5. Repeatable; defaults to the whole grid.
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
    },
    /// Score trained cells: results.csv and heatmap.csv.
    Evaluate,
    /// All stages over the full grid, resuming completed cells.
    Sweep,
    /// Print and save a text summary.
    Report,
}

fn pipeline(cli: &Cli) -> Result<Pipeline> {
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(Error::InvalidConfig("--jobs must be at least 1".into()));
    }
    let existing = cli.out.join(CONFIG);
    if cli.config.is_none() && existing.exists() {
        let p = Pipeline::open(&cli.out, jobs)?;
        if let Some(seed) = cli.seed.filter(|&s| s != p.cfg.seed) {
            return Err(Error::InvalidConfig(format!(
                "{} was created with seed {}, not {seed}; use a fresh --out",
                cli.out.display(),
                p.cfg.seed
            )));
        }
        return Ok(p);
    }
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Pipeline::create(&cli.out, cfg, jobs)
}

fn run(cli: &Cli) -> Result<()> {
    let p = pipeline(cli)?;
    match &cli.cmd {
        Cmd::Generate => p.generate()?,
        Cmd::Prepare => p.prepare()?,
        Cmd::Train { models, scenarios } => {
            let models: Vec<ModelSpec> = if models.is_empty() {
                p.configured_models()?
            } else {
                models.iter().map(|m| m.parse()).collect::<Result<_>>()?
            };
            let scenarios = if scenarios.is_empty() {
                p.scenarios()
            } else {
                scenarios.iter().map(|s| parse_scenario(s)).collect::<Result<_>>()?
            };
            let s = p.train(&models, &scenarios)?;
            println!("trained {} cells, {} already complete", s.trained.len(), s.skipped.len());
        }
        Cmd::Evaluate => {
            let rows = p.evaluate()?;
            println!("{} result rows", rows.len());
        }
        Cmd::Sweep => {
            let s = p.sweep()?;
            println!("trained {} cells, {} already complete", s.trained.len(), s.skipped.len());
        }
        Cmd::Report => print!("{}", p.report()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error: kind={} message=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
