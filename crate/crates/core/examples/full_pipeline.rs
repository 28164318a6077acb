//! The whole experiment grid through a run directory: generate, prepare,
//! train every cell, evaluate and report. Rerunning resumes.
//!
//! cargo run --release --example full_pipeline -- [OUT_DIR] [CONFIG]

use mobpred::config::Config;
use mobpred::pipeline::Pipeline;

fn main() -> mobpred::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "target/example-run".into());
    let cfg = match args.next() {
        Some(path) => Config::load(path.as_ref())?,
        None => Config::from_toml(include_str!("../configs/tiny.toml"))?,
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let p = Pipeline::create(out.as_ref(), cfg, jobs)?;
    let summary = p.sweep()?;
    println!(
        "{}: trained {} cells, {} already complete\n",
        out,
        summary.trained.len(),
        summary.skipped.len()
    );
    print!("{}", p.report()?);
    Ok(())
}
