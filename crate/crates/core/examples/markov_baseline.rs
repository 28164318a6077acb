//! The zero-diagonal Markov predictor against random guessing on every scenario.
//!
//! cargo run --example markov_baseline

use mobpred::config::Config;
use mobpred::eval::{accuracy_at_1, random_guess_baseline};
use mobpred::markov::markov_fit;
use mobpred::pipeline::Pipeline;

fn main() -> mobpred::Result<()> {
    let cfg = Config::from_toml(
        "seed = 11\nworld.n_users = 12\nworld.sim_days = 10\ngranularity.m_values = [5, 25, 100]\n",
    )?;
    let dir = tempfile::tempdir()?;
    let p = Pipeline::create(dir.path(), cfg, 1)?;
    p.generate()?;
    p.prepare()?;
    let data = p.load_prepared()?;

    println!("{:>4} {:<13} {:>7} {:>8} {:>8}", "M", "criterion", "n_test", "markov", "random");
    for sc in p.scenarios() {
        let [train, _, test] = data.split(sc);
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let histories = train
            .iter()
            .map(|lq| lq.query.history_locations(&data.trajectories[lq.query.trajectory], sc.m))
            .collect::<mobpred::Result<Vec<_>>>()?;
        let model = markov_fit(histories.iter().map(Vec::as_slice), sc.m)?;
        let predicted = test.iter().map(|lq| model.predict(lq.current)).collect::<mobpred::Result<Vec<_>>>()?;
        let truth: Vec<u32> = test.iter().map(|lq| lq.target).collect();
        println!(
            "{:>4} {:<13} {:>7} {:>8.3} {:>8.3}",
            sc.m,
            sc.criterion.to_string(),
            test.len(),
            accuracy_at_1(&predicted, &truth)?,
            random_guess_baseline(sc.m)?
        );
    }
    Ok(())
}
