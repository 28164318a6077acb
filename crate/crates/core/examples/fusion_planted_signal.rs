//! Fusion of LSTM logits with app usage, with and without the planted
//! app -> next place coupling in the generator.
//!
//! cargo run --release --example fusion_planted_signal

use mobpred::config::Config;
use mobpred::pipeline::{ModelSpec, Pipeline};
use mobpred::querysim::{Scenario, TargetCriterion};

const BASE: &str = "
seed = 21
world.n_users = 15
world.sim_days = 12
granularity.m_values = [25]
lstm.embed_dim = 16
lstm.hidden_dim = 32
train.max_epochs = 20
forest.n_trees = 60
fusion.dnn.hidden = [64]
";

fn main() -> mobpred::Result<()> {
    let models: Vec<ModelSpec> = ["lstm", "fusion_a:app", "fusion_b:app", "fusion_c:app", "fusion_c:sensor+time"]
        .iter()
        .map(|s| s.parse())
        .collect::<mobpred::Result<_>>()?;
    let scenario = Scenario {
        m: 25,
        criterion: TargetCriterion::Successive,
    };
    for strength in [0.0, 0.9] {
        let cfg = Config::from_toml(&format!("{BASE}world.feature_signal_strength = {strength}\n"))?;
        let dir = tempfile::tempdir()?;
        let p = Pipeline::create(dir.path(), cfg, 4)?;
        p.generate()?;
        p.prepare()?;
        p.train(&models, &[scenario])?;
        println!("feature_signal_strength = {strength}");
        for r in p.evaluate()? {
            let rel = r.relative_perf.map(|v| format!("  x{v:.2} of LSTM")).unwrap_or_default();
            println!("  {:<24} accuracy {:.3}{rel}", r.label(), r.accuracy);
        }
    }
    Ok(())
}
