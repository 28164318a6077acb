//! Random forests on each behavioral feature group alone.
//!
//! cargo run --example forest_features

use mobpred::config::Config;
use mobpred::eval::accuracy_at_1;
use mobpred::features::FeatureGroup;
use mobpred::forest::{forest_fit, ForestConfig};
use mobpred::fusion::{encode_features, GroupSet, TimeEncoding};
use mobpred::matrix::DesignMatrix;
use mobpred::pipeline::{query_features, Pipeline};
use mobpred::querysim::{Scenario, TargetCriterion};
use mobpred::synthgen::UsageEvent;

fn main() -> mobpred::Result<()> {
    let cfg = Config::from_toml("seed = 5\nworld.n_users = 15\nworld.sim_days = 10\ngranularity.m_values = [25]\n")?;
    let dir = tempfile::tempdir()?;
    let p = Pipeline::create(dir.path(), cfg, 1)?;
    p.generate()?;
    p.prepare()?;
    let data = p.load_prepared()?;

    let events: Vec<UsageEvent> = mobpred::io::read_rows::<_, mobpred::io::EventRow>(std::fs::File::open(dir.path().join("events.csv"))?)?
        .into_iter()
        .map(UsageEvent::try_from)
        .collect::<mobpred::Result<_>>()?;
    let store = mobpred::features::EventStore::new(&events);
    let feats = query_features(&store, &data.trajectories, &data.queries, &data.dims)?;

    let sc = Scenario {
        m: 25,
        criterion: TargetCriterion::Successive,
    };
    let [train, _, test] = data.split(sc);
    println!("M=25 successive: {} train, {} test queries", train.len(), test.len());
    let mut all = FeatureGroup::ALL.iter().map(|&g| GroupSet::new([g])).collect::<Vec<_>>();
    all.push(GroupSet::all());
    for groups in all {
        let encode = |id: usize| -> mobpred::Result<Vec<f64>> {
            let mut row = Vec::new();
            encode_features(&feats[id], &groups, &data.dims, TimeEncoding::Ordinal, &mut row)?;
            Ok(row)
        };
        let rows = train.iter().map(|lq| encode(lq.query.id)).collect::<mobpred::Result<Vec<_>>>()?;
        let y: Vec<u32> = train.iter().map(|lq| lq.target).collect();
        let forest = forest_fit(
            &DesignMatrix::from_rows(&rows)?,
            &y,
            25,
            &ForestConfig {
                n_trees: 50,
                rng_seed: 1,
                ..Default::default()
            },
        )?;
        let predicted = test
            .iter()
            .map(|lq| Ok(forest.predict(&encode(lq.query.id)?)?.0))
            .collect::<mobpred::Result<Vec<_>>>()?;
        let truth: Vec<u32> = test.iter().map(|lq| lq.target).collect();
        println!("  {:<28} {:>4} columns  accuracy {:.3}", groups.to_string(), rows[0].len(), accuracy_at_1(&predicted, &truth)?);
    }
    Ok(())
}
