//! The three target criteria on a hand-written future, then on a whole
//! generated dataset.
//!
//! cargo run --example target_criteria

use mobpred::querysim::{label_dataset, select_target, simulate_queries, TargetCriterion};
use mobpred::rng::child_rng;
use mobpred::synthgen::{generate_world, inject_gaps_all, GapConfig, WorldConfig};
use mobpred::granularity::{assign_all_granularities, GranularityConfig};
use mobpred::trajectory::{extract_trajectories, ExtractionConfig, LocationRecord};

fn main() -> mobpred::Result<()> {
    // future: 3 min at home(0), 4 min at a shop(1), 40 min at work(2), 20 min at the gym(3)
    let plan = [(0u32, 3), (1, 4), (2, 40), (3, 20)];
    let mut future = Vec::new();
    let mut t = 0;
    for (loc, minutes) in plan {
        for _ in 0..minutes {
            future.push(LocationRecord::new(t, [(5, loc)].into_iter().collect()));
            t += 60;
        }
    }
    future.push(LocationRecord::new(t, [(5, 3)].into_iter().collect()));
    println!("current location 0, future {plan:?} (location, minutes)");
    for c in TargetCriterion::defaults() {
        match select_target(&future, 0, c, 5)? {
            Some(sel) => println!("  {c:<13} -> location {} (stayed {} min)", sel.location, sel.stay_seconds / 60),
            None => println!("  {c:<13} -> no label"),
        }
    }

    let world = generate_world(&WorldConfig {
        n_users: 8,
        sim_days: 10,
        rng_seed: 1,
        ..Default::default()
    })?;
    let geo = inject_gaps_all(&world.geo, &GapConfig::default(), 2)?;
    let gcfg = GranularityConfig {
        m_values: vec![10, 50],
        ..Default::default()
    };
    let (users, _) = assign_all_granularities(&geo, &gcfg, 3)?;
    let mut trajectories = Vec::new();
    for u in &users {
        trajectories.extend(extract_trajectories(u.user_id, &u.records, &ExtractionConfig::default())?);
    }
    let mut rng = child_rng(4, "queries");
    let mut queries = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        let qs = simulate_queries(i, t, 5, 0.2, queries.len(), &mut rng);
        queries.extend(qs);
    }
    let labeled = label_dataset(&trajectories, &queries, &TargetCriterion::defaults(), &gcfg.m_values)?;
    println!("\n{} queries over {} trajectories", queries.len(), trajectories.len());
    println!("{:>4} {:<13} {:>8} {:>16}", "M", "criterion", "labeled", "mean target stay");
    for (sc, qs) in &labeled.cells {
        let mean = qs.iter().map(|q| q.target_stay_seconds as f64).sum::<f64>() / qs.len().max(1) as f64;
        println!("{:>4} {:<13} {:>8} {:>12.1} min", sc.m, sc.criterion.to_string(), qs.len(), mean / 60.0);
    }
    Ok(())
}
