//! Cluster one world at several granularities and watch stays shrink as
//! locations get finer.
//!
//! cargo run --example granularity_sweep

use mobpred::granularity::{assign_all_granularities, transition_counts, GranularityConfig};
use mobpred::synthgen::{generate_world, inject_gaps_all, GapConfig, WorldConfig};
use mobpred::trajectory::{extract_trajectories, mean_stay_seconds, ExtractionConfig};

fn main() -> mobpred::Result<()> {
    let world = generate_world(&WorldConfig {
        n_users: 10,
        sim_days: 10,
        rng_seed: 7,
        ..Default::default()
    })?;
    let geo = inject_gaps_all(&world.geo, &GapConfig::default(), 8)?;
    let cfg = GranularityConfig::default();
    let (users, fits) = assign_all_granularities(&geo, &cfg, 9)?;

    let mut trajectories = Vec::new();
    for u in &users {
        trajectories.extend(extract_trajectories(u.user_id, &u.records, &ExtractionConfig::default())?);
    }
    println!("{} trajectories from {} users", trajectories.len(), users.len());

    println!("{:>5} {:>12} {:>14} {:>12}", "M", "mean stay", "largest share", "transitions");
    for (m, fit) in &fits {
        let stay = mean_stay_seconds(&trajectories, *m)? / 60.0;
        let sizes = fit.cluster_sizes();
        let share = sizes[0] as f64 / geo.len() as f64;
        let tm = transition_counts(&trajectories, *m, true, 1)?;
        let moves: u64 = (0..*m).map(|a| tm.row_sum(a)).sum();
        println!("{m:>5} {stay:>9.1} min {:>13.1}% {moves:>12}", 100.0 * share);
    }

    let tm = transition_counts(&trajectories, 10, true, 5)?;
    let mut top = tm.exported();
    top.sort_by(|a, b| b.2.cmp(&a.2));
    println!("busiest M=10 transitions seen at least 5 times:");
    for (from, to, n) in top.iter().take(5) {
        println!("  {from} -> {to}: {n}");
    }
    Ok(())
}
