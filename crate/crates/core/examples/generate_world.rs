//! Synthesize a small world, knock device-off gaps into it and write the CSVs.
//!
//! cargo run --example generate_world -- [OUT_DIR]

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;

use mobpred::io::{write_rows, EventRow, GeoRow};
use mobpred::synthgen::{generate_world, inject_gaps_all, EventKind, GapConfig, WorldConfig};

fn main() -> mobpred::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-world".into());
    std::fs::create_dir_all(&out)?;

    let cfg = WorldConfig {
        n_users: 5,
        sim_days: 7,
        rng_seed: 2024,
        ..Default::default()
    };
    let world = generate_world(&cfg)?;
    let geo = inject_gaps_all(&world.geo, &GapConfig::default(), 99)?;

    println!("{} anchors, {} planned dwells", world.anchors.len(), world.visits.len());
    println!(
        "{} geo records generated, {} left after device-off gaps ({:.1}% removed)",
        world.geo.len(),
        geo.len(),
        100.0 * (1.0 - geo.len() as f64 / world.geo.len() as f64)
    );

    let mut by_user: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for v in &world.visits {
        by_user.entry(v.user_id).or_default().push(v.dwell_seconds() / 60.0);
    }
    for (u, d) in &by_user {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        println!("  user {u}: {} dwells, mean {mean:.0} min", d.len());
    }

    let coupled = world.visits.iter().filter(|v| v.coupled).count();
    println!(
        "{coupled} of {} dwells carry the app that predicts the next anchor",
        world.visits.len()
    );
    let mut kinds = [0usize; 3];
    for e in &world.events {
        kinds[match e.kind {
            EventKind::AppUse(_) => 0,
            EventKind::SensorReading(..) => 1,
            EventKind::Broadcast(_) => 2,
        }] += 1;
    }
    println!("events: {} app, {} sensor, {} broadcast", kinds[0], kinds[1], kinds[2]);

    write_rows(BufWriter::new(File::create(format!("{out}/geo.csv"))?), geo.iter().map(GeoRow::from))?;
    write_rows(
        BufWriter::new(File::create(format!("{out}/events.csv"))?),
        world.events.iter().map(EventRow::from),
    )?;
    println!("wrote {out}/geo.csv and {out}/events.csv");
    Ok(())
}
