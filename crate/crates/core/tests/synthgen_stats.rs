//! Distributional checks on the world generator and the gap injector.

use statrs::distribution::{ChiSquared, ContinuousCDF, LogNormal};

use mobpred::io::{write_rows, EventRow, GeoRow};
use mobpred::rng::rng_from_seed;
use mobpred::synthgen::{generate_world, inject_gaps, GapConfig, GeoPoint, GeoRecord, WorldConfig};

fn one_user(days: usize, apps: usize, signal: f64) -> WorldConfig {
    WorldConfig {
        n_users: 1,
        sim_days: days,
        n_apps: apps,
        feature_signal_strength: signal,
        rng_seed: 77,
        ..Default::default()
    }
}

/// Pearson chi-square p-value of independence between next anchor and dwell app.
fn independence_p(cfg: &WorldConfig) -> (f64, usize) {
    let world = generate_world(cfg).unwrap();
    let mut anchors: Vec<usize> = world.visits.iter().map(|v| v.next_anchor).collect();
    anchors.sort_unstable();
    anchors.dedup();
    let rows = anchors.len();
    let cols = cfg.n_apps;
    let mut table = vec![vec![0f64; cols]; rows];
    for v in &world.visits {
        let r = anchors.binary_search(&v.next_anchor).unwrap();
        table[r][v.dwell_app as usize] += 1.0;
    }
    let n: f64 = table.iter().flatten().sum();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let mut stat = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let expected = row_sums[r] * col_sums[c] / n;
            stat += (table[r][c] - expected).powi(2) / expected;
        }
    }
    let df = ((rows - 1) * (cols - 1)) as f64;
    (ChiSquared::new(df).unwrap().sf(stat), world.visits.len())
}

#[test]
fn zero_signal_leaves_app_independent_of_next_anchor() {
    let (p, n) = independence_p(&one_user(450, 8, 0.0));
    assert!(n >= 10_000, "only {n} dwells");
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn planted_signal_is_detectable() {
    // same test must have power, or the null result above means nothing
    let (p, _) = independence_p(&one_user(450, 8, 0.8));
    assert!(p < 1e-6, "p = {p}");
}

#[test]
fn dwell_times_follow_the_configured_lognormal() {
    let cfg = WorldConfig {
        n_users: 10,
        sim_days: 50,
        dwell_mu_jitter: 0.0,
        dwell_sigma_jitter: 0.0,
        rng_seed: 5,
        ..Default::default()
    };
    let world = generate_world(&cfg).unwrap();
    let mut dwells: Vec<f64> = world.visits.iter().map(|v| v.dwell_seconds()).collect();
    assert!(dwells.len() >= 10_000, "only {} dwells", dwells.len());
    dwells.sort_by(f64::total_cmp);
    let target = LogNormal::new(cfg.dwell_lognormal_mu, cfg.dwell_lognormal_sigma).unwrap();
    let n = dwells.len() as f64;
    let ks = dwells
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = target.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "KS statistic {ks}");
}

#[test]
fn one_day_at_one_minute_is_1440_points() {
    let world = generate_world(&one_user(1, 655, 0.9)).unwrap();
    assert_eq!(world.geo.len(), 1440);
    assert!(world.geo.windows(2).all(|w| w[1].timestamp - w[0].timestamp == 60));
}

#[test]
fn same_seed_gives_identical_csv_bytes() {
    let csv = |seed| {
        let world = generate_world(&WorldConfig {
            n_users: 3,
            sim_days: 3,
            rng_seed: seed,
            ..Default::default()
        })
        .unwrap();
        let mut geo = Vec::new();
        write_rows(&mut geo, world.geo.iter().map(GeoRow::from)).unwrap();
        let mut events = Vec::new();
        write_rows(&mut events, world.events.iter().map(EventRow::from)).unwrap();
        (geo, events)
    };
    assert_eq!(csv(9), csv(9));
    assert_ne!(csv(9).0, csv(10).0);
}

fn minute_stream(n: i64) -> Vec<GeoRecord> {
    (0..n)
        .map(|k| GeoRecord {
            user_id: 0,
            timestamp: k * 60,
            point: GeoPoint::new(0.0, 0.0),
        })
        .collect()
}

/// Long-run deleted fraction: each kept record starts a gap with
/// probability p, and a gap of length L swallows ceil(L/60) records.
fn expected_deleted_fraction(cfg: &GapConfig) -> f64 {
    let lengths = cfg.gap_length_min..=cfg.gap_length_max;
    let n = lengths.clone().count() as f64;
    let mean_swallowed: f64 = lengths.map(|l| (l as f64 / 60.0).ceil()).sum::<f64>() / n;
    let p = cfg.gap_rate;
    mean_swallowed / (mean_swallowed + (1.0 - p) / p)
}

#[test]
fn deleted_fraction_matches_expectation() {
    let stream = minute_stream(30 * 1440);
    for cfg in [
        GapConfig::default(),
        GapConfig {
            gap_rate: 0.02,
            gap_length_min: 120,
            gap_length_max: 900,
        },
    ] {
        let mut deleted = 0usize;
        for seed in 0..100 {
            deleted += stream.len() - inject_gaps(&stream, &cfg, &mut rng_from_seed(seed)).len();
        }
        let observed = deleted as f64 / (100 * stream.len()) as f64;
        let expected = expected_deleted_fraction(&cfg);
        assert!(
            (observed / expected - 1.0).abs() < 0.10,
            "{cfg:?}: observed {observed}, expected {expected}"
        );
    }
}

#[test]
fn gaps_remove_contiguous_spans_only() {
    let stream = minute_stream(5000);
    let kept = inject_gaps(&stream, &GapConfig::default(), &mut rng_from_seed(1));
    assert!(kept.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    for w in kept.windows(2) {
        let hole = w[1].timestamp - w[0].timestamp;
        // a hole is either no gap or one (or back-to-back) device-off spans
        assert!(hole == 60 || hole > 600, "hole of {hole}s");
    }
}
