//! Synthetic mobility world: users hopping between anchor points, plus the
//! app, sensor and broadcast events their phones would emit.
//!
//! Each user owns a handful of personal anchors and shares a few public ones.
//! Dwell times are lognormal, transits are straight-line interpolations at a
//! constant speed, and the next anchor follows a per-user routine with some
//! randomness. When a dwell starts the phone emits one "dwell app" event; with
//! probability `feature_signal_strength` that app is a fixed function of the
//! anchor the user will visit next, otherwise it is uniform noise.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_rng, Rng};
use crate::trajectory::{Timestamp, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_anchors_per_user: usize,
    pub n_public_anchors: usize,
    pub public_anchors_per_user: usize,
    pub sim_days: usize,
    /// Seconds between consecutive location records.
    pub record_cadence: i64,
    /// Unix time of the first record.
    pub sim_start: Timestamp,
    /// Side length of the square the anchors live in.
    pub plane_size: f64,
    /// Plane units per minute while in transit.
    pub travel_speed: f64,
    /// Log-space mean of the dwell time in seconds.
    pub dwell_lognormal_mu: f64,
    pub dwell_lognormal_sigma: f64,
    /// Std-dev of the per-user offset added to `dwell_lognormal_mu`.
    pub dwell_mu_jitter: f64,
    /// Per-user sigma is scaled by a factor drawn from `1 ± dwell_sigma_jitter`.
    pub dwell_sigma_jitter: f64,
    /// Probability of following the user's habitual next anchor.
    pub routine_prob: f64,
    pub n_apps: usize,
    pub n_sensors: usize,
    pub n_broadcasts: usize,
    pub feature_signal_strength: f64,
    /// Background app launches per hour.
    pub background_app_rate: f64,
    /// Background broadcasts per hour.
    pub broadcast_rate: f64,
    /// Seconds between sensor readings.
    pub sensor_interval: i64,
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_anchors_per_user: 6,
            n_public_anchors: 12,
            public_anchors_per_user: 2,
            sim_days: 30,
            record_cadence: 60,
            sim_start: 1_483_228_800,
            plane_size: 100.0,
            travel_speed: 8.0,
            dwell_lognormal_mu: 2700f64.ln(),
            dwell_lognormal_sigma: 0.7,
            dwell_mu_jitter: 0.3,
            dwell_sigma_jitter: 0.2,
            routine_prob: 0.6,
            n_apps: 655,
            n_sensors: 238,
            n_broadcasts: 82,
            feature_signal_strength: 0.9,
            background_app_rate: 0.5,
            broadcast_rate: 1.0,
            sensor_interval: 300,
            rng_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_anchors_per_user", self.n_anchors_per_user),
            ("sim_days", self.sim_days),
            ("n_apps", self.n_apps),
            ("n_sensors", self.n_sensors),
            ("n_broadcasts", self.n_broadcasts),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::config(format!("world.{name} must be >= 1")));
            }
        }
        if self.public_anchors_per_user > self.n_public_anchors {
            return Err(Error::config(
                "world.public_anchors_per_user exceeds world.n_public_anchors",
            ));
        }
        if self.n_anchors_per_user + self.public_anchors_per_user < 2 {
            return Err(Error::config("each user needs at least two anchors"));
        }
        if !(0.0..=1.0).contains(&self.feature_signal_strength) {
            return Err(Error::config("world.feature_signal_strength must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.routine_prob) {
            return Err(Error::config("world.routine_prob must be in [0,1]"));
        }
        if self.record_cadence < 1 || self.sensor_interval < 1 {
            return Err(Error::config("cadences must be >= 1 second"));
        }
        if self.dwell_lognormal_sigma <= 0.0 || !self.dwell_lognormal_mu.is_finite() {
            return Err(Error::config("dwell lognormal parameters are invalid"));
        }
        if !(0.0..1.0).contains(&self.dwell_sigma_jitter) || self.dwell_mu_jitter < 0.0 {
            return Err(Error::config("dwell jitter out of range"));
        }
        if self.travel_speed <= 0.0 || self.plane_size <= 0.0 {
            return Err(Error::config("travel_speed and plane_size must be positive"));
        }
        if self.background_app_rate < 0.0 || self.broadcast_rate < 0.0 {
            return Err(Error::config("event rates must be non-negative"));
        }
        Ok(())
    }

    fn n_anchors(&self) -> usize {
        self.n_public_anchors + self.n_users * self.n_anchors_per_user
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &GeoPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    fn lerp(&self, other: &GeoPoint, frac: f64) -> GeoPoint {
        GeoPoint::new(
            self.x + (other.x - self.x) * frac,
            self.y + (other.y - self.y) * frac,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRecord {
    pub user_id: UserId,
    pub timestamp: Timestamp,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    AppUse(u32),
    SensorReading(u32, f64),
    Broadcast(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub user_id: UserId,
    pub timestamp: Timestamp,
    pub kind: EventKind,
}

/// One dwell at an anchor, as the generator planned it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub user_id: UserId,
    pub anchor: usize,
    pub arrive: f64,
    pub depart: f64,
    pub next_anchor: usize,
    pub dwell_app: u32,
    /// Whether `dwell_app` was derived from `next_anchor`.
    pub coupled: bool,
}

impl Visit {
    pub fn dwell_seconds(&self) -> f64 {
        self.depart - self.arrive
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub anchors: Vec<GeoPoint>,
    /// App emitted during a coupled dwell, indexed by the next anchor.
    pub app_of_anchor: Vec<u32>,
    pub geo: Vec<GeoRecord>,
    pub events: Vec<UsageEvent>,
    pub visits: Vec<Visit>,
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = child_rng(cfg.rng_seed, "world/anchors");
    let anchors: Vec<GeoPoint> = (0..cfg.n_anchors())
        .map(|_| {
            GeoPoint::new(
                rng.random::<f64>() * cfg.plane_size,
                rng.random::<f64>() * cfg.plane_size,
            )
        })
        .collect();
    let mut apps: Vec<u32> = (0..cfg.n_apps as u32).collect();
    apps.shuffle(&mut rng);
    let app_of_anchor: Vec<u32> = (0..anchors.len()).map(|a| apps[a % apps.len()]).collect();

    let per_user: Vec<UserTrace> = (0..cfg.n_users)
        .into_par_iter()
        .map(|u| simulate_user(cfg, u as UserId, &anchors, &app_of_anchor))
        .collect::<Result<_>>()?;

    let mut world = World {
        anchors,
        app_of_anchor,
        geo: Vec::new(),
        events: Vec::new(),
        visits: Vec::new(),
    };
    for trace in per_user {
        world.geo.extend(trace.geo);
        world.events.extend(trace.events);
        world.visits.extend(trace.visits);
    }
    Ok(world)
}

struct UserTrace {
    geo: Vec<GeoRecord>,
    events: Vec<UsageEvent>,
    visits: Vec<Visit>,
}

/// Number of leading sensors whose readings rise while the user is moving.
const MOTION_SENSORS: usize = 24;

fn simulate_user(
    cfg: &WorldConfig,
    user: UserId,
    anchors: &[GeoPoint],
    app_of_anchor: &[u32],
) -> Result<UserTrace> {
    let mut rng = child_rng(cfg.rng_seed, &format!("world/user/{user}"));

    let first_personal = cfg.n_public_anchors + user as usize * cfg.n_anchors_per_user;
    let mut own: Vec<usize> = (first_personal..first_personal + cfg.n_anchors_per_user).collect();
    own.extend(index::sample(&mut rng, cfg.n_public_anchors, cfg.public_anchors_per_user).into_iter());

    // habitual successor: a random cycle over the user's anchors
    let mut cycle = own.clone();
    cycle.shuffle(&mut rng);
    let habitual = |a: usize| -> usize {
        let pos = cycle.iter().position(|&c| c == a).unwrap();
        cycle[(pos + 1) % cycle.len()]
    };

    let mu = cfg.dwell_lognormal_mu + cfg.dwell_mu_jitter * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let sigma = cfg.dwell_lognormal_sigma * (1.0 + cfg.dwell_sigma_jitter * (2.0 * rng.random::<f64>() - 1.0));
    let dwell = LogNormal::new(mu, sigma).map_err(|e| Error::config(e.to_string()))?;

    let start = cfg.sim_start as f64;
    let end = start + (cfg.sim_days * 86_400) as f64;

    // plan the dwell/transit timeline
    let mut visits: Vec<Visit> = Vec::new();
    let mut anchor = own[rng.random_range(0..own.len())];
    let mut dwell_s: f64 = dwell.sample(&mut rng);
    let mut arrive = start - rng.random::<f64>() * dwell_s;
    let mut events: Vec<UsageEvent> = Vec::new();
    while arrive < end {
        let depart = arrive + dwell_s;
        let next = if rng.random::<f64>() < cfg.routine_prob {
            habitual(anchor)
        } else {
            let others: Vec<usize> = own.iter().copied().filter(|&a| a != anchor).collect();
            others[rng.random_range(0..others.len())]
        };
        let coupled = rng.random::<f64>() < cfg.feature_signal_strength;
        let noise_app = rng.random_range(0..cfg.n_apps as u32);
        let dwell_app = if coupled { app_of_anchor[next] } else { noise_app };
        let app_time = arrive + rng.random::<f64>() * dwell_s.min(60.0);
        push_event(&mut events, user, app_time, start, end, EventKind::AppUse(dwell_app));
        if rng.random::<f64>() < 0.5 {
            let b = (anchor % cfg.n_broadcasts) as u32;
            push_event(&mut events, user, arrive, start, end, EventKind::Broadcast(b));
        }
        visits.push(Visit {
            user_id: user,
            anchor,
            arrive,
            depart,
            next_anchor: next,
            dwell_app,
            coupled,
        });
        let travel = (anchors[anchor].dist2(&anchors[next]).sqrt() / cfg.travel_speed * 60.0).max(1.0);
        arrive = depart + travel;
        anchor = next;
        dwell_s = dwell.sample(&mut rng);
    }

    let position = |t: f64, visit_idx: usize| -> (GeoPoint, bool) {
        let v = &visits[visit_idx];
        if t < v.depart || visit_idx + 1 == visits.len() {
            (anchors[v.anchor], false)
        } else {
            let next = &visits[visit_idx + 1];
            let frac = (t - v.depart) / (next.arrive - v.depart);
            (anchors[v.anchor].lerp(&anchors[next.anchor], frac), true)
        }
    };
    // index of the visit whose [arrive, next.arrive) span holds t
    let locate = |t: f64| -> usize { visits.partition_point(|v| v.arrive <= t).saturating_sub(1) };

    let n_records = (cfg.sim_days as i64 * 86_400) / cfg.record_cadence;
    let mut geo = Vec::with_capacity(n_records as usize);
    let mut cursor = 0usize;
    for k in 0..n_records {
        let ts = cfg.sim_start + k * cfg.record_cadence;
        let t = ts as f64;
        while cursor + 1 < visits.len() && visits[cursor + 1].arrive <= t {
            cursor += 1;
        }
        geo.push(GeoRecord {
            user_id: user,
            timestamp: ts,
            point: position(t, cursor).0,
        });
    }

    // background apps and broadcasts as Poisson processes
    for (rate, is_app) in [(cfg.background_app_rate, true), (cfg.broadcast_rate, false)] {
        if rate <= 0.0 {
            continue;
        }
        let per_second = rate / 3600.0;
        let mut t = start;
        loop {
            t += -(1.0 - rng.random::<f64>()).ln() / per_second;
            if t >= end {
                break;
            }
            let kind = if is_app {
                EventKind::AppUse(rng.random_range(0..cfg.n_apps as u32))
            } else {
                EventKind::Broadcast(rng.random_range(0..cfg.n_broadcasts as u32))
            };
            push_event(&mut events, user, t, start, end, kind);
        }
    }

    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut ts = cfg.sim_start + rng.random_range(0..cfg.sensor_interval);
    while (ts as f64) < end {
        let t = ts as f64;
        let moving = position(t, locate(t)).1;
        let j = rng.random_range(0..cfg.n_sensors);
        let mut value = (j % 7) as f64 * 0.5 + noise.sample(&mut rng);
        if moving && j < MOTION_SENSORS {
            value += 1.0 + (j % 5) as f64;
        }
        events.push(UsageEvent {
            user_id: user,
            timestamp: ts,
            kind: EventKind::SensorReading(j as u32, value),
        });
        ts += cfg.sensor_interval;
    }

    events.sort_by_key(|e| e.timestamp);
    Ok(UserTrace { geo, events, visits })
}

fn push_event(events: &mut Vec<UsageEvent>, user: UserId, t: f64, start: f64, end: f64, kind: EventKind) {
    if t >= start && t < end {
        events.push(UsageEvent {
            user_id: user,
            timestamp: t.floor() as Timestamp,
            kind,
        });
    }
}

/// Device-off simulation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    /// Probability that any surviving record starts a gap.
    pub gap_rate: f64,
    pub gap_length_min: i64,
    pub gap_length_max: i64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            gap_rate: 1.0 / 240.0,
            gap_length_min: 600,
            gap_length_max: 3600,
        }
    }
}

impl GapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gap_rate) {
            return Err(Error::config("gaps.gap_rate must be in [0,1]"));
        }
        if self.gap_length_min < 1 || self.gap_length_max < self.gap_length_min {
            return Err(Error::config("gap length range is invalid"));
        }
        Ok(())
    }
}

pub trait Timestamped {
    fn timestamp(&self) -> Timestamp;
}

impl Timestamped for GeoRecord {
    fn timestamp(&self) -> Timestamp {
        self.timestamp
    }
}

/// Deletes contiguous spans from one user's sorted stream.
///
/// Each record outside an active gap starts a new gap with probability
/// `gap_rate`; the gap covers `[t, t + L)` with `L` uniform on the configured
/// integer range, and every record inside it is dropped.
pub fn inject_gaps<T: Timestamped + Clone>(stream: &[T], cfg: &GapConfig, rng: &mut Rng) -> Vec<T> {
    let mut out = Vec::with_capacity(stream.len());
    let mut gap_end = Timestamp::MIN;
    for r in stream {
        let t = r.timestamp();
        if t < gap_end {
            continue;
        }
        if cfg.gap_rate > 0.0 && rng.random::<f64>() < cfg.gap_rate {
            gap_end = t + rng.random_range(cfg.gap_length_min..=cfg.gap_length_max);
            continue;
        }
        out.push(r.clone());
    }
    out
}

/// Applies [`inject_gaps`] to every user's slice of a user-ordered geo stream.
pub fn inject_gaps_all(geo: &[GeoRecord], cfg: &GapConfig, seed: u64) -> Result<Vec<GeoRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(geo.len());
    for chunk in geo.chunk_by(|a, b| a.user_id == b.user_id) {
        let mut rng = child_rng(seed, &format!("gaps/user/{}", chunk[0].user_id));
        out.extend(inject_gaps(chunk, cfg, &mut rng));
    }
    Ok(out)
}
