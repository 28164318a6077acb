//! Behavioral features aggregated over a query's history window.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{EventKind, UsageEvent, WorldConfig};
use crate::trajectory::{Timestamp, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub n_apps: usize,
    pub n_sensors: usize,
    pub n_broadcasts: usize,
}

impl From<&WorldConfig> for FeatureDims {
    fn from(cfg: &WorldConfig) -> Self {
        Self {
            n_apps: cfg.n_apps,
            n_sensors: cfg.n_sensors,
            n_broadcasts: cfg.n_broadcasts,
        }
    }
}

/// Hour of day and ISO day of week (Monday = 0) of both window ends, in UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeContext {
    pub begin_hour: u8,
    pub begin_dow: u8,
    pub end_hour: u8,
    pub end_dow: u8,
}

pub fn hour_of_day(t: Timestamp) -> u8 {
    (t.rem_euclid(86_400) / 3600) as u8
}

pub fn day_of_week(t: Timestamp) -> u8 {
    // 1970-01-01 was a Thursday
    (t.div_euclid(86_400) + 3).rem_euclid(7) as u8
}

impl TimeContext {
    pub fn of_window(begin: Timestamp, end: Timestamp) -> Self {
        Self {
            begin_hour: hour_of_day(begin),
            begin_dow: day_of_week(begin),
            end_hour: hour_of_day(end),
            end_dow: day_of_week(end),
        }
    }

    pub fn as_array(&self) -> [u8; 4] {
        [self.begin_hour, self.begin_dow, self.end_hour, self.end_dow]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub app: Vec<u8>,
    pub sensor: Vec<f64>,
    pub broadcast: Vec<u32>,
    pub time: TimeContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    App,
    Sensor,
    Broadcast,
    Time,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 4] = [
        FeatureGroup::App,
        FeatureGroup::Sensor,
        FeatureGroup::Broadcast,
        FeatureGroup::Time,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FeatureGroup::App => "app",
            FeatureGroup::Sensor => "sensor",
            FeatureGroup::Broadcast => "broadcast",
            FeatureGroup::Time => "time",
        }
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "app" => Ok(FeatureGroup::App),
            "sensor" => Ok(FeatureGroup::Sensor),
            "broadcast" => Ok(FeatureGroup::Broadcast),
            "time" => Ok(FeatureGroup::Time),
            other => Err(Error::parse("feature group", other)),
        }
    }
}

/// Per-user, time-sorted view over a usage event stream.
#[derive(Debug, Clone, Default)]
pub struct EventStore {
    by_user: BTreeMap<UserId, Vec<UsageEvent>>,
}

impl EventStore {
    pub fn new(events: &[UsageEvent]) -> Self {
        let mut by_user: BTreeMap<UserId, Vec<UsageEvent>> = BTreeMap::new();
        for e in events {
            by_user.entry(e.user_id).or_default().push(*e);
        }
        for list in by_user.values_mut() {
            list.sort_by_key(|e| e.timestamp);
        }
        Self { by_user }
    }

    /// Events of `user` with `begin <= timestamp <= end`.
    pub fn window(&self, user: UserId, begin: Timestamp, end: Timestamp) -> &[UsageEvent] {
        let Some(list) = self.by_user.get(&user) else {
            return &[];
        };
        let lo = list.partition_point(|e| e.timestamp < begin);
        let hi = list.partition_point(|e| e.timestamp <= end);
        &list[lo..hi.max(lo)]
    }
}

/// Aggregates the events of one history window.
///
/// `events` must already be restricted to the window; the time context comes
/// from the window bounds alone.
pub fn extract_features(
    events: &[UsageEvent],
    begin: Timestamp,
    end: Timestamp,
    dims: &FeatureDims,
) -> Result<FeatureVector> {
    let mut app = vec![0u8; dims.n_apps];
    let mut sums = vec![0.0f64; dims.n_sensors];
    let mut counts = vec![0u32; dims.n_sensors];
    let mut broadcast = vec![0u32; dims.n_broadcasts];
    let oob = |group: &str, idx: u32, len: usize| Error::DimensionMismatch {
        group: group.to_string(),
        expected: len,
        actual: idx as usize + 1,
    };
    for e in events {
        match e.kind {
            EventKind::AppUse(a) => *app.get_mut(a as usize).ok_or_else(|| oob("app", a, dims.n_apps))? = 1,
            EventKind::SensorReading(s, v) => {
                let i = s as usize;
                if i >= dims.n_sensors {
                    return Err(oob("sensor", s, dims.n_sensors));
                }
                sums[i] += v;
                counts[i] += 1;
            }
            EventKind::Broadcast(b) => {
                *broadcast
                    .get_mut(b as usize)
                    .ok_or_else(|| oob("broadcast", b, dims.n_broadcasts))? += 1
            }
        }
    }
    let sensor = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / f64::from(c) })
        .collect();
    Ok(FeatureVector {
        app,
        sensor,
        broadcast,
        time: TimeContext::of_window(begin, end),
    })
}

/// Features of a history window looked up in an [`EventStore`].
pub fn window_features(
    store: &EventStore,
    user: UserId,
    begin: Timestamp,
    end: Timestamp,
    dims: &FeatureDims,
) -> Result<FeatureVector> {
    extract_features(store.window(user, begin, end), begin, end, dims)
}
