//! CSV formats of every exported table.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::UserRecords;
use crate::querysim::TargetCriterion;
use crate::synthgen::{EventKind, GeoPoint, GeoRecord, UsageEvent};
use crate::trajectory::{Granularity, LocationIds, LocationRecord, Timestamp, UserId};

pub fn write_rows<W: Write, T: Serialize>(out: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read, T: DeserializeOwned>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRow {
    pub user_id: UserId,
    pub timestamp: Timestamp,
    pub x: f64,
    pub y: f64,
}

impl From<&GeoRecord> for GeoRow {
    fn from(r: &GeoRecord) -> Self {
        Self {
            user_id: r.user_id,
            timestamp: r.timestamp,
            x: r.point.x,
            y: r.point.y,
        }
    }
}

impl From<GeoRow> for GeoRecord {
    fn from(r: GeoRow) -> Self {
        Self {
            user_id: r.user_id,
            timestamp: r.timestamp,
            point: GeoPoint::new(r.x, r.y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKindName {
    App,
    Sensor,
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub user_id: UserId,
    pub timestamp: Timestamp,
    pub kind: EventKindName,
    pub index: u32,
    /// Reading value, sensors only.
    pub value: Option<f64>,
}

impl From<&UsageEvent> for EventRow {
    fn from(e: &UsageEvent) -> Self {
        let (kind, index, value) = match e.kind {
            EventKind::AppUse(a) => (EventKindName::App, a, None),
            EventKind::SensorReading(s, v) => (EventKindName::Sensor, s, Some(v)),
            EventKind::Broadcast(b) => (EventKindName::Broadcast, b, None),
        };
        Self {
            user_id: e.user_id,
            timestamp: e.timestamp,
            kind,
            index,
            value,
        }
    }
}

impl TryFrom<EventRow> for UsageEvent {
    type Error = Error;

    fn try_from(r: EventRow) -> Result<Self> {
        let kind = match (r.kind, r.value) {
            (EventKindName::App, _) => EventKind::AppUse(r.index),
            (EventKindName::Broadcast, _) => EventKind::Broadcast(r.index),
            (EventKindName::Sensor, Some(v)) => EventKind::SensorReading(r.index, v),
            (EventKindName::Sensor, None) => return Err(Error::parse("events.csv", "sensor row without value")),
        };
        Ok(UsageEvent {
            user_id: r.user_id,
            timestamp: r.timestamp,
            kind,
        })
    }
}

/// `user_id,timestamp,loc_m<M>...` with one location column per granularity.
pub fn write_records<W: Write>(out: W, users: &[UserRecords], m_values: &[Granularity]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["user_id".to_string(), "timestamp".to_string()];
    header.extend(m_values.iter().map(|m| format!("loc_m{m}")));
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for u in users {
        for r in &u.records {
            row.clear();
            row.push(u.user_id.to_string());
            row.push(r.timestamp.to_string());
            for &m in m_values {
                row.push(r.location(m)?.to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the records table back, grouped by user in file order.
pub fn read_records<R: Read>(input: R) -> Result<(Vec<Granularity>, Vec<UserRecords>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "user_id" || &header[1] != "timestamp" {
        return Err(Error::parse("records.csv", "expected user_id,timestamp,loc_m<M>... header"));
    }
    let m_values: Vec<Granularity> = header
        .iter()
        .skip(2)
        .map(|h| {
            h.strip_prefix("loc_m")
                .and_then(|m| m.parse().ok())
                .ok_or_else(|| Error::parse("records.csv header", h))
        })
        .collect::<Result<_>>()?;
    let num = |s: &str, what: &str| -> Result<i64> { s.parse().map_err(|_| Error::parse("records.csv", format!("bad {what} {s:?}"))) };
    let mut users: Vec<UserRecords> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let user = num(&rec[0], "user_id")? as UserId;
        let ts = num(&rec[1], "timestamp")?;
        let ids: LocationIds = m_values
            .iter()
            .enumerate()
            .map(|(i, &m)| Ok((m, num(&rec[i + 2], "location")? as u32)))
            .collect::<Result<_>>()?;
        if users.last().is_none_or(|u| u.user_id != user) {
            users.push(UserRecords {
                user_id: user,
                records: Vec::new(),
            });
        }
        users.last_mut().unwrap().records.push(LocationRecord::new(ts, ids));
    }
    Ok((m_values, users))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidRow {
    pub m: Granularity,
    pub cluster_id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub m: Granularity,
    pub from: u32,
    pub to: u32,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub trajectory_id: usize,
    pub user_id: UserId,
    pub start: Timestamp,
    pub end: Timestamp,
    pub n_records: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StayStatsRow {
    pub m: Granularity,
    pub mean_stay_s: f64,
    pub n_segments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: usize,
    pub trajectory_id: usize,
    pub split_index: usize,
    pub partition: crate::querysim::Partition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub query_id: usize,
    pub trajectory_id: usize,
    pub split_index: usize,
    pub m: Granularity,
    pub criterion: &'static str,
    pub k: Option<u32>,
    pub target: u32,
    pub current: u32,
    pub target_stay_s: i64,
}

/// Owned counterpart of [`LabeledRow`] for reading.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct LabeledRowIn {
    pub query_id: usize,
    pub trajectory_id: usize,
    pub split_index: usize,
    pub m: Granularity,
    pub criterion: String,
    pub k: Option<u32>,
    pub target: u32,
    pub current: u32,
    pub target_stay_s: i64,
}

impl LabeledRowIn {
    pub fn criterion(&self) -> Result<TargetCriterion> {
        TargetCriterion::from_parts(&self.criterion, self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestingSizeCsvRow {
    pub criterion: String,
    pub k: Option<u32>,
    pub m: Granularity,
    pub count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub query_id: usize,
    pub target: u32,
    pub prediction: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub m: Granularity,
    pub criterion: String,
    pub k: Option<u32>,
    pub model: String,
    pub groups: String,
    pub n_test: usize,
    pub accuracy: f64,
    pub relative_perf: Option<f64>,
    pub mean_target_stay_s: f64,
}

impl From<&crate::eval::ScenarioResult> for ResultRow {
    fn from(r: &crate::eval::ScenarioResult) -> Self {
        Self {
            m: r.m,
            criterion: r.criterion.name().to_string(),
            k: r.criterion.k(),
            model: r.model.clone(),
            groups: r.groups.clone(),
            n_test: r.n_test,
            accuracy: r.accuracy,
            relative_perf: r.relative_perf,
            mean_target_stay_s: r.mean_target_stay_seconds,
        }
    }
}

impl TryFrom<ResultRow> for crate::eval::ScenarioResult {
    type Error = Error;

    fn try_from(r: ResultRow) -> Result<Self> {
        Ok(Self {
            m: r.m,
            criterion: TargetCriterion::from_parts(&r.criterion, r.k)?,
            model: r.model,
            groups: r.groups,
            n_test: r.n_test,
            accuracy: r.accuracy,
            relative_perf: r.relative_perf,
            mean_target_stay_seconds: r.mean_target_stay_s,
        })
    }
}

/// One row per query: `query_id` followed by the group's columns.
pub fn write_feature_matrix<W: Write>(out: W, column_prefix: &str, rows: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let width = rows.first().map_or(0, |r| r.1.len());
    let mut header = vec!["query_id".to_string()];
    header.extend((0..width).map(|i| format!("{column_prefix}{i}")));
    w.write_record(&header)?;
    for (id, values) in rows {
        let mut rec = vec![id.to_string()];
        rec.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let ids = |a: u32, b: u32| -> LocationIds { [(5, a), (25, b)].into_iter().collect() };
        let users = vec![
            UserRecords {
                user_id: 0,
                records: vec![LocationRecord::new(60, ids(1, 7)), LocationRecord::new(120, ids(2, 9))],
            },
            UserRecords {
                user_id: 3,
                records: vec![LocationRecord::new(60, ids(4, 20))],
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &users, &[5, 25]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("user_id,timestamp,loc_m5,loc_m25\n0,60,1,7\n"));
        let (ms, back) = read_records(buf.as_slice()).unwrap();
        assert_eq!(ms, vec![5, 25]);
        assert_eq!(back, users);
    }

    #[test]
    fn events_round_trip_with_exact_floats() {
        let events = vec![
            UsageEvent {
                user_id: 1,
                timestamp: 10,
                kind: EventKind::SensorReading(3, 0.1 + 0.2),
            },
            UsageEvent {
                user_id: 1,
                timestamp: 11,
                kind: EventKind::AppUse(654),
            },
        ];
        let mut buf = Vec::new();
        write_rows(&mut buf, events.iter().map(EventRow::from)).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("user_id,timestamp,kind,index,value\n"));
        let rows: Vec<EventRow> = read_rows(buf.as_slice()).unwrap();
        let back: Vec<UsageEvent> = rows.into_iter().map(UsageEvent::try_from).collect::<Result<_>>().unwrap();
        assert_eq!(back, events);
    }
}
