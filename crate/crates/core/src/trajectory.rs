//! Location records, trajectory extraction and run-length stay segmentation.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Seconds since the Unix epoch.
pub type Timestamp = i64;
/// Cluster identifier at one granularity, always `< M`.
pub type LocationId = u32;
/// Number of K-Means clusters; larger means finer locations.
pub type Granularity = u32;
pub type UserId = u32;

/// Location IDs of one record, keyed by granularity and kept sorted by it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationIds(SmallVec<[(Granularity, LocationId); 6]>);

impl LocationIds {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the ID for granularity `m`.
    pub fn insert(&mut self, m: Granularity, id: LocationId) {
        match self.0.binary_search_by_key(&m, |&(g, _)| g) {
            Ok(pos) => self.0[pos].1 = id,
            Err(pos) => self.0.insert(pos, (m, id)),
        }
    }

    pub fn get(&self, m: Granularity) -> Option<LocationId> {
        self.0
            .binary_search_by_key(&m, |&(g, _)| g)
            .ok()
            .map(|pos| self.0[pos].1)
    }

    pub fn granularities(&self) -> impl Iterator<Item = Granularity> + '_ {
        self.0.iter().map(|&(g, _)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Granularity, LocationId)> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(Granularity, LocationId)> for LocationIds {
    fn from_iter<I: IntoIterator<Item = (Granularity, LocationId)>>(iter: I) -> Self {
        let mut ids = LocationIds::new();
        for (m, id) in iter {
            ids.insert(m, id);
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub timestamp: Timestamp,
    pub location_ids: LocationIds,
}

impl LocationRecord {
    pub fn new(timestamp: Timestamp, location_ids: LocationIds) -> Self {
        Self {
            timestamp,
            location_ids,
        }
    }

    pub fn location(&self, m: Granularity) -> Result<LocationId> {
        self.location_ids
            .get(m)
            .ok_or(Error::MissingGranularity(m))
    }
}

/// A contiguous, gap-free run of one user's location records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: UserId,
    pub records: Vec<LocationRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn duration(&self) -> i64 {
        match (self.records.first(), self.records.last()) {
            (Some(first), Some(last)) => last.timestamp - first.timestamp,
            _ => 0,
        }
    }

    /// The raw location sequence at granularity `m`, one entry per record.
    pub fn locations(&self, m: Granularity) -> Result<Vec<LocationId>> {
        self.records.iter().map(|r| r.location(m)).collect()
    }
}

/// A maximal run of identical locations and how long the user stayed there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaySegment {
    pub location: LocationId,
    pub enter: Timestamp,
    pub leave: Timestamp,
    pub stay_seconds: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Inter-record gaps strictly larger than this start a new trajectory.
    pub gap_threshold: i64,
    /// Pieces shorter than this are discarded.
    pub min_duration: i64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            gap_threshold: 300,
            min_duration: 3600,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gap_threshold <= 0 || self.min_duration <= 0 {
            return Err(Error::config("extraction thresholds must be positive"));
        }
        if self.min_duration < self.gap_threshold {
            return Err(Error::config("min_duration must be >= gap_threshold"));
        }
        Ok(())
    }
}

fn check_sorted(records: &[LocationRecord]) -> Result<()> {
    for (i, pair) in records.windows(2).enumerate() {
        if pair[1].timestamp <= pair[0].timestamp {
            return Err(Error::Unsorted {
                index: i + 1,
                previous: pair[0].timestamp,
                timestamp: pair[1].timestamp,
            });
        }
    }
    Ok(())
}

/// Cuts a sorted record stream at every gap strictly larger than `gap_threshold`.
pub fn split_on_gaps(records: &[LocationRecord], gap_threshold: i64) -> Result<Vec<&[LocationRecord]>> {
    check_sorted(records)?;
    let mut pieces = Vec::new();
    let mut start = 0;
    for i in 1..records.len() {
        if records[i].timestamp - records[i - 1].timestamp > gap_threshold {
            pieces.push(&records[start..i]);
            start = i;
        }
    }
    if start < records.len() {
        pieces.push(&records[start..]);
    }
    Ok(pieces)
}

/// Splits one user's record stream into trajectories.
///
/// Pieces whose duration is below `cfg.min_duration` are dropped. Records are
/// copied unchanged, so consecutive duplicates survive.
pub fn extract_trajectories(
    user_id: UserId,
    records: &[LocationRecord],
    cfg: &ExtractionConfig,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let pieces = split_on_gaps(records, cfg.gap_threshold)?;
    Ok(pieces
        .into_iter()
        .filter(|p| p.last().unwrap().timestamp - p[0].timestamp >= cfg.min_duration)
        .map(|p| Trajectory {
            user_id,
            records: p.to_vec(),
        })
        .collect())
}

/// Run-length encodes a record slice at granularity `m`.
///
/// A segment is left when the next run's first record arrives; the final
/// segment closes at the last record's timestamp.
pub fn stay_segments_of(records: &[LocationRecord], m: Granularity) -> Result<Vec<StaySegment>> {
    let mut segments: Vec<StaySegment> = Vec::new();
    for record in records {
        let loc = record.location(m)?;
        match segments.last_mut() {
            Some(seg) if seg.location == loc => {}
            Some(seg) => {
                seg.leave = record.timestamp;
                seg.stay_seconds = seg.leave - seg.enter;
                segments.push(StaySegment {
                    location: loc,
                    enter: record.timestamp,
                    leave: record.timestamp,
                    stay_seconds: 0,
                });
            }
            None => segments.push(StaySegment {
                location: loc,
                enter: record.timestamp,
                leave: record.timestamp,
                stay_seconds: 0,
            }),
        }
    }
    if let (Some(seg), Some(last)) = (segments.last_mut(), records.last()) {
        seg.leave = last.timestamp;
        seg.stay_seconds = seg.leave - seg.enter;
    }
    Ok(segments)
}

pub fn stay_segments(traj: &Trajectory, m: Granularity) -> Result<Vec<StaySegment>> {
    if traj.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    stay_segments_of(&traj.records, m)
}

/// Mean stay over every segment of every trajectory at granularity `m`.
pub fn mean_stay_seconds(trajectories: &[Trajectory], m: Granularity) -> Result<f64> {
    let mut total = 0i64;
    let mut count = 0usize;
    for traj in trajectories {
        for seg in stay_segments(traj, m)? {
            total += seg.stay_seconds;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total as f64 / count as f64 })
}

/// Collapses consecutive duplicates.
pub fn dedup_consecutive<T: PartialEq + Copy>(seq: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(seq.len());
    for &x in seq {
        if out.last() != Some(&x) {
            out.push(x);
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use proptest::prelude::*;

    const A: u32 = 0;
    const B: u32 = 1;
    const C: u32 = 2;

    #[test]
    fn short_pieces_are_dropped() {
        let recs = records(&[A, A, A, A, A], &[0, 60, 120, 600, 660]);
        let pieces = split_on_gaps(&recs, 300).unwrap();
        assert_eq!(pieces.len(), 2);
        let trajs = extract_trajectories(1, &recs, &ExtractionConfig::default()).unwrap();
        assert!(trajs.is_empty());
    }

    #[test]
    fn single_long_piece() {
        let recs = cadence(&[A; 70], 60);
        let trajs = extract_trajectories(1, &recs, &ExtractionConfig::default()).unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].len(), 70);
        assert_eq!(trajs[0].duration(), 4140);
    }

    #[test]
    fn gap_equal_to_threshold_keeps_together() {
        let recs = records(&[A, B], &[0, 300]);
        assert_eq!(split_on_gaps(&recs, 300).unwrap().len(), 1);
        let recs = records(&[A, B], &[0, 301]);
        assert_eq!(split_on_gaps(&recs, 300).unwrap().len(), 2);
    }

    #[test]
    fn empty_and_unsorted_input() {
        assert!(extract_trajectories(1, &[], &ExtractionConfig::default())
            .unwrap()
            .is_empty());
        let recs = records(&[A, B, C], &[0, 120, 60]);
        assert!(matches!(
            extract_trajectories(1, &recs, &ExtractionConfig::default()),
            Err(Error::Unsorted { index: 2, .. })
        ));
        let dup = records(&[A, B], &[60, 60]);
        assert!(extract_trajectories(1, &dup, &ExtractionConfig::default()).is_err());
    }

    #[test]
    fn invalid_extraction_config() {
        let cfg = ExtractionConfig {
            gap_threshold: 600,
            min_duration: 300,
        };
        assert!(cfg.validate().is_err());
        let cfg = ExtractionConfig {
            gap_threshold: 0,
            min_duration: 300,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn segments_of_three_records() {
        let traj = Trajectory {
            user_id: 0,
            records: cadence(&[A, A, B], 60),
        };
        let segs = stay_segments(&traj, 5).unwrap();
        let flat: Vec<_> = segs
            .iter()
            .map(|s| (s.location, s.enter, s.leave, s.stay_seconds))
            .collect();
        assert_eq!(flat, vec![(A, 0, 120, 120), (B, 120, 120, 0)]);
    }

    #[test]
    fn segments_of_example_sequence() {
        let traj = Trajectory {
            user_id: 0,
            records: cadence(&[A, A, B, B, C, A], 60),
        };
        let segs = stay_segments(&traj, 5).unwrap();
        let flat: Vec<_> = segs.iter().map(|s| (s.location, s.enter, s.leave)).collect();
        assert_eq!(flat, vec![(A, 0, 120), (B, 120, 240), (C, 240, 300), (A, 300, 300)]);
    }

    #[test]
    fn missing_granularity_is_named() {
        let traj = Trajectory {
            user_id: 0,
            records: cadence(&[A], 60),
        };
        let err = stay_segments(&traj, 25).unwrap_err();
        assert!(matches!(err, Error::MissingGranularity(25)));
        assert!(err.to_string().contains("25"));
    }

    fn stream() -> impl Strategy<Value = Vec<LocationRecord>> {
        prop::collection::vec((1i64..700, 0u32..4), 0..120).prop_map(|steps| {
            let mut t = 0;
            steps
                .into_iter()
                .map(|(dt, loc)| {
                    t += dt;
                    LocationRecord::new(t, [(5, loc)].into_iter().collect())
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn piece_count_matches_gap_scan(recs in stream(), gap in 100i64..600) {
            let pieces = split_on_gaps(&recs, gap).unwrap();
            let mut expected = usize::from(!recs.is_empty());
            for i in 1..recs.len() {
                if recs[i].timestamp - recs[i - 1].timestamp > gap {
                    expected += 1;
                }
            }
            prop_assert_eq!(pieces.len(), expected);
        }

        #[test]
        fn extraction_conserves_and_is_idempotent(recs in stream()) {
            let cfg = ExtractionConfig { gap_threshold: 400, min_duration: 1200 };
            let pieces = split_on_gaps(&recs, cfg.gap_threshold).unwrap();
            let trajs = extract_trajectories(3, &recs, &cfg).unwrap();
            let kept: usize = trajs.iter().map(|t| t.len()).sum();
            let dropped: usize = pieces
                .iter()
                .filter(|p| p.last().unwrap().timestamp - p[0].timestamp < cfg.min_duration)
                .map(|p| p.len())
                .sum();
            prop_assert_eq!(kept + dropped, recs.len());
            for t in &trajs {
                prop_assert!(t.duration() >= cfg.min_duration);
                let again = extract_trajectories(3, &t.records, &cfg).unwrap();
                prop_assert_eq!(again.len(), 1);
                prop_assert_eq!(&again[0], t);
            }
        }

        #[test]
        fn stays_sum_to_duration_and_round_trip(recs in stream()) {
            prop_assume!(!recs.is_empty());
            let traj = Trajectory { user_id: 0, records: recs };
            let segs = stay_segments(&traj, 5).unwrap();
            let total: i64 = segs.iter().map(|s| s.stay_seconds).sum();
            prop_assert_eq!(total, traj.records.last().unwrap().timestamp - traj.records[0].timestamp);
            let from_segments: Vec<u32> = segs.iter().map(|s| s.location).collect();
            prop_assert_eq!(from_segments, dedup_consecutive(&traj.locations(5).unwrap()));
            for pair in segs.windows(2) {
                prop_assert_ne!(pair[0].location, pair[1].location);
            }
            prop_assert!(segs.iter().all(|s| s.stay_seconds >= 0));
        }
    }
}
