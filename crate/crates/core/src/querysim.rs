//! Prediction queries: history/future splits, target labeling under each
//! salience criterion, and trajectory-grouped dataset partitioning.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trajectory::{stay_segments_of, Granularity, LocationId, LocationRecord, StaySegment, Trajectory};

/// A trajectory cut into history (`records[..split_index]`) and future.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub id: usize,
    pub trajectory: usize,
    /// Index of the first future record, i.e. the history length.
    pub split_index: usize,
}

impl Query {
    pub fn history<'a>(&self, traj: &'a Trajectory) -> &'a [LocationRecord] {
        &traj.records[..self.split_index]
    }

    pub fn future<'a>(&self, traj: &'a Trajectory) -> &'a [LocationRecord] {
        &traj.records[self.split_index..]
    }

    pub fn current_location(&self, traj: &Trajectory, m: Granularity) -> Result<LocationId> {
        traj.records[self.split_index - 1].location(m)
    }

    /// History locations at granularity `m`, one per record.
    pub fn history_locations(&self, traj: &Trajectory, m: Granularity) -> Result<Vec<LocationId>> {
        self.history(traj).iter().map(|r| r.location(m)).collect()
    }
}

/// Inclusive range of history lengths that leave at least `min_frac` of the
/// records on both sides, or `None` if the trajectory is too short.
pub fn valid_split_range(n: usize, min_frac: f64) -> Option<(usize, usize)> {
    if n < 2 {
        return None;
    }
    // ceil with a guard against representation error in n * min_frac
    let lo = ((n as f64 * min_frac) - 1e-9).ceil().max(1.0) as usize;
    let hi = n.checked_sub(lo)?;
    (lo <= hi && hi < n).then_some((lo, hi))
}

/// Draws up to `n_per_traj` distinct split points for one trajectory.
///
/// Query IDs start at `first_id` and increase in draw order.
pub fn simulate_queries(
    trajectory: usize,
    traj: &Trajectory,
    n_per_traj: usize,
    min_frac: f64,
    first_id: usize,
    rng: &mut Rng,
) -> Vec<Query> {
    let Some((lo, hi)) = valid_split_range(traj.len(), min_frac) else {
        return Vec::new();
    };
    let width = hi - lo + 1;
    index::sample(rng, width, n_per_traj.min(width))
        .into_iter()
        .enumerate()
        .map(|(k, offset)| Query {
            id: first_id + k,
            trajectory,
            split_index: lo + offset,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetCriterion {
    /// First future location different from the current one.
    Successive,
    /// First future stay of at least this many minutes away from the current location.
    ImportantAtK(u32),
    /// Longest stay among the first K future segments, excluding the current location.
    LongestAtK(u32),
}

impl TargetCriterion {
    pub fn defaults() -> Vec<TargetCriterion> {
        use TargetCriterion::*;
        vec![
            Successive,
            ImportantAtK(2),
            ImportantAtK(5),
            ImportantAtK(10),
            LongestAtK(3),
            LongestAtK(5),
            LongestAtK(10),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            TargetCriterion::Successive => "successive",
            TargetCriterion::ImportantAtK(_) => "important",
            TargetCriterion::LongestAtK(_) => "longest",
        }
    }

    pub fn k(&self) -> Option<u32> {
        match *self {
            TargetCriterion::Successive => None,
            TargetCriterion::ImportantAtK(k) | TargetCriterion::LongestAtK(k) => Some(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TargetCriterion::ImportantAtK(0) | TargetCriterion::LongestAtK(0) => {
                Err(Error::config(format!("criterion {self} needs K >= 1")))
            }
            _ => Ok(()),
        }
    }

    pub fn from_parts(name: &str, k: Option<u32>) -> Result<Self> {
        let c = match (name, k) {
            ("successive", None) => TargetCriterion::Successive,
            ("important", Some(k)) => TargetCriterion::ImportantAtK(k),
            ("longest", Some(k)) => TargetCriterion::LongestAtK(k),
            _ => return Err(Error::parse("criterion", format!("{name} {k:?}"))),
        };
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for TargetCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k() {
            None => write!(f, "{}", self.name()),
            Some(k) => write!(f, "{}@{}", self.name(), k),
        }
    }
}

impl FromStr for TargetCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.split_once('@') {
            None => Self::from_parts(&s, None),
            Some((name, k)) => {
                let k = k.parse().map_err(|e| Error::parse("criterion K", e))?;
                Self::from_parts(name, Some(k))
            }
        }
    }
}

impl Serialize for TargetCriterion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TargetCriterion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The chosen target segment of a future window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetSelection {
    pub location: LocationId,
    pub stay_seconds: i64,
    pub segment_index: usize,
}

/// Applies a criterion to already segmented future stays. `None` means the
/// query has no label under this criterion.
pub fn select_target_from_segments(
    segments: &[StaySegment],
    current: LocationId,
    criterion: TargetCriterion,
) -> Option<TargetSelection> {
    let pick = |i: usize| TargetSelection {
        location: segments[i].location,
        stay_seconds: segments[i].stay_seconds,
        segment_index: i,
    };
    match criterion {
        TargetCriterion::Successive => segments.iter().position(|s| s.location != current).map(pick),
        TargetCriterion::ImportantAtK(k) => segments
            .iter()
            .position(|s| s.location != current && s.stay_seconds >= 60 * i64::from(k))
            .map(pick),
        TargetCriterion::LongestAtK(k) => {
            let k = k as usize;
            if segments.len() < k {
                return None;
            }
            let mut best: Option<usize> = None;
            for (i, s) in segments[..k].iter().enumerate() {
                if s.location == current {
                    continue;
                }
                // strict comparison keeps the earliest of equal stays
                if best.is_none_or(|b| s.stay_seconds > segments[b].stay_seconds) {
                    best = Some(i);
                }
            }
            best.map(pick)
        }
    }
}

pub fn select_target(
    future: &[LocationRecord],
    current: LocationId,
    criterion: TargetCriterion,
    m: Granularity,
) -> Result<Option<TargetSelection>> {
    if future.is_empty() {
        return Err(Error::EmptyInput("future window"));
    }
    let segments = stay_segments_of(future, m)?;
    Ok(select_target_from_segments(&segments, current, criterion))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query: Query,
    pub criterion: TargetCriterion,
    pub granularity: Granularity,
    pub current: LocationId,
    pub target: LocationId,
    pub target_stay_seconds: i64,
}

/// One (criterion, M) cell of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scenario {
    pub m: Granularity,
    pub criterion: TargetCriterion,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}_{}", self.m, self.criterion)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestingSizeRow {
    pub criterion: TargetCriterion,
    pub m: Granularity,
    /// Labeled queries over all partitions.
    pub count: usize,
    /// Labeled queries in the test partition.
    pub test_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub cells: BTreeMap<Scenario, Vec<LabeledQuery>>,
}

impl LabeledDataset {
    pub fn cell(&self, scenario: Scenario) -> &[LabeledQuery] {
        self.cells.get(&scenario).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Per-cell counts; `is_test` decides which queries count towards `test_count`.
    pub fn testing_size_table(&self, is_test: impl Fn(&Query) -> bool) -> Vec<TestingSizeRow> {
        self.cells
            .iter()
            .map(|(sc, qs)| TestingSizeRow {
                criterion: sc.criterion,
                m: sc.m,
                count: qs.len(),
                test_count: qs.iter().filter(|lq| is_test(&lq.query)).count(),
            })
            .collect()
    }
}

/// Labels every query under every (criterion, M) pair; unlabeled queries
/// are dropped from that cell only.
pub fn label_dataset(
    trajectories: &[Trajectory],
    queries: &[Query],
    criteria: &[TargetCriterion],
    m_values: &[Granularity],
) -> Result<LabeledDataset> {
    let mut cells: BTreeMap<Scenario, Vec<LabeledQuery>> = BTreeMap::new();
    for &m in m_values {
        for &criterion in criteria {
            cells.insert(Scenario { m, criterion }, Vec::new());
        }
    }
    for q in queries {
        let traj = &trajectories[q.trajectory];
        let future = q.future(traj);
        for &m in m_values {
            let current = q.current_location(traj, m)?;
            let segments = stay_segments_of(future, m)?;
            for &criterion in criteria {
                if let Some(sel) = select_target_from_segments(&segments, current, criterion) {
                    cells.get_mut(&Scenario { m, criterion }).unwrap().push(LabeledQuery {
                        query: *q,
                        criterion,
                        granularity: m,
                        current,
                        target: sel.location,
                        target_stay_seconds: sel.stay_seconds,
                    });
                }
            }
        }
    }
    Ok(LabeledDataset { cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub fn name(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(Error::parse("partition", other)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Query>,
    pub validation: Vec<Query>,
    pub test: Vec<Query>,
    /// Partition of every trajectory that produced at least one query.
    pub trajectory_partition: BTreeMap<usize, Partition>,
}

impl DatasetSplit {
    pub fn partition_of(&self, q: &Query) -> Option<Partition> {
        self.trajectory_partition.get(&q.trajectory).copied()
    }
}

/// Shuffles trajectories and partitions them by count; each trajectory's
/// queries follow it.
pub fn grouped_split(queries: &[Query], fractions: [f64; 3], rng: &mut Rng) -> Result<DatasetSplit> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::config("split fractions must be non-negative and sum to 1"));
    }
    let mut trajs: Vec<usize> = queries.iter().map(|q| q.trajectory).collect();
    trajs.sort_unstable();
    trajs.dedup();
    trajs.shuffle(rng);
    let n = trajs.len();
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);

    let mut split = DatasetSplit::default();
    for (i, &t) in trajs.iter().enumerate() {
        let p = if i < n_train {
            Partition::Train
        } else if i < n_train + n_val {
            Partition::Validation
        } else {
            Partition::Test
        };
        split.trajectory_partition.insert(t, p);
    }
    for q in queries {
        match split.trajectory_partition[&q.trajectory] {
            Partition::Train => split.train.push(*q),
            Partition::Validation => split.validation.push(*q),
            Partition::Test => split.test.push(*q),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::trajectory::test_util::{cadence, records};

    const A: u32 = 0;
    const B: u32 = 1;
    const C: u32 = 2;
    const D: u32 = 3;

    fn traj(n: usize) -> Trajectory {
        Trajectory {
            user_id: 0,
            records: cadence(&vec![A; n], 60),
        }
    }

    /// Future records whose segments have the given (location, stay) pairs.
    fn future(segs: &[(u32, i64)]) -> Vec<LocationRecord> {
        let mut locs = Vec::new();
        let mut times = Vec::new();
        let mut t = 0;
        for &(l, s) in segs {
            locs.push(l);
            times.push(t);
            t += s;
        }
        let (l, _) = *segs.last().unwrap();
        locs.push(l);
        times.push(t);
        records(&locs, &times)
    }

    #[test]
    fn split_range_bounds() {
        assert_eq!(valid_split_range(10, 0.2), Some((2, 8)));
        assert_eq!(valid_split_range(5, 0.2), Some((1, 4)));
        assert_eq!(valid_split_range(2, 0.2), Some((1, 1)));
        assert_eq!(valid_split_range(1, 0.2), None);
        assert_eq!(valid_split_range(4, 0.6), None);
    }

    #[test]
    fn short_trajectory_gives_fewer_distinct_queries() {
        let t = traj(5);
        let qs = simulate_queries(0, &t, 5, 0.2, 0, &mut rng_from_seed(1));
        let mut idx: Vec<usize> = qs.iter().map(|q| q.split_index).collect();
        idx.sort();
        assert_eq!(idx, vec![1, 2, 3, 4]);
        for q in &qs {
            assert!(q.history(&t).len() >= 1 && q.future(&t).len() >= 1);
        }
        assert!(simulate_queries(0, &traj(1), 5, 0.2, 0, &mut rng_from_seed(1)).is_empty());
    }

    #[test]
    fn long_trajectory_gives_five_distinct_queries() {
        let t = traj(10);
        let qs = simulate_queries(3, &t, 5, 0.2, 100, &mut rng_from_seed(2));
        assert_eq!(qs.len(), 5);
        let mut idx: Vec<usize> = qs.iter().map(|q| q.split_index).collect();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 5);
        assert!(idx.iter().all(|&i| (2..=8).contains(&i)));
        assert_eq!(qs.iter().map(|q| q.id).collect::<Vec<_>>(), vec![100, 101, 102, 103, 104]);
        assert!(qs.iter().all(|q| q.trajectory == 3));
    }

    #[test]
    fn successive_on_example() {
        let fut = cadence(&[A, A, B, B, C, A], 60);
        let sel = select_target(&fut, A, TargetCriterion::Successive, 5).unwrap().unwrap();
        assert_eq!(sel.location, B);
        let still = cadence(&[A; 5], 60);
        assert_eq!(select_target(&still, A, TargetCriterion::Successive, 5).unwrap(), None);
    }

    #[test]
    fn important_picks_first_long_stay() {
        let fut = future(&[(B, 90), (C, 400)]);
        let sel = select_target(&fut, A, TargetCriterion::ImportantAtK(5), 5).unwrap().unwrap();
        assert_eq!(sel.location, C);
        assert_eq!(sel.stay_seconds, 400);
    }

    #[test]
    fn longest_ties_go_to_earliest() {
        let fut = future(&[(B, 120), (C, 300), (D, 300)]);
        let sel = select_target(&fut, A, TargetCriterion::LongestAtK(3), 5).unwrap().unwrap();
        assert_eq!(sel.location, C);
        assert_eq!(sel.segment_index, 1);
    }

    #[test]
    fn longest_needs_k_segments_and_skips_current() {
        let fut = future(&[(B, 120), (C, 300)]);
        assert_eq!(select_target(&fut, A, TargetCriterion::LongestAtK(3), 5).unwrap(), None);
        let fut = future(&[(A, 900), (B, 120), (C, 60)]);
        let sel = select_target(&fut, A, TargetCriterion::LongestAtK(3), 5).unwrap().unwrap();
        assert_eq!(sel.location, B);
        let fut = future(&[(A, 900), (B, 120), (A, 60)]);
        let sel = select_target(&fut, A, TargetCriterion::LongestAtK(3), 5).unwrap().unwrap();
        assert_eq!(sel.location, B);
    }

    #[test]
    fn empty_future_is_an_error() {
        assert!(select_target(&[], A, TargetCriterion::Successive, 5).is_err());
    }

    #[test]
    fn criterion_parsing_round_trips() {
        for c in TargetCriterion::defaults() {
            assert_eq!(c.to_string().parse::<TargetCriterion>().unwrap(), c);
        }
        assert!("important@0".parse::<TargetCriterion>().is_err());
        assert!("fastest@2".parse::<TargetCriterion>().is_err());
        assert!("successive@2".parse::<TargetCriterion>().is_err());
    }

    #[test]
    fn grouped_split_counts() {
        let trajs: Vec<Trajectory> = (0..10).map(|_| traj(20)).collect();
        let mut rng = rng_from_seed(4);
        let mut queries = Vec::new();
        for (i, t) in trajs.iter().enumerate() {
            let next = queries.len();
            queries.extend(simulate_queries(i, t, 5, 0.2, next, &mut rng));
        }
        let split = grouped_split(&queries, [0.7, 0.1, 0.2], &mut rng_from_seed(9)).unwrap();
        assert_eq!((split.train.len(), split.validation.len(), split.test.len()), (35, 5, 10));
        let again = grouped_split(&queries, [0.7, 0.1, 0.2], &mut rng_from_seed(9)).unwrap();
        assert_eq!(split, again);
        for q in split.train.iter().chain(&split.validation).chain(&split.test) {
            let p = split.partition_of(q).unwrap();
            let in_train = split.train.iter().any(|o| o.trajectory == q.trajectory);
            let in_test = split.test.iter().any(|o| o.trajectory == q.trajectory);
            assert!(!(in_train && in_test));
            assert!(matches!(p, Partition::Train | Partition::Validation | Partition::Test));
        }
        assert!(grouped_split(&queries, [0.5, 0.1, 0.1], &mut rng_from_seed(9)).is_err());
    }

    #[test]
    fn labeling_drops_unlabeled_per_cell() {
        // stays at A for the whole future after the split
        let t = Trajectory {
            user_id: 0,
            records: cadence(&[B, B, A, A, A, A, A, A, A, A], 60),
        };
        let q = Query {
            id: 0,
            trajectory: 0,
            split_index: 4,
        };
        let ds = label_dataset(
            std::slice::from_ref(&t),
            &[q],
            &[TargetCriterion::Successive],
            &[5],
        )
        .unwrap();
        assert!(ds.cell(Scenario { m: 5, criterion: TargetCriterion::Successive }).is_empty());
        let table = ds.testing_size_table(|_| true);
        assert_eq!(table.len(), 1);
        assert_eq!(table[0].count, 0);
    }
}
