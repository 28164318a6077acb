//! Spatial discretization with K-Means and transition statistics.

use std::collections::HashMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_rng, rng_from_seed, Rng};
use crate::synthgen::{GeoPoint, GeoRecord};
use crate::trajectory::{Granularity, LocationId, LocationIds, LocationRecord, Trajectory, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GranularityConfig {
    pub m_values: Vec<Granularity>,
    pub kmeans_max_iters: usize,
    /// Lloyd stops once the within-cluster sum of squares improves by no more than this.
    pub kmeans_tolerance: f64,
    pub kmeans_restarts: usize,
    /// Exported transition entries below this count are omitted.
    pub transition_min_count: u64,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        Self {
            m_values: vec![5, 10, 25, 50, 75, 100],
            kmeans_max_iters: 100,
            kmeans_tolerance: 1e-8,
            kmeans_restarts: 4,
            transition_min_count: 1,
        }
    }
}

impl GranularityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() {
            return Err(Error::config("granularity.m_values is empty"));
        }
        if self.m_values[0] < 2 || self.m_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "granularity.m_values must be strictly increasing and >= 2",
            ));
        }
        if self.kmeans_max_iters == 0 || self.kmeans_restarts == 0 {
            return Err(Error::config("kmeans iterations and restarts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Ordered by cluster size, largest first.
    pub centroids: Vec<GeoPoint>,
    /// Cluster of every input point, in input order.
    pub assignment: Vec<LocationId>,
    pub wcss: f64,
    /// Within-cluster sum of squares after each Lloyd iteration of the winning restart.
    pub wcss_history: Vec<f64>,
}

impl KMeansFit {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignment {
            sizes[a as usize] += 1;
        }
        sizes
    }

    pub fn nearest(&self, p: &GeoPoint) -> LocationId {
        nearest(&self.centroids, p).0 as LocationId
    }
}

fn nearest(centroids: &[GeoPoint], p: &GeoPoint) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = c.dist2(p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Identical points merged into one weighted point.
struct Weighted {
    points: Vec<GeoPoint>,
    weights: Vec<f64>,
    /// Input index -> unique index.
    index: Vec<usize>,
}

fn dedup_points(points: &[GeoPoint]) -> Weighted {
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    let mut w = Weighted {
        points: Vec::new(),
        weights: Vec::new(),
        index: Vec::with_capacity(points.len()),
    };
    for p in points {
        let key = (p.x.to_bits(), p.y.to_bits());
        let id = *seen.entry(key).or_insert_with(|| {
            w.points.push(*p);
            w.weights.push(0.0);
            w.points.len() - 1
        });
        w.weights[id] += 1.0;
        w.index.push(id);
    }
    w
}

struct Run {
    centroids: Vec<GeoPoint>,
    labels: Vec<usize>,
    wcss: f64,
    history: Vec<f64>,
}

fn plus_plus_init(data: &Weighted, k: usize, rng: &mut Rng) -> Vec<GeoPoint> {
    let n = data.points.len();
    let total: f64 = data.weights.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut first = n - 1;
    for (i, w) in data.weights.iter().enumerate() {
        if pick < *w {
            first = i;
            break;
        }
        pick -= w;
    }
    let mut centroids = vec![data.points[first]];
    let mut d2: Vec<f64> = data.points.iter().map(|p| p.dist2(&centroids[0])).collect();
    while centroids.len() < k {
        let mass: f64 = d2.iter().zip(&data.weights).map(|(d, w)| d * w).sum();
        let next = if mass > 0.0 {
            let mut pick = rng.random::<f64>() * mass;
            let mut chosen = None;
            for i in 0..n {
                let m = d2[i] * data.weights[i];
                if m > 0.0 && pick < m {
                    chosen = Some(i);
                    break;
                }
                pick -= m;
            }
            // rounding can run past the end; take the last point with mass
            chosen.unwrap_or_else(|| (0..n).rev().find(|&i| d2[i] > 0.0).unwrap())
        } else {
            break;
        };
        let c = data.points[next];
        centroids.push(c);
        for (i, p) in data.points.iter().enumerate() {
            d2[i] = d2[i].min(p.dist2(&c));
        }
    }
    centroids
}

fn lloyd(data: &Weighted, k: usize, cfg: &GranularityConfig, rng: &mut Rng) -> Run {
    let mut centroids = plus_plus_init(data, k, rng);
    let n = data.points.len();
    let mut labels = vec![0usize; n];
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..cfg.kmeans_max_iters {
        let mut d2 = vec![0.0; n];
        for (i, p) in data.points.iter().enumerate() {
            let (c, d) = nearest(&centroids, p);
            labels[i] = c;
            d2[i] = d;
        }
        let mut sx = vec![0.0; k];
        let mut sy = vec![0.0; k];
        let mut sw = vec![0.0; k];
        for i in 0..n {
            let w = data.weights[i];
            sx[labels[i]] += w * data.points[i].x;
            sy[labels[i]] += w * data.points[i].y;
            sw[labels[i]] += w;
        }
        for c in 0..k {
            if sw[c] > 0.0 {
                centroids[c] = GeoPoint::new(sx[c] / sw[c], sy[c] / sw[c]);
            }
        }
        // An empty cluster takes over the point furthest from its centroid.
        for c in 0..k {
            if sw[c] > 0.0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sw[labels[i]] > data.weights[i])
                .max_by(|&a, &b| (d2[a] * data.weights[a]).total_cmp(&(d2[b] * data.weights[b])));
            if let Some(i) = far {
                sw[labels[i]] -= data.weights[i];
                labels[i] = c;
                sw[c] = data.weights[i];
                centroids[c] = data.points[i];
                d2[i] = 0.0;
            }
        }
        let wcss = wcss_of(data, &centroids, &labels);
        history.push(wcss);
        let converged = prev - wcss <= cfg.kmeans_tolerance;
        prev = wcss;
        if converged {
            break;
        }
    }
    // final assignment against the last centroids
    for (i, p) in data.points.iter().enumerate() {
        labels[i] = nearest(&centroids, p).0;
    }
    let wcss = wcss_of(data, &centroids, &labels);
    if history.last().is_none_or(|&h| wcss < h) {
        history.push(wcss);
    }
    Run {
        centroids,
        labels,
        wcss,
        history,
    }
}

fn wcss_of(data: &Weighted, centroids: &[GeoPoint], labels: &[usize]) -> f64 {
    data.points
        .iter()
        .zip(labels)
        .zip(&data.weights)
        .map(|((p, &l), w)| w * p.dist2(&centroids[l]))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding, best of `cfg.kmeans_restarts`.
///
/// Identical input points are merged and weighted, which leaves the objective
/// and the seeding distribution unchanged. Cluster IDs are relabelled by
/// descending size so that ID 0 is the most populated cluster.
pub fn kmeans_fit(points: &[GeoPoint], m: usize, cfg: &GranularityConfig, rng: &mut Rng) -> Result<KMeansFit> {
    if m == 0 {
        return Err(Error::config("cluster count must be >= 1"));
    }
    let data = dedup_points(points);
    if data.points.len() < m {
        return Err(Error::TooFewPoints {
            distinct: data.points.len(),
            clusters: m,
        });
    }
    let seeds: Vec<u64> = (0..cfg.kmeans_restarts.max(1)).map(|_| rng.random()).collect();
    let runs: Vec<Run> = seeds
        .par_iter()
        .map(|&s| lloyd(&data, m, cfg, &mut rng_from_seed(s)))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.wcss < a.wcss { b } else { a })
        .unwrap();

    let mut size = vec![0.0; m];
    for (i, &l) in best.labels.iter().enumerate() {
        size[l] += data.weights[i];
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| size[b].total_cmp(&size[a]).then(a.cmp(&b)));
    let mut relabel = vec![0; m];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new as LocationId;
    }
    Ok(KMeansFit {
        centroids: order.iter().map(|&c| best.centroids[c]).collect(),
        assignment: data.index.iter().map(|&u| relabel[best.labels[u]]).collect(),
        wcss: best.wcss,
        wcss_history: best.history,
    })
}

/// A user's records after discretization at every configured granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecords {
    pub user_id: UserId,
    pub records: Vec<LocationRecord>,
}

/// Fits one K-Means model per `M` over the pooled points of all users and
/// labels every point with all of them.
pub fn assign_all_granularities(
    geo: &[GeoRecord],
    cfg: &GranularityConfig,
    seed: u64,
) -> Result<(Vec<UserRecords>, Vec<(Granularity, KMeansFit)>)> {
    cfg.validate()?;
    let points: Vec<GeoPoint> = geo.iter().map(|g| g.point).collect();
    let fits: Vec<(Granularity, KMeansFit)> = cfg
        .m_values
        .par_iter()
        .map(|&m| {
            let mut rng = child_rng(seed, &format!("kmeans/{m}"));
            kmeans_fit(&points, m as usize, cfg, &mut rng).map(|f| (m, f))
        })
        .collect::<Result<_>>()?;

    let mut users: Vec<UserRecords> = Vec::new();
    for (i, g) in geo.iter().enumerate() {
        let ids: LocationIds = fits.iter().map(|(m, f)| (*m, f.assignment[i])).collect();
        let rec = LocationRecord::new(g.timestamp, ids);
        match users.last_mut() {
            Some(u) if u.user_id == g.user_id => u.records.push(rec),
            _ => users.push(UserRecords {
                user_id: g.user_id,
                records: vec![rec],
            }),
        }
    }
    Ok((users, fits))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMatrix {
    pub m: Granularity,
    /// Row-major `M x M`.
    pub counts: Vec<u64>,
    pub min_count_filter: u64,
}

impl TransitionMatrix {
    pub fn get(&self, from: LocationId, to: LocationId) -> u64 {
        self.counts[from as usize * self.m as usize + to as usize]
    }

    pub fn row_sum(&self, from: LocationId) -> u64 {
        let m = self.m as usize;
        self.counts[from as usize * m..(from as usize + 1) * m].iter().sum()
    }

    /// Non-zero entries that survive the minimum-count filter.
    pub fn exported(&self) -> Vec<(LocationId, LocationId, u64)> {
        let m = self.m as usize;
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0 && c >= self.min_count_filter)
            .map(|(i, &c)| ((i / m) as LocationId, (i % m) as LocationId, c))
            .collect()
    }
}

/// Counts transitions between consecutive records at granularity `m`.
///
/// With `zero_diagonal` the self-transitions are skipped, which leaves exactly
/// one count per run-length boundary.
pub fn transition_counts(
    trajectories: &[Trajectory],
    m: Granularity,
    zero_diagonal: bool,
    min_count_filter: u64,
) -> Result<TransitionMatrix> {
    let size = m as usize;
    let mut counts = vec![0u64; size * size];
    for traj in trajectories {
        let locs = traj.locations(m)?;
        for pair in locs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a >= m || b >= m {
                return Err(Error::LocationOutOfRange { id: a.max(b), m });
            }
            if zero_diagonal && a == b {
                continue;
            }
            counts[a as usize * size + b as usize] += 1;
        }
    }
    Ok(TransitionMatrix {
        m,
        counts,
        min_count_filter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::test_util::cadence;

    fn cfg() -> GranularityConfig {
        GranularityConfig::default()
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = vec![
            GeoPoint::new(0.0, 0.0),
            GeoPoint::new(2.0, 0.0),
            GeoPoint::new(1.0, 3.0),
            GeoPoint::new(1.0, 3.0),
        ];
        let fit = kmeans_fit(&pts, 1, &cfg(), &mut rng_from_seed(0)).unwrap();
        assert!((fit.centroids[0].x - 1.0).abs() < 1e-12);
        assert!((fit.centroids[0].y - 1.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = vec![GeoPoint::new(0.0, 0.0); 10];
        assert!(matches!(
            kmeans_fit(&pts, 2, &cfg(), &mut rng_from_seed(0)),
            Err(Error::TooFewPoints { distinct: 1, clusters: 2 })
        ));
    }

    #[test]
    fn two_pairs_two_clusters() {
        let geo: Vec<GeoRecord> = [(0.0, 0.0), (0.1, 0.0), (10.0, 10.0), (10.1, 10.0)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| GeoRecord {
                user_id: 0,
                timestamp: i as i64 * 60,
                point: GeoPoint::new(x, y),
            })
            .collect();
        let cfg = GranularityConfig {
            m_values: vec![2],
            ..cfg()
        };
        let (users, _) = assign_all_granularities(&geo, &cfg, 1).unwrap();
        let ids: Vec<u32> = users[0].records.iter().map(|r| r.location(2).unwrap()).collect();
        assert_eq!(ids[0], ids[1]);
        assert_eq!(ids[2], ids[3]);
        assert_ne!(ids[0], ids[2]);
        assert!(users[0].records.iter().all(|r| r.location_ids.len() == 1));
    }

    #[test]
    fn transitions_on_example_sequence() {
        let traj = Trajectory {
            user_id: 0,
            records: cadence(&[0, 0, 1, 1, 2, 0], 60),
        };
        let tm = transition_counts(std::slice::from_ref(&traj), 5, true, 0).unwrap();
        assert_eq!(tm.get(0, 1), 1);
        assert_eq!(tm.get(1, 2), 1);
        assert_eq!(tm.get(2, 0), 1);
        assert_eq!(tm.counts.iter().sum::<u64>(), 3);
        let raw = transition_counts(&[traj], 5, false, 0).unwrap();
        assert_eq!(raw.get(0, 0), 1);
        assert_eq!(raw.get(1, 1), 1);
    }

    #[test]
    fn single_location_has_no_transitions() {
        let traj = Trajectory {
            user_id: 0,
            records: cadence(&[3; 10], 60),
        };
        let tm = transition_counts(&[traj], 5, true, 0).unwrap();
        assert!(tm.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn export_filter_leaves_internal_counts() {
        let traj = Trajectory {
            user_id: 0,
            records: cadence(&[0, 1, 0, 1, 2], 60),
        };
        let tm = transition_counts(&[traj], 5, true, 2).unwrap();
        assert_eq!(tm.get(1, 2), 1);
        assert_eq!(tm.exported(), vec![(0, 1, 2)]);
    }

    #[test]
    fn config_validation() {
        let bad = GranularityConfig {
            m_values: vec![10, 5],
            ..cfg()
        };
        assert!(bad.validate().is_err());
        let bad = GranularityConfig {
            m_values: vec![1, 5],
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }
}
