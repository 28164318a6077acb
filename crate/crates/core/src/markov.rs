//! First-order Markov next-location predictor that never predicts staying put.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{dedup_consecutive, Granularity, LocationId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovModel {
    pub m: Granularity,
    /// Row-major `M x M` transition counts; the diagonal is always zero.
    pub counts: Vec<u64>,
    /// Number of stay segments observed at each location.
    pub global_dist: Vec<u64>,
}

impl MarkovModel {
    pub fn new(m: Granularity) -> Self {
        let size = m as usize;
        Self {
            m,
            counts: vec![0; size * size],
            global_dist: vec![0; size],
        }
    }

    pub fn count(&self, from: LocationId, to: LocationId) -> u64 {
        self.counts[from as usize * self.m as usize + to as usize]
    }

    pub fn row(&self, from: LocationId) -> &[u64] {
        let m = self.m as usize;
        &self.counts[from as usize * m..(from as usize + 1) * m]
    }

    /// Adds the transitions of one history, given as its raw location sequence.
    pub fn observe(&mut self, history: &[LocationId]) -> Result<()> {
        let m = self.m as usize;
        if let Some(&bad) = history.iter().find(|&&l| l >= self.m) {
            return Err(Error::LocationOutOfRange { id: bad, m: self.m });
        }
        let runs = dedup_consecutive(history);
        for &l in &runs {
            self.global_dist[l as usize] += 1;
        }
        for pair in runs.windows(2) {
            self.counts[pair[0] as usize * m + pair[1] as usize] += 1;
        }
        Ok(())
    }

    /// Most frequent successor of `current`, smallest ID on ties. Unseen
    /// states fall back to the most frequent other location overall.
    pub fn predict(&self, current: LocationId) -> Result<LocationId> {
        if current >= self.m {
            return Err(Error::LocationOutOfRange { id: current, m: self.m });
        }
        if let Some(next) = argmax_excluding(self.row(current), current) {
            return Ok(next);
        }
        Ok(argmax_excluding(&self.global_dist, current)
            .unwrap_or(if current == 0 { 1 } else { 0 }))
    }
}

/// Index of the largest positive entry other than `skip`, smallest index on ties.
fn argmax_excluding(values: &[u64], skip: LocationId) -> Option<LocationId> {
    let mut best: Option<(usize, u64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if i == skip as usize || v == 0 {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i as LocationId)
}

/// Fits a model on the location sequences of training histories.
pub fn markov_fit<'a>(histories: impl IntoIterator<Item = &'a [LocationId]>, m: Granularity) -> Result<MarkovModel> {
    let mut model = MarkovModel::new(m);
    for h in histories {
        model.observe(h)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: u32 = 0;
    const B: u32 = 1;
    const C: u32 = 2;
    const D: u32 = 3;

    #[test]
    fn counts_skip_self_transitions() {
        let h = [A, B, A];
        let model = markov_fit([&h[..]], 4).unwrap();
        assert_eq!(model.count(A, B), 1);
        assert_eq!(model.count(B, A), 1);
        assert_eq!(model.counts.iter().sum::<u64>(), 2);

        let h = [A, A, A];
        let model = markov_fit([&h[..]], 4).unwrap();
        assert!(model.counts.iter().all(|&c| c == 0));
        assert_eq!(model.global_dist[A as usize], 1);
    }

    #[test]
    fn predicts_most_frequent_successor() {
        let mut model = MarkovModel::new(4);
        model.counts[(A * 4 + B) as usize] = 3;
        model.counts[(A * 4 + C) as usize] = 1;
        assert_eq!(model.predict(A).unwrap(), B);
    }

    #[test]
    fn unseen_state_falls_back_excluding_itself() {
        let mut model = MarkovModel::new(4);
        model.global_dist = vec![2, 5, 0, 9];
        assert_eq!(model.predict(D).unwrap(), B);
        let empty = MarkovModel::new(4);
        assert_eq!(empty.predict(0).unwrap(), 1);
        assert_eq!(empty.predict(2).unwrap(), 0);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(MarkovModel::new(3).predict(3).is_err());
        assert!(markov_fit([&[0u32, 5][..]], 3).is_err());
    }

    fn model() -> impl Strategy<Value = MarkovModel> {
        (2u32..7).prop_flat_map(|m| {
            let n = m as usize;
            (prop::collection::vec(0u64..4, n * n), prop::collection::vec(0u64..4, n)).prop_map(move |(mut c, g)| {
                for i in 0..n {
                    c[i * n + i] = 0;
                }
                MarkovModel { m, counts: c, global_dist: g }
            })
        })
    }

    proptest! {
        #[test]
        fn prediction_matches_row_scan(model in model(), scale in 1u64..5) {
            let n = model.m as usize;
            for cur in 0..model.m {
                let p = model.predict(cur).unwrap();
                prop_assert_ne!(p, cur);
                let row = model.row(cur);
                let scan = |vals: &[u64]| -> Option<u32> {
                    let max = (0..n).filter(|&i| i != cur as usize).map(|i| vals[i]).max()?;
                    if max == 0 { return None; }
                    (0..n).find(|&i| i != cur as usize && vals[i] == max).map(|i| i as u32)
                };
                let expected = scan(row).or_else(|| scan(&model.global_dist))
                    .unwrap_or(if cur == 0 { 1 } else { 0 });
                prop_assert_eq!(p, expected);

                let mut scaled = model.clone();
                scaled.counts.iter_mut().for_each(|c| *c *= scale);
                scaled.global_dist.iter_mut().for_each(|c| *c *= scale);
                prop_assert_eq!(scaled.predict(cur).unwrap(), p);
            }
        }

        #[test]
        fn adding_history_never_decreases_counts(
            h1 in prop::collection::vec(0u32..5, 1..30),
            h2 in prop::collection::vec(0u32..5, 1..30),
        ) {
            let before = markov_fit([&h1[..]], 5).unwrap();
            let after = markov_fit([&h1[..], &h2[..]], 5).unwrap();
            for i in 0..25 {
                prop_assert!(after.counts[i] >= before.counts[i]);
            }
            for i in 0..5 {
                prop_assert_eq!(after.count(i, i), 0);
            }
        }
    }
}
