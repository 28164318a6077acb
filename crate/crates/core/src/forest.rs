//! Random forest of CART trees split on Gini impurity, with soft voting.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DesignMatrix;
use crate::neuralseq::argmax;
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeaturesPerSplit {
    /// `ceil(sqrt(n_features))`.
    #[default]
    Sqrt,
    All,
    Count(usize),
}

impl FeaturesPerSplit {
    pub fn resolve(&self, n_features: usize) -> usize {
        let k = match *self {
            FeaturesPerSplit::Sqrt => (n_features as f64).sqrt().ceil() as usize,
            FeaturesPerSplit::All => n_features,
            FeaturesPerSplit::Count(k) => k,
        };
        k.clamp(1, n_features.max(1))
    }
}

impl Serialize for FeaturesPerSplit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FeaturesPerSplit::Sqrt => s.serialize_str("sqrt"),
            FeaturesPerSplit::All => s.serialize_str("all"),
            FeaturesPerSplit::Count(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for FeaturesPerSplit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Count(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(s) if s == "sqrt" => Ok(FeaturesPerSplit::Sqrt),
            Raw::Name(s) if s == "all" => Ok(FeaturesPerSplit::All),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("unknown features_per_split {s:?}"))),
            Raw::Count(k) => Ok(FeaturesPerSplit::Count(k as usize)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees until purity or the leaf-size limit.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: u64,
    pub features_per_split: FeaturesPerSplit,
    /// Train each tree on a bootstrap resample of the rows.
    pub bootstrap: bool,
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: FeaturesPerSplit::Sqrt,
            bootstrap: true,
            rng_seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 || self.min_samples_leaf < 1 {
            return Err(Error::config("forest.n_trees and forest.min_samples_leaf must be >= 1"));
        }
        if self.features_per_split == FeaturesPerSplit::Count(0) {
            return Err(Error::config("forest.features_per_split must be >= 1"));
        }
        Ok(())
    }
}

/// A CART node; serialized as `{feature, threshold, children}` or `{leaf}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        /// Rows with `x[feature] <= threshold` go to the first child.
        threshold: f64,
        children: Box<[Node; 2]>,
    },
    Leaf {
        /// Weighted training class counts.
        leaf: Vec<u64>,
    },
}

impl Node {
    pub fn leaf_for(&self, x: &[f64]) -> &[u64] {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { leaf } => return leaf,
                Node::Split {
                    feature,
                    threshold,
                    children,
                } => node = if x[*feature] <= *threshold { &children[0] } else { &children[1] },
            }
        }
    }

    /// Class distribution of the leaf `x` falls into.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let counts = self.leaf_for(x);
        let total: u64 = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { children, .. } => 1 + children[0].depth().max(children[1].depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { children, .. } => children[0].n_leaves() + children[1].n_leaves(),
        }
    }
}

/// Exact comparison key for a split: maximizing
/// `sum_c cL^2 / nL + sum_c cR^2 / nR` minimizes weighted child Gini impurity.
#[derive(Debug, Clone, Copy)]
struct SplitScore {
    num: u128,
    den: u128,
}

impl SplitScore {
    fn better_than(&self, other: &SplitScore) -> bool {
        self.num * other.den > other.num * self.den
    }
}

struct TreeBuilder<'a> {
    x: &'a DesignMatrix,
    y: &'a [u32],
    n_classes: usize,
    cfg: &'a ForestConfig,
    k: usize,
}

impl TreeBuilder<'_> {
    fn class_counts(&self, samples: &[(usize, u64)]) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_classes];
        for &(row, w) in samples {
            counts[self.y[row] as usize] += w;
        }
        counts
    }

    /// Best split of `samples` on `feature` that keeps both children above the
    /// leaf-size limit, lowest threshold first on ties.
    fn best_on_feature(&self, samples: &[(usize, u64)], feature: usize, parent: &[u64]) -> Option<(SplitScore, f64)> {
        let mut vals: Vec<(f64, usize, u64)> = samples
            .iter()
            .map(|&(row, w)| (self.x.get(row, feature), self.y[row] as usize, w))
            .collect();
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = vec![0u64; self.n_classes];
        let mut right = parent.to_vec();
        let total: u64 = parent.iter().sum();
        let (mut n_left, mut n_right) = (0u64, total);
        let mut sq_left: u128 = 0;
        let mut sq_right: u128 = parent.iter().map(|&c| (c as u128) * (c as u128)).sum();
        let mut best: Option<(SplitScore, f64)> = None;
        let min_leaf = self.cfg.min_samples_leaf;
        for i in 0..vals.len() - 1 {
            let (v, c, w) = vals[i];
            let (cl, cr, w128) = (left[c] as u128, right[c] as u128, w as u128);
            sq_left += 2 * cl * w128 + w128 * w128;
            sq_right = sq_right + w128 * w128 - 2 * cr * w128;
            left[c] += w;
            right[c] -= w;
            n_left += w;
            n_right -= w;
            let next = vals[i + 1].0;
            if v == next || n_left < min_leaf || n_right < min_leaf {
                continue;
            }
            let score = SplitScore {
                num: sq_left * n_right as u128 + sq_right * n_left as u128,
                den: n_left as u128 * n_right as u128,
            };
            if best.as_ref().is_none_or(|(b, _)| score.better_than(b)) {
                let mid = v + (next - v) / 2.0;
                let threshold = if mid < next { mid } else { v };
                best = Some((score, threshold));
            }
        }
        best
    }

    fn build(&self, samples: &mut [(usize, u64)], depth: usize, rng: &mut Rng) -> Node {
        let counts = self.class_counts(samples);
        let total: u64 = counts.iter().sum();
        let classes_present = counts.iter().filter(|&&c| c > 0).count();
        if classes_present <= 1
            || self.cfg.max_depth.is_some_and(|d| depth >= d)
            || total < 2 * self.cfg.min_samples_leaf
        {
            return Node::Leaf { leaf: counts };
        }
        let parent_sq: u128 = counts.iter().map(|&c| (c as u128) * (c as u128)).sum();
        let n_features = self.x.n_cols();
        let mut features: Vec<usize> = (0..n_features).collect();
        if self.k < n_features {
            features.shuffle(rng);
        }
        let mut chosen: Option<(SplitScore, usize, f64)> = None;
        for batch in features.chunks(self.k) {
            let mut batch = batch.to_vec();
            batch.sort_unstable();
            for f in batch {
                let Some((score, thr)) = self.best_on_feature(samples, f, &counts) else {
                    continue;
                };
                // zero-gain splits are rejected
                if score.num * total as u128 <= parent_sq * score.den {
                    continue;
                }
                if chosen.as_ref().is_none_or(|(b, _, _)| score.better_than(b)) {
                    chosen = Some((score, f, thr));
                }
            }
            if chosen.is_some() {
                break;
            }
        }
        let Some((_, feature, threshold)) = chosen else {
            return Node::Leaf { leaf: counts };
        };
        let mut split = 0;
        for i in 0..samples.len() {
            if self.x.get(samples[i].0, feature) <= threshold {
                samples.swap(i, split);
                split += 1;
            }
        }
        let (left, right) = samples.split_at_mut(split);
        let l = self.build(left, depth + 1, rng);
        let r = self.build(right, depth + 1, rng);
        Node::Split {
            feature,
            threshold,
            children: Box::new([l, r]),
        }
    }
}

/// Grows a single CART tree on weighted rows.
pub fn fit_tree(
    x: &DesignMatrix,
    y: &[u32],
    n_classes: usize,
    samples: &mut [(usize, u64)],
    cfg: &ForestConfig,
    rng: &mut Rng,
) -> Node {
    let builder = TreeBuilder {
        x,
        y,
        n_classes,
        cfg,
        k: cfg.features_per_split.resolve(x.n_cols()),
    };
    builder.build(samples, 0, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_classes: usize,
    pub n_features: usize,
    pub trees: Vec<Node>,
}

fn check_inputs(x: &DesignMatrix, y: &[u32], n_classes: usize) -> Result<()> {
    if x.n_rows() == 0 || y.is_empty() {
        return Err(Error::EmptyInput("forest training data"));
    }
    if x.n_rows() != y.len() {
        return Err(Error::DimensionMismatch {
            group: "labels".into(),
            expected: x.n_rows(),
            actual: y.len(),
        });
    }
    if let Some((row, col)) = x.find_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    if let Some(&bad) = y.iter().find(|&&c| c as usize >= n_classes) {
        return Err(Error::LocationOutOfRange {
            id: bad,
            m: n_classes as u32,
        });
    }
    Ok(())
}

/// Trains `cfg.n_trees` trees in parallel, each from its own seed.
pub fn forest_fit(x: &DesignMatrix, y: &[u32], n_classes: usize, cfg: &ForestConfig) -> Result<ForestModel> {
    cfg.validate()?;
    check_inputs(x, y, n_classes)?;
    let n = x.n_rows();
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(cfg.rng_seed, &format!("tree/{t}")));
            let mut samples: Vec<(usize, u64)> = if cfg.bootstrap {
                let mut weights = vec![0u64; n];
                for _ in 0..n {
                    weights[rng.random_range(0..n)] += 1;
                }
                weights
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, w)| w > 0)
                    .collect()
            } else {
                (0..n).map(|i| (i, 1)).collect()
            };
            fit_tree(x, y, n_classes, &mut samples, cfg, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        n_classes,
        n_features: x.n_cols(),
        trees,
    })
}

impl ForestModel {
    /// Mean of the per-tree leaf distributions.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                group: "forest input".into(),
                expected: self.n_features,
                actual: x.len(),
            });
        }
        if let Some(col) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        let mut probs = vec![0.0; self.n_classes];
        for tree in &self.trees {
            for (p, q) in probs.iter_mut().zip(tree.predict_proba(x)) {
                *p += q;
            }
        }
        let n = self.trees.len() as f64;
        probs.iter_mut().for_each(|p| *p /= n);
        Ok(probs)
    }

    /// Most probable class (smallest ID on ties) and the probability vector.
    pub fn predict(&self, x: &[f64]) -> Result<(u32, Vec<f64>)> {
        let probs = self.predict_proba(x)?;
        Ok((argmax(&probs) as u32, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaf(c: Vec<u64>) -> Node {
        Node::Leaf { leaf: c }
    }

    #[test]
    fn pure_input_gives_single_leaves() {
        let x = DesignMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]]).unwrap();
        let model = forest_fit(&x, &[2, 2, 2], 3, &ForestConfig { n_trees: 5, ..Default::default() }).unwrap();
        for t in &model.trees {
            assert!(matches!(t, Node::Leaf { leaf } if leaf[2] > 0 && leaf[0] == 0 && leaf[1] == 0));
        }
        assert_eq!(model.predict(&[0.0, 0.0]).unwrap(), (2, vec![0.0, 0.0, 1.0]));
    }

    #[test]
    fn separable_line_is_learned() {
        let rows: Vec<[f64; 1]> = (0..200).map(|i| [i as f64 / 10.0 - 10.0]).collect();
        let y: Vec<u32> = rows.iter().map(|r| u32::from(r[0] >= 0.0)).collect();
        let x = DesignMatrix::from_rows(&rows).unwrap();
        let model = forest_fit(&x, &y, 2, &ForestConfig { n_trees: 20, rng_seed: 3, ..Default::default() }).unwrap();
        let hits = rows.iter().zip(&y).filter(|(r, &c)| model.predict(&r[..]).unwrap().0 == c).count();
        assert_eq!(hits, 200);
    }

    #[test]
    fn two_tree_vote_ties_to_class_zero() {
        let model = ForestModel {
            n_classes: 2,
            n_features: 1,
            trees: vec![leaf(vec![1, 0]), leaf(vec![0, 1])],
        };
        assert_eq!(model.predict(&[0.0]).unwrap(), (0, vec![0.5, 0.5]));
    }

    #[test]
    fn bad_inputs() {
        let x = DesignMatrix::new(2);
        assert!(forest_fit(&x, &[], 2, &ForestConfig::default()).is_err());
        let x = DesignMatrix::from_rows(&[[1.0, f64::NAN]]).unwrap();
        assert!(matches!(
            forest_fit(&x, &[0], 2, &ForestConfig::default()),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        let x = DesignMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let model = forest_fit(&x, &[0], 2, &ForestConfig { n_trees: 1, ..Default::default() }).unwrap();
        assert!(model.predict(&[1.0]).is_err());
    }

    #[test]
    fn json_shape() {
        let tree = Node::Split {
            feature: 1,
            threshold: 0.5,
            children: Box::new([leaf(vec![2, 0]), leaf(vec![0, 3])]),
        };
        let json = serde_json::to_string(&tree).unwrap();
        assert_eq!(json, r#"{"feature":1,"threshold":0.5,"children":[{"leaf":[2,0]},{"leaf":[0,3]}]}"#);
        let back: Node = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tree);
    }

    #[test]
    fn min_leaf_and_depth_limits() {
        let rows: Vec<[f64; 1]> = (0..40).map(|i| [i as f64]).collect();
        let y: Vec<u32> = (0..40).map(|i| (i % 3) as u32).collect();
        let x = DesignMatrix::from_rows(&rows).unwrap();
        let cfg = ForestConfig {
            n_trees: 3,
            min_samples_leaf: 4,
            max_depth: Some(3),
            ..Default::default()
        };
        let model = forest_fit(&x, &y, 3, &cfg).unwrap();
        fn leaves(n: &Node, out: &mut Vec<u64>) {
            match n {
                Node::Leaf { leaf } => out.push(leaf.iter().sum()),
                Node::Split { children, .. } => {
                    leaves(&children[0], out);
                    leaves(&children[1], out);
                }
            }
        }
        for t in &model.trees {
            assert!(t.depth() <= 3);
            let mut sizes = Vec::new();
            leaves(t, &mut sizes);
            assert!(sizes.iter().all(|&s| s >= 4));
        }
    }

    fn gini(counts: &[u64]) -> f64 {
        let n: u64 = counts.iter().sum();
        1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
    }

    fn dataset() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<u32>)> {
        (2usize..30, 1usize..5).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(-3i32..3, d), n)
                    .prop_map(|r| r.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect()),
                prop::collection::vec(0u32..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn every_split_reduces_impurity((rows, y) in dataset(), seed in 0u64..100) {
            let x = DesignMatrix::from_rows(&rows).unwrap();
            let model = forest_fit(&x, &y, 3, &ForestConfig { n_trees: 3, rng_seed: seed, ..Default::default() }).unwrap();
            fn check(n: &Node) -> bool {
                match n {
                    Node::Leaf { .. } => true,
                    Node::Split { children, .. } => {
                        let (l, r) = (children[0].class_totals(), children[1].class_totals());
                        let parent: Vec<u64> = l.iter().zip(&r).map(|(a, b)| a + b).collect();
                        let (nl, nr) = (l.iter().sum::<u64>() as f64, r.iter().sum::<u64>() as f64);
                        let child = (nl * gini(&l) + nr * gini(&r)) / (nl + nr);
                        gini(&parent) - child > 1e-12 && check(&children[0]) && check(&children[1])
                    }
                }
            }
            for t in &model.trees {
                prop_assert!(check(t));
            }
            for row in &rows {
                let p = model.predict_proba(row).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                // ensemble equals the hand-averaged per-tree distributions
                for c in 0..3 {
                    let manual: f64 = model.trees.iter().map(|t| t.predict_proba(row)[c]).sum::<f64>() / 3.0;
                    prop_assert!((p[c] - manual).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn fixed_seed_is_deterministic((rows, y) in dataset()) {
            let x = DesignMatrix::from_rows(&rows).unwrap();
            let cfg = ForestConfig { n_trees: 4, rng_seed: 9, ..Default::default() };
            prop_assert_eq!(forest_fit(&x, &y, 3, &cfg).unwrap(), forest_fit(&x, &y, 3, &cfg).unwrap());
        }
    }

    impl Node {
        fn class_totals(&self) -> Vec<u64> {
            match self {
                Node::Leaf { leaf } => leaf.clone(),
                Node::Split { children, .. } => children[0]
                    .class_totals()
                    .iter()
                    .zip(children[1].class_totals())
                    .map(|(a, b)| a + b)
                    .collect(),
            }
        }
    }
}
