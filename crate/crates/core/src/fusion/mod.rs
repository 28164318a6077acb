//! Late fusion of LSTM trajectory logits with behavioral feature groups.

mod dnn;

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dnn::{Dense, DnnConfig, DnnExample, JointExample, JointModel, Mlp, MlpCache, Standardizer};

use crate::error::{Error, Result};
use crate::features::{FeatureDims, FeatureGroup, FeatureVector};
use crate::forest::{forest_fit, ForestConfig, ForestModel};
use crate::matrix::DesignMatrix;
use crate::neuralseq::{argmax, fit, read_checkpoint, write_checkpoint, LstmClassifier, TrainConfig, TrainHistory};
use crate::rng::derive_seed;
use crate::trajectory::LocationId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// MLP over `[encoder logits ; features]`, trained jointly with the encoder.
    DnnConcat,
    /// MLP over frozen LSTM logits and features.
    DnnLogitFeature,
    /// Random forest over frozen LSTM logits and features.
    ForestOverLogits,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [Self::DnnConcat, Self::DnnLogitFeature, Self::ForestOverLogits];

    /// Short selector name used in model specs and result tables.
    pub fn selector(&self) -> &'static str {
        match self {
            Self::DnnConcat => "fusion_a",
            Self::DnnLogitFeature => "fusion_b",
            Self::ForestOverLogits => "fusion_c",
        }
    }

    pub fn from_selector(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.selector() == s)
    }

    fn time_encoding(&self) -> TimeEncoding {
        match self {
            Self::ForestOverLogits => TimeEncoding::Ordinal,
            _ => TimeEncoding::OneHot,
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.selector())
    }
}

/// A set of feature groups, written `app+sensor` (or `none`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupSet(BTreeSet<FeatureGroup>);

impl GroupSet {
    pub fn new(groups: impl IntoIterator<Item = FeatureGroup>) -> Self {
        Self(groups.into_iter().collect())
    }

    pub fn all() -> Self {
        Self::new(FeatureGroup::ALL)
    }

    pub fn iter(&self) -> impl Iterator<Item = FeatureGroup> + '_ {
        self.0.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, g: FeatureGroup) -> bool {
        self.0.contains(&g)
    }
}

impl fmt::Display for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.0.iter().map(|g| g.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for GroupSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" || s.is_empty() {
            return Ok(Self::default());
        }
        s.split('+').map(str::parse).collect::<Result<BTreeSet<_>>>().map(Self)
    }
}

impl Serialize for GroupSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeEncoding {
    /// Hour and day-of-week integers for both window endpoints (4 columns).
    Ordinal,
    /// 24 hour + 7 weekday indicator columns per endpoint (62 columns).
    OneHot,
}

/// Named column ranges of a fusion design matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub blocks: Vec<(String, Range<usize>)>,
}

impl ColumnLayout {
    pub fn width(&self) -> usize {
        self.blocks.last().map_or(0, |(_, r)| r.end)
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }

    fn push(&mut self, name: &str, len: usize) {
        let start = self.width();
        self.blocks.push((name.to_string(), start..start + len));
    }
}

fn group_width(g: FeatureGroup, dims: &FeatureDims, time: TimeEncoding) -> usize {
    match g {
        FeatureGroup::App => dims.n_apps,
        FeatureGroup::Sensor => dims.n_sensors,
        FeatureGroup::Broadcast => dims.n_broadcasts,
        FeatureGroup::Time => match time {
            TimeEncoding::Ordinal => 4,
            TimeEncoding::OneHot => 2 * (24 + 7),
        },
    }
}

pub fn feature_layout(groups: &GroupSet, dims: &FeatureDims, time: TimeEncoding) -> ColumnLayout {
    let mut layout = ColumnLayout::default();
    for g in groups.iter() {
        layout.push(g.name(), group_width(g, dims, time));
    }
    layout
}

/// Appends the selected groups of `fv` to `out` in canonical group order.
pub fn encode_features(
    fv: &FeatureVector,
    groups: &GroupSet,
    dims: &FeatureDims,
    time: TimeEncoding,
    out: &mut Vec<f64>,
) -> Result<()> {
    let check = |g: FeatureGroup, actual: usize| {
        let expected = group_width(g, dims, TimeEncoding::Ordinal);
        if actual == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                group: g.name().to_string(),
                expected,
                actual,
            })
        }
    };
    for g in groups.iter() {
        match g {
            FeatureGroup::App => {
                check(g, fv.app.len())?;
                out.extend(fv.app.iter().map(|&v| f64::from(v)));
            }
            FeatureGroup::Sensor => {
                check(g, fv.sensor.len())?;
                out.extend_from_slice(&fv.sensor);
            }
            FeatureGroup::Broadcast => {
                check(g, fv.broadcast.len())?;
                out.extend(fv.broadcast.iter().map(|&v| f64::from(v)));
            }
            FeatureGroup::Time => {
                let t = fv.time.as_array();
                match time {
                    TimeEncoding::Ordinal => out.extend(t.iter().map(|&v| f64::from(v))),
                    TimeEncoding::OneHot => {
                        for (value, card) in t.into_iter().zip([24usize, 7, 24, 7]) {
                            out.extend((0..card).map(|i| if i == value as usize { 1.0 } else { 0.0 }));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Design matrix rows `[logits ; selected groups]` and their column layout.
pub fn build_fusion_inputs(
    logits: &[Vec<f64>],
    features: &[FeatureVector],
    groups: &GroupSet,
    dims: &FeatureDims,
    time: TimeEncoding,
) -> Result<(DesignMatrix, ColumnLayout)> {
    if logits.len() != features.len() {
        return Err(Error::DimensionMismatch {
            group: "feature rows".into(),
            expected: logits.len(),
            actual: features.len(),
        });
    }
    let m = logits.first().map_or(0, Vec::len);
    let mut layout = ColumnLayout::default();
    layout.push("logits", m);
    for (name, r) in feature_layout(groups, dims, time).blocks {
        layout.push(&name, r.len());
    }
    let mut matrix = DesignMatrix::new(layout.width());
    let mut row = Vec::with_capacity(layout.width());
    for (l, fv) in logits.iter().zip(features) {
        if l.len() != m {
            return Err(Error::DimensionMismatch {
                group: "logits".into(),
                expected: m,
                actual: l.len(),
            });
        }
        row.clear();
        row.extend_from_slice(l);
        encode_features(fv, groups, dims, time, &mut row)?;
        matrix.push_row(&row)?;
    }
    Ok((matrix, layout))
}

/// One labeled query as seen by the fusion models.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionExample {
    pub query_id: u64,
    /// Preprocessed history tokens.
    pub tokens: Vec<LocationId>,
    pub features: FeatureVector,
    pub target: LocationId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub dnn: DnnConfig,
    /// Whether variant A backpropagates into the LSTM encoder.
    pub joint_encoder: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dnn: DnnConfig::default(),
            joint_encoder: true,
        }
    }
}

/// Everything `fusion_fit` needs besides the data.
#[derive(Debug, Clone)]
pub struct FusionFitConfig {
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    pub dims: FeatureDims,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusedModel {
    Joint {
        model: JointModel,
        standardizer: Standardizer,
        groups: GroupSet,
        dims: FeatureDims,
    },
    LogitDnn {
        lstm: LstmClassifier,
        mlp: Mlp,
        standardizer: Standardizer,
        groups: GroupSet,
        dims: FeatureDims,
    },
    Forest {
        lstm: LstmClassifier,
        forest: ForestModel,
        groups: GroupSet,
        dims: FeatureDims,
    },
}

fn encoded(ex: &FusionExample, groups: &GroupSet, dims: &FeatureDims, time: TimeEncoding) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    encode_features(&ex.features, groups, dims, time, &mut out)?;
    Ok(out)
}

fn logit_row(lstm: &LstmClassifier, ex: &FusionExample, groups: &GroupSet, dims: &FeatureDims, time: TimeEncoding) -> Result<Vec<f64>> {
    let mut row = lstm.logits(&ex.tokens)?;
    encode_features(&ex.features, groups, dims, time, &mut row)?;
    Ok(row)
}

/// Trains one fusion variant on top of a pretrained LSTM.
///
/// The LSTM must have been trained on the same training partition; variant A
/// starts from it and keeps training it jointly with the MLP.
pub fn fusion_fit(
    variant: FusionVariant,
    lstm: &LstmClassifier,
    groups: &GroupSet,
    train: &[FusionExample],
    val: &[FusionExample],
    cfg: &FusionFitConfig,
) -> Result<(FusedModel, TrainHistory)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("fusion training set"));
    }
    cfg.fusion.dnn.validate()?;
    let dims = cfg.dims;
    let time = variant.time_encoding();
    let m = lstm.m;
    let mut train_cfg = cfg.train;
    train_cfg.rng_seed = derive_seed(cfg.seed, "fusion/train");
    match variant {
        FusionVariant::DnnConcat => {
            let feats: Vec<Vec<f64>> = train.iter().map(|ex| encoded(ex, groups, &dims, time)).collect::<Result<_>>()?;
            let width = feature_layout(groups, &dims, time).width();
            let standardizer = Standardizer::fit(feats.iter().map(Vec::as_slice), width);
            let to_joint = |ex: &FusionExample, f: Vec<f64>| JointExample {
                tokens: ex.tokens.clone(),
                features: standardizer.apply(&f),
                target: ex.target,
            };
            let train_j: Vec<JointExample> = train.iter().zip(feats).map(|(ex, f)| to_joint(ex, f)).collect();
            let val_j: Vec<JointExample> = val
                .iter()
                .map(|ex| Ok(to_joint(ex, encoded(ex, groups, &dims, time)?)))
                .collect::<Result<_>>()?;
            let model = JointModel {
                lstm: lstm.clone(),
                mlp: Mlp::new(m + width, &cfg.fusion.dnn.hidden, m, derive_seed(cfg.seed, "fusion/mlp")),
                train_encoder: cfg.fusion.joint_encoder,
            };
            let (model, hist) = fit(model, &train_j, &val_j, &train_cfg)?;
            Ok((
                FusedModel::Joint {
                    model,
                    standardizer,
                    groups: groups.clone(),
                    dims,
                },
                hist,
            ))
        }
        FusionVariant::DnnLogitFeature => {
            let rows: Vec<Vec<f64>> = train.iter().map(|ex| logit_row(lstm, ex, groups, &dims, time)).collect::<Result<_>>()?;
            let width = m + feature_layout(groups, &dims, time).width();
            let standardizer = Standardizer::fit(rows.iter().map(Vec::as_slice), width);
            let train_d: Vec<DnnExample> = rows
                .iter()
                .zip(train)
                .map(|(r, ex)| DnnExample {
                    x: standardizer.apply(r),
                    target: ex.target,
                })
                .collect();
            let val_d: Vec<DnnExample> = val
                .iter()
                .map(|ex| {
                    Ok(DnnExample {
                        x: standardizer.apply(&logit_row(lstm, ex, groups, &dims, time)?),
                        target: ex.target,
                    })
                })
                .collect::<Result<_>>()?;
            let mlp = Mlp::new(width, &cfg.fusion.dnn.hidden, m, derive_seed(cfg.seed, "fusion/mlp"));
            let (mlp, hist) = fit(mlp, &train_d, &val_d, &train_cfg)?;
            Ok((
                FusedModel::LogitDnn {
                    lstm: lstm.clone(),
                    mlp,
                    standardizer,
                    groups: groups.clone(),
                    dims,
                },
                hist,
            ))
        }
        FusionVariant::ForestOverLogits => {
            let logits: Vec<Vec<f64>> = train.iter().map(|ex| lstm.logits(&ex.tokens)).collect::<Result<_>>()?;
            let feats: Vec<FeatureVector> = train.iter().map(|ex| ex.features.clone()).collect();
            let (x, _) = build_fusion_inputs(&logits, &feats, groups, &dims, time)?;
            let y: Vec<u32> = train.iter().map(|ex| ex.target).collect();
            let mut forest_cfg = cfg.forest;
            forest_cfg.rng_seed = derive_seed(cfg.seed, "fusion/forest");
            let forest = forest_fit(&x, &y, m, &forest_cfg)?;
            Ok((
                FusedModel::Forest {
                    lstm: lstm.clone(),
                    forest,
                    groups: groups.clone(),
                    dims,
                },
                TrainHistory::default(),
            ))
        }
    }
}

impl FusedModel {
    pub fn variant(&self) -> FusionVariant {
        match self {
            Self::Joint { .. } => FusionVariant::DnnConcat,
            Self::LogitDnn { .. } => FusionVariant::DnnLogitFeature,
            Self::Forest { .. } => FusionVariant::ForestOverLogits,
        }
    }

    pub fn groups(&self) -> &GroupSet {
        match self {
            Self::Joint { groups, .. } | Self::LogitDnn { groups, .. } | Self::Forest { groups, .. } => groups,
        }
    }

    /// Class scores (logits for the DNN variants, vote shares for the forest).
    pub fn scores(&self, ex: &FusionExample) -> Result<Vec<f64>> {
        let time = self.variant().time_encoding();
        match self {
            Self::Joint {
                model,
                standardizer,
                groups,
                dims,
            } => {
                model.lstm.check_tokens(&ex.tokens)?;
                let features = standardizer.apply(&encoded(ex, groups, dims, time)?);
                Ok(model.logits(&JointExample {
                    tokens: ex.tokens.clone(),
                    features,
                    target: ex.target,
                }))
            }
            Self::LogitDnn {
                lstm,
                mlp,
                standardizer,
                groups,
                dims,
            } => {
                let row = standardizer.apply(&logit_row(lstm, ex, groups, dims, time)?);
                Ok(mlp.forward(&row).logits().to_vec())
            }
            Self::Forest { lstm, forest, groups, dims } => forest.predict_proba(&logit_row(lstm, ex, groups, dims, time)?),
        }
    }

    pub fn predict(&self, ex: &FusionExample) -> Result<LocationId> {
        Ok(argmax(&self.scores(ex)?) as LocationId)
    }

    /// Writes the model into `dir`: `encoder.ckpt` plus `head.ckpt` or `forest.json`,
    /// and `fusion.json` describing the bundle.
    pub fn save(&self, dir: &Path, info: &FusionManifest) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let lstm = match self {
            Self::Joint { model, standardizer, .. } => {
                let ckpt = model.mlp.to_checkpoint(info.seed, serde_json::to_value(standardizer)?);
                write_checkpoint(BufWriter::new(File::create(dir.join("head.ckpt"))?), &ckpt)?;
                &model.lstm
            }
            Self::LogitDnn {
                lstm, mlp, standardizer, ..
            } => {
                let ckpt = mlp.to_checkpoint(info.seed, serde_json::to_value(standardizer)?);
                write_checkpoint(BufWriter::new(File::create(dir.join("head.ckpt"))?), &ckpt)?;
                lstm
            }
            Self::Forest { lstm, forest, .. } => {
                serde_json::to_writer(BufWriter::new(File::create(dir.join("forest.json"))?), forest)?;
                lstm
            }
        };
        write_checkpoint(BufWriter::new(File::create(dir.join("encoder.ckpt"))?), &lstm.to_checkpoint(info.seed))?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("fusion.json"))?), info)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, FusionManifest)> {
        let info: FusionManifest = serde_json::from_reader(BufReader::new(File::open(dir.join("fusion.json"))?))?;
        let lstm = LstmClassifier::from_checkpoint(&read_checkpoint(BufReader::new(File::open(dir.join("encoder.ckpt"))?))?)?;
        let read_head = || -> Result<(Mlp, Standardizer)> {
            let ckpt = read_checkpoint(BufReader::new(File::open(dir.join("head.ckpt"))?))?;
            let standardizer: Standardizer = serde_json::from_value(ckpt.header.config.clone())?;
            Ok((Mlp::from_checkpoint(&ckpt)?, standardizer))
        };
        let (groups, dims) = (info.groups.clone(), info.dims);
        let model = match info.variant {
            FusionVariant::DnnConcat => {
                let (mlp, standardizer) = read_head()?;
                Self::Joint {
                    model: JointModel {
                        lstm,
                        mlp,
                        train_encoder: info.joint_encoder,
                    },
                    standardizer,
                    groups,
                    dims,
                }
            }
            FusionVariant::DnnLogitFeature => {
                let (mlp, standardizer) = read_head()?;
                Self::LogitDnn {
                    lstm,
                    mlp,
                    standardizer,
                    groups,
                    dims,
                }
            }
            FusionVariant::ForestOverLogits => Self::Forest {
                lstm,
                forest: serde_json::from_reader(BufReader::new(File::open(dir.join("forest.json"))?))?,
                groups,
                dims,
            },
        };
        Ok((model, info))
    }
}

/// Bundle description stored next to the fused model artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionManifest {
    pub variant: FusionVariant,
    pub groups: GroupSet,
    pub dims: FeatureDims,
    pub joint_encoder: bool,
    pub seed: u64,
    pub audit: LeakageAudit,
}

/// Digest of a set of query IDs (order-insensitive).
pub fn id_digest(ids: &[u64]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Record proving that no evaluation query was used for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub train_ids_sha256: String,
    pub eval_ids_sha256: String,
    pub n_train: usize,
    pub n_eval: usize,
    pub overlap: usize,
}

impl LeakageAudit {
    /// Fails with [`Error::Leakage`] if any evaluation ID was trained on.
    pub fn check(train_ids: &[u64], eval_ids: &[u64]) -> Result<Self> {
        let train: BTreeSet<u64> = train_ids.iter().copied().collect();
        let overlap = eval_ids.iter().filter(|id| train.contains(id)).count();
        if overlap > 0 {
            return Err(Error::Leakage(format!(
                "{overlap} evaluation queries also appear in a training input"
            )));
        }
        Ok(Self {
            train_ids_sha256: id_digest(train_ids),
            eval_ids_sha256: id_digest(eval_ids),
            n_train: train_ids.len(),
            n_eval: eval_ids.len(),
            overlap,
        })
    }
}

/// Fused accuracy divided by pure-LSTM accuracy; `None` when the LSTM scored zero.
pub fn relative_performance(fused_acc: f64, lstm_acc: f64) -> Option<f64> {
    (lstm_acc > 0.0).then(|| fused_acc / lstm_acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::TimeContext;
    use crate::neuralseq::LstmConfig;
    use proptest::prelude::*;

    const DIMS: FeatureDims = FeatureDims {
        n_apps: 6,
        n_sensors: 3,
        n_broadcasts: 2,
    };

    fn fv(app: Vec<u8>, sensor: Vec<f64>, broadcast: Vec<u32>) -> FeatureVector {
        FeatureVector {
            app,
            sensor,
            broadcast,
            time: TimeContext::of_window(1_483_351_200, 1_483_358_400),
        }
    }

    #[test]
    fn group_set_names() {
        let g: GroupSet = "sensor+app".parse().unwrap();
        assert_eq!(g.to_string(), "app+sensor");
        assert_eq!(GroupSet::default().to_string(), "none");
        assert!("app+wifi".parse::<GroupSet>().is_err());
        assert_eq!(GroupSet::all().to_string(), "app+sensor+broadcast+time");
    }

    #[test]
    fn widths() {
        let dims = FeatureDims {
            n_apps: 655,
            n_sensors: 238,
            n_broadcasts: 82,
        };
        let logits = vec![vec![0.0; 25]];
        let feats = vec![fv(vec![0; 655], vec![0.0; 238], vec![0; 82])];
        let (x, _) = build_fusion_inputs(&logits, &feats, &GroupSet::default(), &dims, TimeEncoding::Ordinal).unwrap();
        assert_eq!(x.n_cols(), 25);
        let app = GroupSet::new([FeatureGroup::App]);
        let (x, _) = build_fusion_inputs(&logits, &feats, &app, &dims, TimeEncoding::Ordinal).unwrap();
        assert_eq!(x.n_cols(), 680);
        let time = GroupSet::new([FeatureGroup::Time]);
        let (x, layout) = build_fusion_inputs(&logits, &feats, &time, &dims, TimeEncoding::OneHot).unwrap();
        assert_eq!(x.n_cols(), 25 + 62);
        // Monday 10:00 -> 12:00
        let row = x.row(0);
        let t = layout.range("time").unwrap();
        let ones: Vec<usize> = (t.start..t.end).filter(|&c| row[c] == 1.0).map(|c| c - t.start).collect();
        assert_eq!(ones, vec![10, 24, 31 + 12, 31 + 24]);
    }

    #[test]
    fn bad_dimension_names_the_group() {
        let feats = vec![fv(vec![0; 6], vec![0.0; 2], vec![0; 2])];
        let err = build_fusion_inputs(&[vec![0.0; 3]], &feats, &GroupSet::all(), &DIMS, TimeEncoding::Ordinal).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { ref group, .. } if group == "sensor"));
    }

    #[test]
    fn relative_performance_cases() {
        assert_eq!(relative_performance(0.5, 0.5), Some(1.0));
        assert!((relative_performance(0.6, 0.5).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(relative_performance(0.3, 0.0), None);
    }

    #[test]
    fn leakage_is_detected() {
        assert!(LeakageAudit::check(&[1, 2, 3], &[4, 5]).is_ok());
        assert!(matches!(LeakageAudit::check(&[1, 2, 3], &[3]), Err(Error::Leakage(_))));
        assert_eq!(id_digest(&[2, 1]), id_digest(&[1, 2]));
    }

    fn confident_lstm() -> LstmClassifier {
        // head reads a hidden unit that remembers the last token, scaled large
        let mut lstm = LstmClassifier::new(3, &LstmConfig { embed_dim: 3, hidden_dim: 4 }, 7).unwrap();
        let ex: Vec<crate::neuralseq::SeqExample> = (0..60)
            .map(|i| crate::neuralseq::SeqExample {
                tokens: vec![(i % 3) as u32],
                target: ((i + 1) % 3) as u32,
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 60,
            batch_size: 8,
            ..Default::default()
        };
        lstm = fit(lstm, &ex, &ex, &cfg).unwrap().0;
        lstm
    }

    fn examples(n: usize) -> Vec<FusionExample> {
        (0..n)
            .map(|i| FusionExample {
                query_id: i as u64,
                tokens: vec![(i % 3) as u32],
                features: fv(vec![0; 6], vec![0.0; 3], vec![0; 2]),
                target: ((i + 1) % 3) as u32,
            })
            .collect()
    }

    fn fit_cfg() -> FusionFitConfig {
        FusionFitConfig {
            fusion: FusionConfig {
                dnn: DnnConfig { hidden: vec![8] },
                joint_encoder: true,
            },
            train: TrainConfig {
                learning_rate: 0.02,
                max_epochs: 40,
                batch_size: 8,
                ..Default::default()
            },
            forest: ForestConfig {
                n_trees: 10,
                ..Default::default()
            },
            dims: DIMS,
            seed: 4,
        }
    }

    #[test]
    fn forest_over_confident_logits_matches_lstm() {
        let lstm = confident_lstm();
        let data = examples(60);
        let lstm_hits = data.iter().filter(|ex| lstm.predict(&ex.tokens).unwrap().0 == ex.target).count();
        assert_eq!(lstm_hits, 60);
        let (model, _) = fusion_fit(FusionVariant::ForestOverLogits, &lstm, &GroupSet::default(), &data, &[], &fit_cfg()).unwrap();
        let hits = data.iter().filter(|ex| model.predict(ex).unwrap() == ex.target).count();
        assert_eq!(hits, lstm_hits);
    }

    #[test]
    fn every_variant_round_trips_through_disk() {
        let lstm = confident_lstm();
        let data = examples(30);
        let groups = GroupSet::all();
        for variant in FusionVariant::ALL {
            let (model, _) = fusion_fit(variant, &lstm, &groups, &data, &data, &fit_cfg()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let info = FusionManifest {
                variant,
                groups: groups.clone(),
                dims: DIMS,
                joint_encoder: true,
                seed: 4,
                audit: LeakageAudit::check(&[1], &[2]).unwrap(),
            };
            model.save(dir.path(), &info).unwrap();
            let (back, info2) = FusedModel::load(dir.path()).unwrap();
            assert_eq!(info2, info);
            for ex in &data {
                assert_eq!(back.scores(ex).unwrap(), model.scores(ex).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn column_slices_reproduce_inputs(
            rows in prop::collection::vec(
                (prop::collection::vec(-5.0f64..5.0, 4),
                 prop::collection::vec(0u8..2, 6),
                 prop::collection::vec(-3.0f64..3.0, 3),
                 prop::collection::vec(0u32..9, 2)),
                1..10)
        ) {
            let logits: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
            let feats: Vec<FeatureVector> = rows.iter().map(|r| fv(r.1.clone(), r.2.clone(), r.3.clone())).collect();
            let (x, layout) = build_fusion_inputs(&logits, &feats, &GroupSet::all(), &DIMS, TimeEncoding::Ordinal).unwrap();
            for (i, (l, f)) in logits.iter().zip(&feats).enumerate() {
                let row = x.row(i);
                prop_assert_eq!(&row[layout.range("logits").unwrap()], l.as_slice());
                prop_assert_eq!(&row[layout.range("sensor").unwrap()], f.sensor.as_slice());
                let app: Vec<u8> = row[layout.range("app").unwrap()].iter().map(|&v| v as u8).collect();
                prop_assert_eq!(app, f.app.clone());
                let b: Vec<u32> = row[layout.range("broadcast").unwrap()].iter().map(|&v| v as u32).collect();
                prop_assert_eq!(b, f.broadcast.clone());
                let t: Vec<u8> = row[layout.range("time").unwrap()].iter().map(|&v| v as u8).collect();
                prop_assert_eq!(t, f.time.as_array().to_vec());
            }
        }
    }
}
