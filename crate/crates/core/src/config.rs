//! Run configuration: one TOML file whose sections mirror the library's
//! per-module configs. Every field has a default, so an empty file is valid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::forest::ForestConfig;
use crate::granularity::GranularityConfig;
use crate::neuralseq::{LstmConfig, SequencePreprocessConfig, TrainConfig};
use crate::querysim::TargetCriterion;
use crate::synthgen::{GapConfig, WorldConfig};
use crate::trajectory::{ExtractionConfig, Granularity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub n_per_trajectory: usize,
    /// Minimum share of a trajectory on each side of a split.
    pub min_frac: f64,
    /// Train / validation / test shares of trajectories.
    pub split_fractions: [f64; 3],
    /// Minutes thresholds of the Important@K criteria.
    pub important_k: Vec<u32>,
    /// Segment counts of the Longest@K criteria.
    pub longest_k: Vec<u32>,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            n_per_trajectory: 5,
            min_frac: 0.2,
            split_fractions: [0.7, 0.1, 0.2],
            important_k: vec![2, 5, 10],
            longest_k: vec![3, 5, 10],
        }
    }
}

impl QueryConfig {
    /// Successive first, then Important@K and Longest@K in configured order.
    pub fn criteria(&self) -> Vec<TargetCriterion> {
        let mut out = vec![TargetCriterion::Successive];
        out.extend(self.important_k.iter().map(|&k| TargetCriterion::ImportantAtK(k)));
        out.extend(self.longest_k.iter().map(|&k| TargetCriterion::LongestAtK(k)));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_trajectory < 1 {
            return Err(Error::config("queries.n_per_trajectory must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.min_frac) {
            return Err(Error::config("queries.min_frac must be in [0, 0.5)"));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::config("queries.split_fractions must be non-negative and sum to 1"));
        }
        self.criteria().iter().try_for_each(TargetCriterion::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Granularities left out of the relative-performance averages.
    pub exclude_m: Vec<Granularity>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { exclude_m: vec![5, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Model selectors: `markov`, `lstm`, `forest:<groups>`,
    /// `fusion_a|fusion_b|fusion_c:<groups>`; groups are `+`-joined.
    pub models: Vec<String>,
    /// Also write per-group feature matrices during `prepare`.
    pub export_features: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mut models = vec!["markov".to_string(), "lstm".to_string()];
        for g in ["app", "sensor", "broadcast", "time"] {
            models.push(format!("forest:{g}"));
        }
        for g in ["app", "sensor", "broadcast", "time", "app+sensor+broadcast+time"] {
            models.push(format!("fusion_c:{g}"));
        }
        Self {
            models,
            export_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub gaps: GapConfig,
    pub extraction: ExtractionConfig,
    pub granularity: GranularityConfig,
    pub queries: QueryConfig,
    pub sequence: SequencePreprocessConfig,
    pub lstm: LstmConfig,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            world: WorldConfig::default(),
            gaps: GapConfig::default(),
            extraction: ExtractionConfig::default(),
            granularity: GranularityConfig::default(),
            queries: QueryConfig::default(),
            sequence: SequencePreprocessConfig::default(),
            lstm: LstmConfig::default(),
            train: TrainConfig::default(),
            forest: ForestConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.gaps.validate()?;
        self.extraction.validate()?;
        self.granularity.validate()?;
        self.queries.validate()?;
        if self.sequence.truncate_len == 0 {
            return Err(Error::config("sequence.truncate_len must be >= 1"));
        }
        if self.lstm.embed_dim == 0 || self.lstm.hidden_dim == 0 {
            return Err(Error::config("lstm dimensions must be >= 1"));
        }
        self.train.validate()?;
        self.forest.validate()?;
        self.fusion.dnn.validate()?;
        if self.sweep.models.is_empty() {
            return Err(Error::config("sweep.models is empty"));
        }
        for m in &self.sweep.models {
            m.parse::<crate::pipeline::ModelSpec>()?;
        }
        Ok(())
    }
}
