//! Accuracy metrics, the random baseline and the relative-performance grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::querysim::{LabeledQuery, TargetCriterion};
use crate::trajectory::{Granularity, LocationId};

/// Fraction of exact matches.
pub fn accuracy_at_1(predictions: &[LocationId], labels: &[LocationId]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            group: "labels".into(),
            expected: predictions.len(),
            actual: labels.len(),
        });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Expected accuracy of a uniform guess among the `m - 1` non-current locations.
pub fn random_guess_baseline(m: Granularity) -> Result<f64> {
    if m < 2 {
        return Err(Error::config("random baseline needs m >= 2"));
    }
    Ok(1.0 / f64::from(m - 1))
}

pub fn mean_target_stay(queries: &[LabeledQuery]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    queries.iter().map(|q| q.target_stay_seconds as f64).sum::<f64>() / queries.len() as f64
}

/// Accuracy of one model on one scenario's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub m: Granularity,
    pub criterion: TargetCriterion,
    pub model: String,
    /// Feature groups used, empty for trajectory-only models.
    pub groups: String,
    pub n_test: usize,
    pub accuracy: f64,
    /// Accuracy divided by the LSTM accuracy on the same scenario.
    pub relative_perf: Option<f64>,
    pub mean_target_stay_seconds: f64,
}

impl ScenarioResult {
    /// `model` or `model:groups`.
    pub fn label(&self) -> String {
        if self.groups.is_empty() {
            self.model.clone()
        } else {
            format!("{}:{}", self.model, self.groups)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Granularity,
    Criterion,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Granularity => "granularity",
            Axis::Criterion => "criterion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub axis: Axis,
    /// `label/m=25` or `label/important@5`.
    pub key: String,
    pub mean_relative_perf: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportGrid {
    pub cells: BTreeMap<(Granularity, TargetCriterion, String), ScenarioResult>,
    /// Mean relative performance per (model label, granularity), over criteria.
    pub by_granularity: BTreeMap<(String, Granularity), f64>,
    /// Mean relative performance per (model label, criterion), over included granularities.
    pub by_criterion: BTreeMap<(String, TargetCriterion), f64>,
}

impl ReportGrid {
    pub fn heatmap(&self) -> Vec<HeatmapRow> {
        let mut rows: Vec<HeatmapRow> = self
            .by_granularity
            .iter()
            .map(|((label, m), v)| HeatmapRow {
                axis: Axis::Granularity,
                key: format!("{label}/m={m}"),
                mean_relative_perf: *v,
            })
            .collect();
        rows.extend(self.by_criterion.iter().map(|((label, c), v)| HeatmapRow {
            axis: Axis::Criterion,
            key: format!("{label}/{c}"),
            mean_relative_perf: *v,
        }));
        rows
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Collects results into the grid and averages relative performance along
/// each axis. Cells at `excluded` granularities and cells without a relative
/// performance never enter an average.
pub fn build_report_grid(results: &[ScenarioResult], excluded: &[Granularity]) -> ReportGrid {
    let mut grid = ReportGrid::default();
    let mut by_m: BTreeMap<(String, Granularity), Vec<f64>> = BTreeMap::new();
    let mut by_c: BTreeMap<(String, TargetCriterion), Vec<f64>> = BTreeMap::new();
    for r in results {
        grid.cells.insert((r.m, r.criterion, r.label()), r.clone());
        let Some(rel) = r.relative_perf else { continue };
        if excluded.contains(&r.m) {
            continue;
        }
        by_m.entry((r.label(), r.m)).or_default().push(rel);
        by_c.entry((r.label(), r.criterion)).or_default().push(rel);
    }
    grid.by_granularity = by_m.into_iter().map(|(k, v)| (k, mean(&v))).collect();
    grid.by_criterion = by_c.into_iter().map(|(k, v)| (k, mean(&v))).collect();
    grid
}
