//! Threshold sweeps, per-category and overall metrics, conservative
//! threshold selection (zero assessment FNs), and the union ensemble of
//! multiple models' TN sets.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{classify_at_threshold, outcome_of, ConfusionCounts, Flag, GroundTruthLabel, Outcome};

pub const DEFAULT_BETA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("no labeled findings after filtering")]
    EmptyLabeledSet,
    #[error("invalid threshold grid: {0}")]
    InvalidGrid(String),
    #[error("model {0} has no conservative threshold and cannot join the ensemble")]
    NotConservative(String),
    #[error("ensemble members were calibrated on different labeled sets")]
    MixedLabelSets,
    #[error("ensemble requires at least one member")]
    NoMembers,
}

/// One scored, labeled finding: the unit the sweep operates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub finding_id: String,
    pub category: String,
    pub score: f64,
    pub is_real: bool,
}

impl LabeledScore {
    pub fn label(&self) -> GroundTruthLabel {
        GroundTruthLabel { finding_id: self.finding_id.clone(), is_real: self.is_real }
    }
}

/// Strictly increasing thresholds in [0, 10]. Default mirrors the nine
/// integer thresholds 1.0..=9.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub values: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid { values: (1..=9).map(f64::from).collect() }
    }
}

impl ThresholdGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, CalibrateError> {
        if values.is_empty() {
            return Err(CalibrateError::InvalidGrid("grid is empty".into()));
        }
        if !values.windows(2).all(|w| w[0] < w[1]) {
            return Err(CalibrateError::InvalidGrid("grid must be strictly increasing".into()));
        }
        if values.iter().any(|v| !(0.0..=10.0).contains(v)) {
            return Err(CalibrateError::InvalidGrid("grid values must lie in [0, 10]".into()));
        }
        Ok(ThresholdGrid { values })
    }
}

/// Metrics at one threshold; all recomputable from `counts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub f2: f64,
    /// Detected FPs over all ground-truth FPs: tn / (tn + fp).
    pub tn_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub model_id: String,
    pub grid: ThresholdGrid,
    pub rows_overall: Vec<MetricRow>,
    pub rows_by_category: BTreeMap<String, Vec<MetricRow>>,
    /// Per-category unweighted averages, one row per grid value.
    pub macro_rows: Vec<MetricRow>,
    /// Highest grid threshold with zero overall assessment FNs; absent when
    /// the model fails conservative analysis even at the grid minimum.
    pub conservative_threshold: Option<f64>,
    pub tn_set_at_conservative: BTreeSet<String>,
    /// Hash of the labeled set, used to reject mixed-set ensembles.
    pub labels_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub member_models: Vec<String>,
    pub union_tn_set: BTreeSet<String>,
    pub combined_counts: ConfusionCounts,
    pub combined_metrics: MetricRow,
}

/// Counts assessment outcomes at one threshold, optionally restricted to a
/// category. Unlabeled findings are the caller's concern; every entry here
/// carries its label.
pub fn confusion_at(
    data: &[LabeledScore],
    threshold: f64,
    category_filter: Option<&str>,
) -> Result<ConfusionCounts, CalibrateError> {
    let mut counts = ConfusionCounts {
        category: category_filter.map(String::from),
        ..Default::default()
    };
    let mut seen = false;
    for item in data {
        if category_filter.is_some_and(|c| c != item.category) {
            continue;
        }
        seen = true;
        let flag = classify_at_threshold(item.score, threshold);
        counts.add(outcome_of(flag, &item.label()));
    }
    if !seen {
        return Err(CalibrateError::EmptyLabeledSet);
    }
    Ok(counts)
}

/// TPR, FPR, precision and F-beta with the documented 0/0 sentinels:
/// precision and TPR default to 1.0 on an empty denominator, FPR to 0.0,
/// F-beta to 0.0 when precision and recall are both zero.
pub fn metrics_from(counts: &ConfusionCounts, beta: f64) -> (f64, f64, f64, f64) {
    assert!(beta > 0.0, "beta must be positive");
    let (tp, fp, tn, fn_) = (counts.tp as f64, counts.fp as f64, counts.tn as f64, counts.fn_ as f64);
    let tpr = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
    let fpr = if fp + tn == 0.0 { 0.0 } else { fp / (fp + tn) };
    let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
    let beta2 = beta * beta;
    // Count form of (1 + b^2) P R / (b^2 P + R): algebraically identical and
    // exact when P = R, since numerator and denominator stay integer-valued.
    let f_denominator = (1.0 + beta2) * tp + beta2 * fn_ + fp;
    let f_beta = if f_denominator == 0.0 {
        // tp = fp = fn = 0: P = R = 1 under the sentinels.
        1.0
    } else {
        (1.0 + beta2) * tp / f_denominator
    };
    (tpr, fpr, precision, f_beta)
}

fn row_from_counts(threshold: f64, counts: ConfusionCounts, beta: f64) -> MetricRow {
    let (tpr, fpr, precision, f2) = metrics_from(&counts, beta);
    let fps_total = counts.tn + counts.fp;
    let tn_ratio = if fps_total == 0 { 0.0 } else { counts.tn as f64 / fps_total as f64 };
    MetricRow { threshold, counts, tpr, fpr, precision, f2, tn_ratio }
}

/// Unweighted arithmetic mean of each metric across categories at one
/// threshold (counts are summed for reference).
pub fn macro_average(rows_by_category: &[&MetricRow]) -> MetricRow {
    assert!(!rows_by_category.is_empty(), "macro average needs at least one category");
    let n = rows_by_category.len() as f64;
    let mut counts = ConfusionCounts::default();
    let (mut tpr, mut fpr, mut precision, mut f2, mut tn_ratio) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for row in rows_by_category {
        counts.tp += row.counts.tp;
        counts.fp += row.counts.fp;
        counts.tn += row.counts.tn;
        counts.fn_ += row.counts.fn_;
        tpr += row.tpr;
        fpr += row.fpr;
        precision += row.precision;
        f2 += row.f2;
        tn_ratio += row.tn_ratio;
    }
    MetricRow {
        threshold: rows_by_category[0].threshold,
        counts,
        tpr: tpr / n,
        fpr: fpr / n,
        precision: precision / n,
        f2: f2 / n,
        tn_ratio: tn_ratio / n,
    }
}

/// Hash of the sorted (finding_id, is_real) pairs; two calibrations agree
/// on it iff they were computed over the same labeled set.
pub fn labels_fingerprint(data: &[LabeledScore]) -> String {
    let pairs: Vec<(&str, bool)> =
        data.iter().map(|d| (d.finding_id.as_str(), d.is_real)).collect();
    labels_fingerprint_pairs(pairs)
}

/// Same fingerprint, computed from raw (finding_id, is_real) pairs.
pub fn labels_fingerprint_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, bool)>) -> String {
    let mut pairs: Vec<(&str, bool)> = pairs.into_iter().collect();
    pairs.sort();
    let mut hasher = Sha256::new();
    for (id, is_real) in pairs {
        hasher.update(id.as_bytes());
        hasher.update([if is_real { 1u8 } else { 0u8 }]);
    }
    hex::encode(hasher.finalize())
}

/// One metric row per grid value, overall and per category, plus macro
/// rows, plus the conservative threshold and its TN set.
pub fn threshold_sweep(
    model_id: &str,
    data: &[LabeledScore],
    grid: &ThresholdGrid,
    beta: f64,
) -> Result<CalibrationResult, CalibrateError> {
    if data.is_empty() {
        return Err(CalibrateError::EmptyLabeledSet);
    }
    let categories: BTreeSet<&str> = data.iter().map(|d| d.category.as_str()).collect();

    let mut rows_overall = Vec::with_capacity(grid.values.len());
    let mut rows_by_category: BTreeMap<String, Vec<MetricRow>> = BTreeMap::new();
    let mut macro_rows = Vec::with_capacity(grid.values.len());
    for &threshold in &grid.values {
        rows_overall.push(row_from_counts(threshold, confusion_at(data, threshold, None)?, beta));
        let mut category_rows = Vec::with_capacity(categories.len());
        for &category in &categories {
            let row = row_from_counts(threshold, confusion_at(data, threshold, Some(category))?, beta);
            rows_by_category.entry(category.to_string()).or_default().push(row);
        }
        for &category in &categories {
            category_rows.push(rows_by_category[category].last().unwrap());
        }
        macro_rows.push(macro_average(&category_rows));
    }

    let conservative = conservative_threshold(&rows_overall);
    let tn_set_at_conservative = match conservative {
        Some(threshold) => tn_set_at(data, threshold),
        None => BTreeSet::new(),
    };
    Ok(CalibrationResult {
        model_id: model_id.into(),
        grid: grid.clone(),
        rows_overall,
        rows_by_category,
        macro_rows,
        conservative_threshold: conservative,
        tn_set_at_conservative,
        labels_fingerprint: labels_fingerprint(data),
    })
}

/// The highest threshold at which no assessment FNs occurred, judged on
/// overall counts. Absent when even the grid minimum misses a genuine
/// weakness.
pub fn conservative_threshold(rows_overall: &[MetricRow]) -> Option<f64> {
    rows_overall
        .iter()
        .filter(|row| row.counts.fn_ == 0)
        .map(|row| row.threshold)
        .fold(None, |best, t| Some(best.map_or(t, |b: f64| b.max(t))))
}

/// Finding ids correctly flagged as SAST false positives at `threshold`.
pub fn tn_set_at(data: &[LabeledScore], threshold: f64) -> BTreeSet<String> {
    data.iter()
        .filter(|item| {
            let flag = classify_at_threshold(item.score, threshold);
            outcome_of(flag, &item.label()) == Outcome::AssessTn
        })
        .map(|item| item.finding_id.clone())
        .collect()
}

/// One ensemble member: a model with a present conservative threshold and
/// the TN set it achieves there.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub model_id: String,
    pub conservative_threshold: Option<f64>,
    pub tn_set: BTreeSet<String>,
    pub labels_fingerprint: String,
}

impl From<&CalibrationResult> for EnsembleMember {
    fn from(result: &CalibrationResult) -> Self {
        EnsembleMember {
            model_id: result.model_id.clone(),
            conservative_threshold: result.conservative_threshold,
            tn_set: result.tn_set_at_conservative.clone(),
            labels_fingerprint: result.labels_fingerprint.clone(),
        }
    }
}

/// Union rule: a finding is flagged FP iff any member flags it FP at its own
/// conservative threshold (equivalently, flagged vulnerable only when all
/// members agree). Because every member is conservative on the same labeled
/// set, the union preserves zero FNs.
pub fn ensemble_union(
    members: &[EnsembleMember],
    labels: &BTreeMap<String, bool>,
    beta: f64,
) -> Result<EnsembleResult, CalibrateError> {
    if members.is_empty() {
        return Err(CalibrateError::NoMembers);
    }
    for member in members {
        if member.conservative_threshold.is_none() {
            return Err(CalibrateError::NotConservative(member.model_id.clone()));
        }
        if member.labels_fingerprint != members[0].labels_fingerprint {
            return Err(CalibrateError::MixedLabelSets);
        }
    }
    let union_tn_set: BTreeSet<String> =
        members.iter().flat_map(|m| m.tn_set.iter().cloned()).collect();

    let mut counts = ConfusionCounts::default();
    for (finding_id, &is_real) in labels {
        let flag = if union_tn_set.contains(finding_id) {
            Flag::FlaggedFalsePositive
        } else {
            Flag::FlaggedVulnerable
        };
        counts.add(outcome_of(
            flag,
            &GroundTruthLabel { finding_id: finding_id.clone(), is_real },
        ));
    }
    let combined_metrics = row_from_counts(0.0, counts.clone(), beta);
    Ok(EnsembleResult {
        member_models: members.iter().map(|m| m.model_id.clone()).collect(),
        union_tn_set,
        combined_counts: counts,
        combined_metrics,
    })
}

/// Byte-stable CSV emission of a calibration result: one line per
/// (scope, threshold), scope being "overall", "macro", or a category.
pub fn write_calibration_csv<W: Write>(result: &CalibrationResult, mut out: W) -> std::io::Result<()> {
    writeln!(out, "scope,threshold,tp,fp,tn,fn,tpr,fpr,precision,f2,tn_ratio")?;
    let mut write_rows = |scope: &str, rows: &[MetricRow]| -> std::io::Result<()> {
        for row in rows {
            writeln!(
                out,
                "{scope},{:.1},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                row.threshold,
                row.counts.tp,
                row.counts.fp,
                row.counts.tn,
                row.counts.fn_,
                row.tpr,
                row.fpr,
                row.precision,
                row.f2,
                row.tn_ratio
            )?;
        }
        Ok(())
    };
    write_rows("overall", &result.rows_overall)?;
    write_rows("macro", &result.macro_rows)?;
    let categories: Vec<(String, Vec<MetricRow>)> = result
        .rows_by_category
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    for (category, rows) in &categories {
        write_rows(category, rows)?;
    }
    Ok(())
}
