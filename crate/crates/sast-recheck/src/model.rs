//! Shared domain types and the classification semantics the rest of the
//! pipeline consumes.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One SAST-reported potential weakness plus its contextual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    /// Unique within a [`SecurityReport`].
    pub id: String,
    /// Name of the SAST tool that produced the finding.
    pub tool: String,
    /// Weakness category string (e.g. the SpotBugs bug type or SARIF rule id).
    pub category: String,
    /// CWE identifier; 0 means the tool supplied none.
    pub cwe_id: u32,
    /// Repository-relative path of the file containing the finding.
    pub file_path: String,
    /// 1-based line number.
    pub line: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_type: Option<String>,
    /// Full text of the source file; populated by `attach_source`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_tag: Option<String>,
    /// Reason code when the finding cannot be assessed (e.g. "missing-source").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unassessable: Option<String>,
    /// Set when ingest had to fall back (e.g. CWE attribute missing).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub needs_review: bool,
}

impl Finding {
    /// Stable id for input formats that supply none:
    /// hash over (tool, file_path, line, category, cwe_id).
    pub fn synthesize_id(tool: &str, file_path: &str, line: u32, category: &str, cwe_id: u32) -> String {
        let mut hasher = Sha256::new();
        for part in [tool, file_path, &line.to_string(), category, &cwe_id.to_string()] {
            hasher.update(part.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(&hasher.finalize()[..12])
    }

    pub fn is_assessable(&self) -> bool {
        self.unassessable.is_none() && self.source_text.as_deref().is_some_and(|s| !s.is_empty())
    }
}

/// A parsed SAST report in canonical form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityReport {
    pub findings: Vec<Finding>,
    #[serde(default)]
    pub tool_versions: BTreeMap<String, String>,
    pub generated_at: DateTime<Utc>,
    /// Records skipped during parsing (malformed instances etc.).
    #[serde(default)]
    pub skipped: u32,
}

impl SecurityReport {
    pub fn new(findings: Vec<Finding>) -> Self {
        SecurityReport {
            findings,
            tool_versions: BTreeMap::new(),
            generated_at: Utc::now(),
            skipped: 0,
        }
    }

    pub fn find(&self, id: &str) -> Option<&Finding> {
        self.findings.iter().find(|f| f.id == id)
    }
}

/// Ground truth for one finding: was the SAST report right?
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub finding_id: String,
    /// true = genuine weakness (SAST true positive); false = SAST false positive.
    pub is_real: bool,
}

/// One model response for one finding in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub finding_id: String,
    pub model_id: String,
    pub run_index: u32,
    pub raw_response: String,
    /// Extracted decision score, clamped to [0, 10].
    pub score: f64,
    pub temperature: f64,
    pub prompt_fingerprint: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

/// How self-consistency scores are folded into one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AggregationRule {
    #[default]
    Mean,
    Median,
    Min,
    Max,
}

/// The per-finding collection of self-consistency scores and their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub finding_id: String,
    pub model_id: String,
    /// Scores in run order; may be shorter than the configured run count
    /// when `partial` is set.
    pub scores: Vec<f64>,
    pub aggregate: f64,
    pub aggregation_rule: AggregationRule,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub partial: bool,
}

/// Flag assigned to a finding by thresholding its decision score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    FlaggedVulnerable,
    FlaggedFalsePositive,
}

/// Classification of the LLM assessment against ground truth.
///
/// `AssessTn` means the model correctly flagged a SAST false positive;
/// `AssessFn` means it wrongly flagged a genuine weakness as secure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    AssessTp,
    AssessFp,
    AssessTn,
    AssessFn,
}

/// Inclusive comparison: score >= threshold is flagged vulnerable.
pub fn classify_at_threshold(score: f64, threshold: f64) -> Flag {
    debug_assert!((0.0..=10.0).contains(&threshold));
    if score >= threshold {
        Flag::FlaggedVulnerable
    } else {
        Flag::FlaggedFalsePositive
    }
}

pub fn outcome_of(flag: Flag, label: &GroundTruthLabel) -> Outcome {
    match (flag, label.is_real) {
        (Flag::FlaggedVulnerable, true) => Outcome::AssessTp,
        (Flag::FlaggedVulnerable, false) => Outcome::AssessFp,
        (Flag::FlaggedFalsePositive, false) => Outcome::AssessTn,
        (Flag::FlaggedFalsePositive, true) => Outcome::AssessFn,
    }
}

/// TP/FP/TN/FN of the LLM assessment against ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Absent = overall; otherwise the category key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::AssessTp => self.tp += 1,
            Outcome::AssessFp => self.fp += 1,
            Outcome::AssessTn => self.tn += 1,
            Outcome::AssessFn => self.fn_ += 1,
        }
    }
}

/// Clamp a model-returned score to [0, 10]; reports whether clamping occurred.
pub fn clamp_score(score: f64) -> (f64, bool) {
    if score < 0.0 {
        (0.0, true)
    } else if score > 10.0 {
        (10.0, true)
    } else {
        (score, false)
    }
}
