//! Runs single-pass and self-consistency assessments, extracts decision
//! scores from free-text responses, and aggregates them into score sets.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, GatewayError, ModelEndpoint};
use crate::model::{clamp_score, AggregationRule, AssessmentRecord, Finding, ScoreSet};
use crate::prompt::{render_prompt, OverBudget, PromptError, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssessmentConfig {
    pub shots: usize,
    /// Number of self-consistency runs (n).
    pub sc_runs: u32,
    pub main_temperature: f64,
    pub sc_temperature: f64,
    pub aggregation_rule: AggregationRule,
    pub budget_tokens: u32,
    pub max_output_tokens: u32,
    /// Opt-in source windowing for prompts over budget.
    pub truncate_window_lines: Option<u32>,
    /// Concurrent findings in a batch.
    pub workers: usize,
}

impl Default for AssessmentConfig {
    fn default() -> Self {
        AssessmentConfig {
            shots: 3,
            sc_runs: 5,
            main_temperature: 0.0,
            sc_temperature: 0.7,
            aggregation_rule: AggregationRule::Mean,
            budget_tokens: crate::prompt::DEFAULT_TOKEN_BUDGET,
            max_output_tokens: 1024,
            truncate_window_lines: None,
            workers: 4,
        }
    }
}

impl AssessmentConfig {
    fn over_budget(&self) -> OverBudget {
        match self.truncate_window_lines {
            Some(window_lines) => OverBudget::Truncate { window_lines },
            None => OverBudget::Error,
        }
    }
}

#[derive(Debug, Error)]
pub enum AssessError {
    #[error("finding {finding_id}: {source}")]
    Prompt {
        finding_id: String,
        source: PromptError,
    },
    #[error("finding {finding_id}: {source}")]
    Gateway {
        finding_id: String,
        source: GatewayError,
    },
    #[error("finding {finding_id}: no parseable decision in response")]
    ParseFailure {
        finding_id: String,
        raw_response: String,
    },
    #[error("finding {finding_id}: only {got} of {need} self-consistency runs scored")]
    TooFewRuns {
        finding_id: String,
        got: usize,
        need: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AssessError {
    pub fn finding_id(&self) -> Option<&str> {
        match self {
            AssessError::Prompt { finding_id, .. }
            | AssessError::Gateway { finding_id, .. }
            | AssessError::ParseFailure { finding_id, .. }
            | AssessError::TooFewRuns { finding_id, .. } => Some(finding_id),
            AssessError::Io(_) => None,
        }
    }

    /// Reason code persisted into failure records.
    pub fn reason(&self) -> String {
        match self {
            AssessError::Prompt { source: PromptError::Unassessable(_), .. } => "missing-source".into(),
            AssessError::Prompt { source: PromptError::TooLarge { .. }, .. } => "prompt-too-large".into(),
            AssessError::Prompt { .. } => "template".into(),
            AssessError::Gateway { source, .. } => format!("gateway: {source}"),
            AssessError::ParseFailure { .. } => "parse-failure".into(),
            AssessError::TooFewRuns { .. } => "too-few-runs".into(),
            AssessError::Io(e) => format!("io: {e}"),
        }
    }
}

fn decision_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Decision:\s*(-?\d+(?:\.\d+)?)").expect("valid regex"))
}

/// Parses the LAST `Decision: <number>` occurrence (CoT text may quote the
/// instruction earlier) and clamps to [0, 10]. Returns (score, clamped).
pub fn extract_decision(raw_response: &str) -> Option<(f64, bool)> {
    let capture = decision_regex().captures_iter(raw_response).last()?;
    let value: f64 = capture[1].parse().ok()?;
    let (score, clamped) = clamp_score(value);
    if clamped {
        warn!("decision {value} outside [0,10], clamped to {score}");
    }
    Some((score, clamped))
}

/// mean / median / min / max. Median of an even count is the lower-middle
/// value so the aggregate is always one of the observed scores.
pub fn aggregate_scores(scores: &[f64], rule: AggregationRule) -> f64 {
    assert!(!scores.is_empty(), "cannot aggregate an empty score list");
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    match rule {
        AggregationRule::Mean => sorted.iter().sum::<f64>() / sorted.len() as f64,
        AggregationRule::Median => sorted[(sorted.len() - 1) / 2],
        AggregationRule::Min => sorted[0],
        AggregationRule::Max => sorted[sorted.len() - 1],
    }
}

fn request_for(
    finding: &Finding,
    template: &PromptTemplate,
    config: &AssessmentConfig,
    temperature: f64,
) -> Result<(CompletionRequest, String), AssessError> {
    let rendered = render_prompt(finding, template, config.budget_tokens, config.over_budget())
        .map_err(|source| AssessError::Prompt { finding_id: finding.id.clone(), source })?;
    Ok((
        CompletionRequest {
            system_message: rendered.system_message,
            user_message: rendered.user_message,
            temperature,
            max_output_tokens: config.max_output_tokens,
        },
        rendered.fingerprint,
    ))
}

/// One completion at the main temperature (run index 0).
pub fn assess_finding(
    finding: &Finding,
    gateway: &Gateway,
    endpoint: &ModelEndpoint,
    template: &PromptTemplate,
    config: &AssessmentConfig,
) -> Result<AssessmentRecord, AssessError> {
    let (request, fingerprint) = request_for(finding, template, config, config.main_temperature)?;
    let response = gateway
        .complete(endpoint, &request, 0)
        .map_err(|source| AssessError::Gateway { finding_id: finding.id.clone(), source })?;
    let (score, clamped) = extract_decision(&response.text).ok_or_else(|| AssessError::ParseFailure {
        finding_id: finding.id.clone(),
        raw_response: response.text.clone(),
    })?;
    Ok(AssessmentRecord {
        finding_id: finding.id.clone(),
        model_id: endpoint.model_id.clone(),
        run_index: 0,
        raw_response: response.text,
        score,
        temperature: config.main_temperature,
        prompt_fingerprint: fingerprint,
        clamped,
    })
}

/// n completions at the self-consistency temperature, run indices 0..n-1.
///
/// A run whose response has no parseable decision gets one automatic re-ask
/// (cached under run index n + i so the retry is a distinct request). If
/// runs still fail, the set aggregates over the available scores as long as
/// at least ceil(n/2) exist, and is marked partial; below that the finding
/// fails.
pub fn assess_self_consistency(
    finding: &Finding,
    gateway: &Gateway,
    endpoint: &ModelEndpoint,
    template: &PromptTemplate,
    config: &AssessmentConfig,
) -> Result<ScoreSet, AssessError> {
    let n = config.sc_runs;
    let (request, _) = request_for(finding, template, config, config.sc_temperature)?;
    let mut scores = Vec::with_capacity(n as usize);
    let mut failed_runs = 0usize;
    for run_index in 0..n {
        let mut parsed = None;
        for attempt_index in [run_index, n + run_index] {
            let response = gateway
                .complete(endpoint, &request, attempt_index)
                .map_err(|source| AssessError::Gateway { finding_id: finding.id.clone(), source })?;
            if let Some((score, _)) = extract_decision(&response.text) {
                parsed = Some(score);
                break;
            }
            warn!("finding {}: run {run_index} response had no decision", finding.id);
        }
        match parsed {
            Some(score) => scores.push(score),
            None => failed_runs += 1,
        }
    }

    let need = (n as usize).div_ceil(2);
    if scores.len() < need {
        return Err(AssessError::TooFewRuns {
            finding_id: finding.id.clone(),
            got: scores.len(),
            need,
        });
    }
    let aggregate = aggregate_scores(&scores, config.aggregation_rule);
    Ok(ScoreSet {
        finding_id: finding.id.clone(),
        model_id: endpoint.model_id.clone(),
        scores,
        aggregate,
        aggregation_rule: config.aggregation_rule,
        partial: failed_runs > 0,
    })
}

/// One line of the persisted assessment JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssessmentLine {
    Record(AssessmentRecord),
    ScoreSet(ScoreSet),
    Failure {
        finding_id: String,
        model_id: String,
        reason: String,
    },
}

impl AssessmentLine {
    pub fn finding_id(&self) -> &str {
        match self {
            AssessmentLine::Record(r) => &r.finding_id,
            AssessmentLine::ScoreSet(s) => &s.finding_id,
            AssessmentLine::Failure { finding_id, .. } => finding_id,
        }
    }

    pub fn model_id(&self) -> &str {
        match self {
            AssessmentLine::Record(r) => &r.model_id,
            AssessmentLine::ScoreSet(s) => &s.model_id,
            AssessmentLine::Failure { model_id, .. } => model_id,
        }
    }

    /// The thresholdable score, if the line carries one.
    pub fn score(&self) -> Option<f64> {
        match self {
            AssessmentLine::Record(r) => Some(r.score),
            AssessmentLine::ScoreSet(s) => Some(s.aggregate),
            AssessmentLine::Failure { .. } => None,
        }
    }
}

pub fn read_assessment_jsonl(document: &[u8]) -> Result<Vec<AssessmentLine>, AssessError> {
    let mut lines = Vec::new();
    for raw in document.lines() {
        let raw = raw?;
        if raw.trim().is_empty() {
            continue;
        }
        let line: AssessmentLine = serde_json::from_str(&raw)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        lines.push(line);
    }
    Ok(lines)
}

pub fn write_assessment_jsonl<W: Write>(lines: &[AssessmentLine], mut out: W) -> std::io::Result<()> {
    for line in lines {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Assesses every assessable finding with a bounded worker pool. Findings
/// already present in `existing` are skipped (resumable batches). Output is
/// sorted by finding id so assembly is order-independent.
#[allow(clippy::too_many_arguments)]
pub fn assess_batch(
    findings: &[Finding],
    gateway: &Gateway,
    endpoint: &ModelEndpoint,
    template: &PromptTemplate,
    config: &AssessmentConfig,
    self_consistency: bool,
    existing: &[AssessmentLine],
) -> Vec<AssessmentLine> {
    let done: std::collections::HashSet<(&str, &str)> = existing
        .iter()
        .map(|l| (l.finding_id(), l.model_id()))
        .collect();
    let pending: Vec<&Finding> = findings
        .iter()
        .filter(|f| !done.contains(&(f.id.as_str(), endpoint.model_id.as_str())))
        .collect();

    let assess_one = |finding: &Finding| -> AssessmentLine {
        if let Some(reason) = &finding.unassessable {
            return AssessmentLine::Failure {
                finding_id: finding.id.clone(),
                model_id: endpoint.model_id.clone(),
                reason: reason.clone(),
            };
        }
        let result = if self_consistency {
            assess_self_consistency(finding, gateway, endpoint, template, config)
                .map(AssessmentLine::ScoreSet)
        } else {
            assess_finding(finding, gateway, endpoint, template, config).map(AssessmentLine::Record)
        };
        result.unwrap_or_else(|err| AssessmentLine::Failure {
            finding_id: finding.id.clone(),
            model_id: endpoint.model_id.clone(),
            reason: err.reason(),
        })
    };

    let mut lines: Vec<AssessmentLine> = if config.workers <= 1 || pending.len() <= 1 {
        pending.iter().map(|f| assess_one(f)).collect()
    } else {
        let queue = crossbeam::queue::SegQueue::new();
        for finding in &pending {
            queue.push(*finding);
        }
        let collected = std::sync::Mutex::new(Vec::with_capacity(pending.len()));
        std::thread::scope(|scope| {
            for _ in 0..config.workers.min(pending.len()) {
                scope.spawn(|| {
                    while let Some(finding) = queue.pop() {
                        let line = assess_one(finding);
                        collected.lock().unwrap().push(line);
                    }
                });
            }
        });
        collected.into_inner().unwrap()
    };
    lines.sort_by(|a, b| a.finding_id().cmp(b.finding_id()));
    lines
}
