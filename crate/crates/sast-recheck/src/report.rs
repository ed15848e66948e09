//! The flagged security report: the hand-off artifact for human review.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assess::{AssessmentConfig, AssessmentLine};
use crate::model::{classify_at_threshold, Finding, Flag, SecurityReport};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no threshold supplied and no calibration available")]
    NoThreshold,
    #[error("assessment references finding {0} that is not in the report")]
    UnknownFinding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedFinding {
    pub finding_id: String,
    pub tool: String,
    pub category: String,
    pub cwe_id: u32,
    pub file_path: String,
    pub line: u32,
    pub flag: Flag,
    /// Aggregate decision score; absent for findings whose assessment failed.
    pub score: Option<f64>,
    pub model_id: String,
    /// First line of the model's explanation, for the reviewer's orientation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation_excerpt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedReport {
    pub schema_version: u32,
    pub threshold: f64,
    pub model_ids: Vec<String>,
    pub config: AssessmentConfig,
    pub findings: Vec<FlaggedFinding>,
}

fn excerpt(raw: &str) -> Option<String> {
    let text = raw.trim();
    if text.is_empty() {
        return None;
    }
    let mut line: String = text.chars().take(240).collect();
    if line.len() < text.len() {
        line.push_str("...");
    }
    Some(line.replace('\n', " "))
}

/// Partitions assessed findings by `classify_at_threshold`. Findings whose
/// assessment failed keep their reason and default to the review side (a
/// failed assessment is never silently ignorable).
pub fn build_flagged_report(
    report: &SecurityReport,
    assessments: &[AssessmentLine],
    threshold: f64,
    config: &AssessmentConfig,
) -> Result<FlaggedReport, ReportError> {
    let mut model_ids: Vec<String> = Vec::new();
    let mut findings = Vec::with_capacity(assessments.len());
    for line in assessments {
        let finding: &Finding = report
            .find(line.finding_id())
            .ok_or_else(|| ReportError::UnknownFinding(line.finding_id().to_string()))?;
        if !model_ids.iter().any(|m| m == line.model_id()) {
            model_ids.push(line.model_id().to_string());
        }
        let (flag, score, explanation_excerpt, failure_reason) = match line {
            AssessmentLine::Record(r) => (
                classify_at_threshold(r.score, threshold),
                Some(r.score),
                excerpt(&r.raw_response),
                None,
            ),
            AssessmentLine::ScoreSet(s) => {
                (classify_at_threshold(s.aggregate, threshold), Some(s.aggregate), None, None)
            }
            AssessmentLine::Failure { reason, .. } => {
                (Flag::FlaggedVulnerable, None, None, Some(reason.clone()))
            }
        };
        findings.push(FlaggedFinding {
            finding_id: finding.id.clone(),
            tool: finding.tool.clone(),
            category: finding.category.clone(),
            cwe_id: finding.cwe_id,
            file_path: finding.file_path.clone(),
            line: finding.line,
            flag,
            score,
            model_id: line.model_id().to_string(),
            explanation_excerpt,
            failure_reason,
        });
    }
    findings.sort_by(|a, b| a.finding_id.cmp(&b.finding_id));
    Ok(FlaggedReport {
        schema_version: REPORT_SCHEMA_VERSION,
        threshold,
        model_ids,
        config: config.clone(),
        findings,
    })
}

/// Human-readable companion to the JSON report: grouped by category,
/// sorted by score descending within each group.
pub fn render_markdown(report: &FlaggedReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Flagged Security Report\n");
    let _ = writeln!(out, "Threshold: {:.1} | Models: {}\n", report.threshold, report.model_ids.join(", "));

    let mut sections: [(&str, Vec<&FlaggedFinding>); 2] = [
        ("Flagged vulnerable — for expert review", Vec::new()),
        ("Flagged as false positives — ignorable under conservative analysis", Vec::new()),
    ];
    for finding in &report.findings {
        match finding.flag {
            Flag::FlaggedVulnerable => sections[0].1.push(finding),
            Flag::FlaggedFalsePositive => sections[1].1.push(finding),
        }
    }

    for (title, items) in &sections {
        let _ = writeln!(out, "## {title}\n");
        if items.is_empty() {
            let _ = writeln!(out, "**No findings in this section.**\n");
            continue;
        }
        let mut by_category: BTreeMap<&str, Vec<&FlaggedFinding>> = BTreeMap::new();
        for item in items {
            by_category.entry(&item.category).or_default().push(item);
        }
        for (category, mut group) in by_category {
            group.sort_by(|a, b| {
                b.score
                    .unwrap_or(f64::MAX)
                    .partial_cmp(&a.score.unwrap_or(f64::MAX))
                    .unwrap()
                    .then(a.finding_id.cmp(&b.finding_id))
            });
            let _ = writeln!(out, "### {category}\n");
            for item in group {
                let score = item
                    .score
                    .map(|s| format!("{s:.2}"))
                    .unwrap_or_else(|| format!("failed: {}", item.failure_reason.as_deref().unwrap_or("?")));
                let _ = writeln!(
                    out,
                    "- `{}:{}` (CWE-{}, {}) — score {score} — id `{}`",
                    item.file_path, item.line, item.cwe_id, item.tool, item.finding_id
                );
                if let Some(explanation) = &item.explanation_excerpt {
                    let _ = writeln!(out, "  - {explanation}");
                }
            }
            let _ = writeln!(out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AggregationRule;
    use crate::model::ScoreSet;

    fn finding(id: &str, category: &str) -> Finding {
        Finding {
            id: id.into(),
            tool: "SpotBugs".into(),
            category: category.into(),
            cwe_id: 79,
            file_path: format!("src/{id}.java"),
            line: 5,
            method_name: None,
            risk_type: None,
            source_text: None,
            language_tag: None,
            unassessable: None,
            needs_review: false,
        }
    }

    fn score_set(id: &str, aggregate: f64) -> AssessmentLine {
        AssessmentLine::ScoreSet(ScoreSet {
            finding_id: id.into(),
            model_id: "m".into(),
            scores: vec![aggregate],
            aggregate,
            aggregation_rule: AggregationRule::Mean,
            partial: false,
        })
    }

    #[test]
    fn partitions_by_threshold() {
        let report = SecurityReport::new(vec![finding("a", "xss"), finding("b", "xss")]);
        let flagged = build_flagged_report(
            &report,
            &[score_set("a", 7.0), score_set("b", 2.0)],
            6.0,
            &AssessmentConfig::default(),
        )
        .unwrap();
        let a = flagged.findings.iter().find(|f| f.finding_id == "a").unwrap();
        let b = flagged.findings.iter().find(|f| f.finding_id == "b").unwrap();
        assert_eq!(a.flag, Flag::FlaggedVulnerable);
        assert_eq!(b.flag, Flag::FlaggedFalsePositive);
    }

    #[test]
    fn markdown_and_json_agree_on_flags() {
        let report = SecurityReport::new(vec![finding("a", "xss"), finding("b", "sqli")]);
        let flagged = build_flagged_report(
            &report,
            &[score_set("a", 9.0), score_set("b", 0.0)],
            6.0,
            &AssessmentConfig::default(),
        )
        .unwrap();
        let markdown = render_markdown(&flagged);
        let review = markdown.find("for expert review").unwrap();
        let ignorable = markdown.find("ignorable under conservative").unwrap();
        let a_at = markdown.find("id `a`").unwrap();
        let b_at = markdown.find("id `b`").unwrap();
        assert!(review < a_at && a_at < ignorable);
        assert!(ignorable < b_at);
    }

    #[test]
    fn empty_review_section_gets_banner() {
        let report = SecurityReport::new(vec![finding("a", "xss")]);
        let flagged =
            build_flagged_report(&report, &[score_set("a", 0.0)], 6.0, &AssessmentConfig::default())
                .unwrap();
        let markdown = render_markdown(&flagged);
        let review_start = markdown.find("for expert review").unwrap();
        let banner = markdown.find("**No findings in this section.**").unwrap();
        assert!(banner > review_start);
    }

    #[test]
    fn failed_assessment_defaults_to_review_side() {
        let report = SecurityReport::new(vec![finding("a", "xss")]);
        let failure = AssessmentLine::Failure {
            finding_id: "a".into(),
            model_id: "m".into(),
            reason: "missing-source".into(),
        };
        let flagged =
            build_flagged_report(&report, &[failure], 6.0, &AssessmentConfig::default()).unwrap();
        assert_eq!(flagged.findings[0].flag, Flag::FlaggedVulnerable);
        assert_eq!(flagged.findings[0].failure_reason.as_deref(), Some("missing-source"));
    }
}
