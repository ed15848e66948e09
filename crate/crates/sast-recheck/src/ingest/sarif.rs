//! SARIF 2.1.0 parser.

use std::collections::HashMap;

use chrono::Utc;
use log::warn;
use serde::Deserialize;

use super::IngestError;
use crate::model::{Finding, SecurityReport};

#[derive(Debug, Deserialize)]
struct SarifLog {
    runs: Vec<SarifRun>,
}

#[derive(Debug, Deserialize)]
struct SarifRun {
    tool: SarifTool,
    #[serde(default)]
    results: Vec<SarifResult>,
}

#[derive(Debug, Deserialize)]
struct SarifTool {
    driver: SarifDriver,
}

#[derive(Debug, Deserialize)]
struct SarifDriver {
    name: String,
    #[serde(default)]
    version: Option<String>,
    #[serde(default)]
    rules: Vec<SarifRule>,
}

#[derive(Debug, Deserialize)]
struct SarifRule {
    id: String,
    #[serde(default)]
    properties: Option<RuleProperties>,
    #[serde(default, rename = "relationships")]
    relationships: Vec<RuleRelationship>,
}

#[derive(Debug, Deserialize)]
struct RuleProperties {
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RuleRelationship {
    target: RelationshipTarget,
}

#[derive(Debug, Deserialize)]
struct RelationshipTarget {
    id: String,
}

#[derive(Debug, Deserialize)]
struct SarifResult {
    #[serde(rename = "ruleId")]
    rule_id: Option<String>,
    #[serde(default)]
    message: Option<SarifMessage>,
    #[serde(default)]
    locations: Vec<SarifLocation>,
    #[serde(default)]
    taxa: Vec<RelationshipTarget>,
}

#[derive(Debug, Deserialize)]
struct SarifMessage {
    #[serde(default)]
    text: Option<String>,
}

#[derive(Debug, Deserialize)]
struct SarifLocation {
    #[serde(rename = "physicalLocation")]
    physical_location: Option<PhysicalLocation>,
    #[serde(rename = "logicalLocations", default)]
    logical_locations: Vec<LogicalLocation>,
}

#[derive(Debug, Deserialize)]
struct PhysicalLocation {
    #[serde(rename = "artifactLocation")]
    artifact_location: Option<ArtifactLocation>,
    region: Option<Region>,
}

#[derive(Debug, Deserialize)]
struct ArtifactLocation {
    uri: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Region {
    #[serde(rename = "startLine")]
    start_line: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct LogicalLocation {
    #[serde(rename = "fullyQualifiedName")]
    fully_qualified_name: Option<String>,
}

/// Extracts a CWE number from strings like "external/cwe/cwe-079" or "CWE-79".
fn cwe_from_tag(tag: &str) -> Option<u32> {
    let lower = tag.to_ascii_lowercase();
    let idx = lower.rfind("cwe-")?;
    let digits: String = lower[idx + 4..].chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// Parses a SARIF 2.1.0 document: one `Finding` per result, CWE extracted
/// from rule tags or result taxa, tool name from each run's driver. Results
/// without a physical location are skipped with a warning.
pub fn parse_sarif(document: &[u8]) -> Result<SecurityReport, IngestError> {
    let log: SarifLog = serde_json::from_slice(document)?;
    if log.runs.is_empty() {
        return Err(IngestError::SarifShape);
    }

    let mut report = SecurityReport::new(Vec::new());
    // SARIF has no mandatory run timestamp; pin to the epoch so ingest is a
    // pure function of its input.
    report.generated_at = chrono::DateTime::<Utc>::default();

    for run in &log.runs {
        let tool = run.tool.driver.name.clone();
        if let Some(version) = &run.tool.driver.version {
            report.tool_versions.insert(tool.clone(), version.clone());
        }
        let rule_cwes: HashMap<&str, u32> = run
            .tool
            .driver
            .rules
            .iter()
            .filter_map(|rule| {
                rule.properties
                    .iter()
                    .flat_map(|p| &p.tags)
                    .filter_map(|t| cwe_from_tag(t))
                    .chain(rule.relationships.iter().filter_map(|r| cwe_from_tag(&r.target.id)))
                    .next()
                    .map(|cwe| (rule.id.as_str(), cwe))
            })
            .collect();

        for result in &run.results {
            let category = result.rule_id.clone().unwrap_or_else(|| "unknown-rule".into());
            let physical = result
                .locations
                .first()
                .and_then(|l| l.physical_location.as_ref());
            let Some(uri) = physical
                .and_then(|p| p.artifact_location.as_ref())
                .and_then(|a| a.uri.clone())
            else {
                warn!("SARIF result {category} without physical location skipped");
                report.skipped += 1;
                continue;
            };
            let line = physical
                .and_then(|p| p.region.as_ref())
                .and_then(|r| r.start_line)
                .unwrap_or(1)
                .max(1);
            let cwe_id = result
                .taxa
                .iter()
                .filter_map(|t| cwe_from_tag(&t.id))
                .next()
                .or_else(|| rule_cwes.get(category.as_str()).copied())
                .unwrap_or(0);
            let method_name = result
                .locations
                .first()
                .and_then(|l| l.logical_locations.first())
                .and_then(|l| l.fully_qualified_name.clone());
            let risk_type = result.message.as_ref().and_then(|m| m.text.clone());

            let id = Finding::synthesize_id(&tool, &uri, line, &category, cwe_id);
            report.findings.push(Finding {
                id,
                tool: tool.clone(),
                category,
                needs_review: cwe_id == 0,
                cwe_id,
                file_path: uri,
                line,
                method_name,
                risk_type,
                source_text: None,
                language_tag: None,
                unassessable: None,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = include_str!("../../tests/fixtures/report.sarif");

    #[test]
    fn extracts_cwe_from_rule_tags() {
        let report = parse_sarif(FIXTURE.as_bytes()).unwrap();
        let xss = report.findings.iter().find(|f| f.category == "js/xss").unwrap();
        assert_eq!(xss.cwe_id, 79);
        assert_eq!(xss.file_path, "a.ts");
        assert_eq!(xss.line, 10);
    }

    #[test]
    fn two_runs_carry_distinct_tool_names() {
        let report = parse_sarif(FIXTURE.as_bytes()).unwrap();
        let tools: std::collections::BTreeSet<&str> =
            report.findings.iter().map(|f| f.tool.as_str()).collect();
        assert!(tools.contains("CodeQL"));
        assert!(tools.contains("Semgrep"));
    }

    #[test]
    fn zero_results_is_an_empty_report() {
        let doc = r#"{"version":"2.1.0","runs":[{"tool":{"driver":{"name":"CodeQL"}},"results":[]}]}"#;
        let report = parse_sarif(doc.as_bytes()).unwrap();
        assert!(report.findings.is_empty());
    }

    #[test]
    fn missing_runs_is_an_error() {
        assert!(parse_sarif(br#"{"version":"2.1.0","runs":[]}"#).is_err());
        assert!(parse_sarif(br#"{"version":"2.1.0"}"#).is_err());
    }

    #[test]
    fn result_without_location_is_skipped() {
        let doc = r#"{"runs":[{"tool":{"driver":{"name":"T"}},"results":[{"ruleId":"r1"}]}]}"#;
        let report = parse_sarif(doc.as_bytes()).unwrap();
        assert!(report.findings.is_empty());
        assert_eq!(report.skipped, 1);
    }

    #[test]
    fn cwe_tag_variants() {
        assert_eq!(cwe_from_tag("external/cwe/cwe-079"), Some(79));
        assert_eq!(cwe_from_tag("CWE-502"), Some(502));
        assert_eq!(cwe_from_tag("security"), None);
    }
}
