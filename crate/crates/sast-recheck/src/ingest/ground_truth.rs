//! Ground-truth label loading and key matching.

use std::collections::HashMap;

use log::warn;
use serde::Deserialize;

use super::IngestError;
use crate::model::{GroundTruthLabel, SecurityReport};

/// Labels matched to the report, plus bookkeeping about what didn't match.
#[derive(Debug, Default)]
pub struct GroundTruthResult {
    pub labels: Vec<GroundTruthLabel>,
    /// Keys from the label file that resolved to no finding.
    pub unmatched_keys: Vec<String>,
    /// Findings in the report that received no label.
    pub uncovered: usize,
}

#[derive(Debug, Deserialize)]
struct JsonLabel {
    #[serde(alias = "key", alias = "name")]
    finding_id: String,
    #[serde(alias = "real")]
    is_real: bool,
}

/// Loads labels from CSV (`name,category,real,cwe` header tolerated) or
/// JSONL and resolves keys against the report: exact finding id first, then
/// file-stem matching for OWASP-Benchmark-style expected-results files
/// (key "BenchmarkTest00001" labels every finding in that source file).
pub fn load_ground_truth(
    document: &[u8],
    report: &SecurityReport,
) -> Result<GroundTruthResult, IngestError> {
    let pairs = parse_pairs(document)?;

    // Stem index: file name without extension -> finding ids in that file.
    let mut by_stem: HashMap<String, Vec<&str>> = HashMap::new();
    for finding in &report.findings {
        let stem = std::path::Path::new(&finding.file_path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&finding.file_path);
        by_stem.entry(stem.to_string()).or_default().push(&finding.id);
    }

    let mut assigned: HashMap<String, bool> = HashMap::new();
    let mut unmatched_keys = Vec::new();
    for (key, is_real) in pairs {
        let ids: Vec<String> = if report.find(&key).is_some() {
            vec![key.clone()]
        } else if let Some(ids) = by_stem.get(key.as_str()) {
            ids.iter().map(|s| s.to_string()).collect()
        } else {
            unmatched_keys.push(key);
            continue;
        };
        for id in ids {
            match assigned.insert(id.clone(), is_real) {
                Some(previous) if previous != is_real => {
                    return Err(IngestError::ConflictingLabel(id));
                }
                _ => {}
            }
        }
    }

    let uncovered = report.findings.iter().filter(|f| !assigned.contains_key(&f.id)).count();
    if uncovered > 0 {
        warn!("{uncovered} findings in the report have no ground-truth label");
    }

    let labels = report
        .findings
        .iter()
        .filter_map(|f| {
            assigned
                .get(&f.id)
                .map(|&is_real| GroundTruthLabel { finding_id: f.id.clone(), is_real })
        })
        .collect();
    Ok(GroundTruthResult { labels, unmatched_keys, uncovered })
}

/// Raw (key, is_real) pairs from CSV or JSONL, before resolution.
fn parse_pairs(document: &[u8]) -> Result<Vec<(String, bool)>, IngestError> {
    let text = std::str::from_utf8(document)
        .map_err(|_| IngestError::LabelFormat("label file is not UTF-8".into()))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return parse_jsonl_pairs(text);
    }
    parse_csv_pairs(text)
}

fn parse_jsonl_pairs(text: &str) -> Result<Vec<(String, bool)>, IngestError> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let label: JsonLabel = serde_json::from_str(line).map_err(|e| {
            IngestError::LabelFormat(format!("line {}: {e}", idx + 1))
        })?;
        pairs.push((label.finding_id, label.is_real));
    }
    Ok(pairs)
}

fn parse_csv_pairs(text: &str) -> Result<Vec<(String, bool)>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut pairs = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| IngestError::LabelFormat(e.to_string()))?;
        if record.len() < 2 {
            return Err(IngestError::LabelFormat(format!(
                "row {}: expected at least (name, real) columns",
                idx + 1
            )));
        }
        let key = record[0].to_string();
        // OWASP expected-results columns: name, category, real, cwe.
        let real_col = if record.len() >= 3 { &record[2] } else { &record[1] };
        let Some(is_real) = parse_bool(real_col) else {
            if idx == 0 {
                continue; // header row
            }
            return Err(IngestError::LabelFormat(format!(
                "row {}: cannot parse \"{real_col}\" as boolean",
                idx + 1
            )));
        };
        pairs.push((key, is_real));
    }
    Ok(pairs)
}

fn parse_bool(value: &str) -> Option<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Finding;

    fn report() -> SecurityReport {
        let mk = |id: &str, path: &str| Finding {
            id: id.into(),
            tool: "SpotBugs".into(),
            category: "XSS_SERVLET".into(),
            cwe_id: 79,
            file_path: path.into(),
            line: 1,
            method_name: None,
            risk_type: None,
            source_text: None,
            language_tag: None,
            unassessable: None,
            needs_review: false,
        };
        SecurityReport::new(vec![
            mk("f1", "org/owasp/testcode/BenchmarkTest00001.java"),
            mk("f2", "org/owasp/testcode/BenchmarkTest00002.java"),
        ])
    }

    #[test]
    fn owasp_style_csv_matches_by_file_stem() {
        let csv = "# test name, category, real vulnerability, cwe\n\
                   BenchmarkTest00001,xss,TRUE,79\n\
                   BenchmarkTest00002,xss,FALSE,79\n";
        let result = load_ground_truth(csv.as_bytes(), &report()).unwrap();
        assert_eq!(result.labels.len(), 2);
        assert!(result.labels.iter().find(|l| l.finding_id == "f1").unwrap().is_real);
        assert!(!result.labels.iter().find(|l| l.finding_id == "f2").unwrap().is_real);
        assert!(result.unmatched_keys.is_empty());
        assert_eq!(result.uncovered, 0);
    }

    #[test]
    fn unmatched_key_is_listed_not_fatal() {
        let csv = "BenchmarkTest00001,xss,TRUE,79\nBenchmarkTest99999,xss,TRUE,79\n";
        let result = load_ground_truth(csv.as_bytes(), &report()).unwrap();
        assert_eq!(result.unmatched_keys, vec!["BenchmarkTest99999".to_string()]);
        assert_eq!(result.uncovered, 1);
    }

    #[test]
    fn conflicting_labels_are_an_error() {
        let jsonl = "{\"finding_id\":\"f1\",\"is_real\":true}\n{\"finding_id\":\"f1\",\"is_real\":false}\n";
        let err = load_ground_truth(jsonl.as_bytes(), &report()).unwrap_err();
        assert!(matches!(err, IngestError::ConflictingLabel(id) if id == "f1"));
    }

    #[test]
    fn jsonl_exact_id_match() {
        let jsonl = "{\"finding_id\":\"f2\",\"is_real\":false}\n";
        let result = load_ground_truth(jsonl.as_bytes(), &report()).unwrap();
        assert_eq!(result.labels, vec![GroundTruthLabel { finding_id: "f2".into(), is_real: false }]);
    }
}
