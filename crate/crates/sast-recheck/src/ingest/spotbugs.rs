//! SpotBugs BugCollection XML parser (FindSecBugs output).

use chrono::{DateTime, Utc};
use log::warn;

use super::IngestError;
use crate::model::{Finding, SecurityReport};

/// Parses a SpotBugs `BugCollection` document into a canonical report.
///
/// One `Finding` per `BugInstance`: category from the bug type, CWE from the
/// `cweid` attribute, file/line/method from the primary `SourceLine` and
/// `Method` elements. Instances without a CWE attribute get cwe_id 0 and are
/// flagged for review; instances missing mandatory elements are skipped and
/// counted.
pub fn parse_spotbugs_xml(document: &[u8]) -> Result<SecurityReport, IngestError> {
    let text = std::str::from_utf8(document)
        .map_err(|_| IngestError::Schema { line: 0, message: "document is not UTF-8".into() })?;
    let doc = roxmltree::Document::parse(text)
        .map_err(|e| IngestError::Xml(e.pos()))?;
    let root = doc.root_element();

    let mut report = SecurityReport::new(Vec::new());
    // Taken from the document so ingest is a pure function of its input.
    report.generated_at = root
        .attribute("analysisTimestamp")
        .or_else(|| root.attribute("timestamp"))
        .and_then(|t| t.parse::<i64>().ok())
        .and_then(DateTime::<Utc>::from_timestamp_millis)
        .unwrap_or_default();
    if let Some(version) = root.attribute("version") {
        report.tool_versions.insert("SpotBugs".into(), version.into());
    }

    for instance in root.children().filter(|n| n.has_tag_name("BugInstance")) {
        let Some(bug_type) = instance.attribute("type") else {
            warn!("BugInstance without type attribute skipped");
            report.skipped += 1;
            continue;
        };
        let (cwe_id, needs_review) = match instance.attribute("cweid") {
            Some(raw) => match raw.parse::<u32>() {
                Ok(id) => (id, false),
                Err(_) => (0, true),
            },
            None => (0, true),
        };
        // The primary source line is the first SourceLine that is a direct
        // child of the instance (SpotBugs nests others under Method/Class).
        let Some(source_line) = instance.children().find(|n| n.has_tag_name("SourceLine")) else {
            warn!("BugInstance {bug_type} without SourceLine skipped");
            report.skipped += 1;
            continue;
        };
        let file_path = source_line
            .attribute("sourcepath")
            .or_else(|| source_line.attribute("sourcefile"))
            .unwrap_or_default()
            .to_string();
        if file_path.is_empty() {
            warn!("BugInstance {bug_type} without source path skipped");
            report.skipped += 1;
            continue;
        }
        let line = source_line
            .attribute("start")
            .and_then(|s| s.parse::<u32>().ok())
            .unwrap_or(1)
            .max(1);
        let method_name = instance
            .children()
            .find(|n| n.has_tag_name("Method"))
            .and_then(|m| m.attribute("name"))
            .map(str::to_string);
        let risk_type = instance
            .children()
            .find(|n| n.has_tag_name("ShortMessage"))
            .and_then(|n| n.text())
            .map(str::to_string)
            .or_else(|| instance.attribute("category").map(str::to_string));

        let id = Finding::synthesize_id("SpotBugs", &file_path, line, bug_type, cwe_id);
        report.findings.push(Finding {
            id,
            tool: "SpotBugs".into(),
            category: bug_type.into(),
            cwe_id,
            file_path,
            line,
            method_name,
            risk_type,
            source_text: None,
            language_tag: Some("java".into()),
            unassessable: None,
            needs_review,
        });
    }
    Ok(report)
}
