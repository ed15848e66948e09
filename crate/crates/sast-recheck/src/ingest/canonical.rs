//! Canonical findings JSONL: the escape hatch for tools without a dedicated
//! parser, and the interchange format between pipeline stages.
//!
//! The first line is a header object carrying `schema_version`, tool
//! versions and the generation timestamp; every following line is one
//! `Finding`. A document without a header line is also accepted.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::model::{Finding, SecurityReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    #[serde(default)]
    tool_versions: BTreeMap<String, String>,
    generated_at: DateTime<Utc>,
    #[serde(default)]
    skipped: u32,
}

pub fn emit_canonical_jsonl<W: Write>(report: &SecurityReport, mut out: W) -> Result<(), IngestError> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        tool_versions: report.tool_versions.clone(),
        generated_at: report.generated_at,
        skipped: report.skipped,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for finding in &report.findings {
        serde_json::to_writer(&mut out, finding)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_canonical_jsonl(document: &[u8]) -> Result<SecurityReport, IngestError> {
    let mut report = SecurityReport::new(Vec::new());
    let mut first = true;
    for (idx, line) in document.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            if let Ok(header) = serde_json::from_str::<Header>(&line) {
                report.tool_versions = header.tool_versions;
                report.generated_at = header.generated_at;
                report.skipped = header.skipped;
                continue;
            }
        }
        let finding: Finding = serde_json::from_str(&line).map_err(|e| IngestError::Schema {
            line: idx + 1,
            message: schema_message(&line, &e),
        })?;
        if finding.line < 1 || finding.id.is_empty() {
            return Err(IngestError::Schema {
                line: idx + 1,
                message: "finding violates model invariants (empty id or line < 1)".into(),
            });
        }
        report.findings.push(finding);
    }
    Ok(report)
}

/// serde's "missing field" message does not say which line; name the field
/// explicitly so the error is actionable.
fn schema_message(line: &str, err: &serde_json::Error) -> String {
    for field in ["id", "tool", "category", "cwe_id", "file_path", "line"] {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(line) {
            if value.get(field).is_none() {
                return format!("missing required field \"{field}\"");
            }
        }
    }
    err.to_string()
}
