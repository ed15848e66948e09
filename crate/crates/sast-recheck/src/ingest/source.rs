//! Source file attachment.

use std::path::{Component, Path, PathBuf};

use super::IngestError;
use crate::model::SecurityReport;

/// Directory against which `Finding.file_path` is resolved. Resolved paths
/// never escape the root.
#[derive(Debug, Clone)]
pub struct SourceRoot {
    root_path: PathBuf,
}

impl SourceRoot {
    pub fn new(root_path: impl Into<PathBuf>) -> Self {
        SourceRoot { root_path: root_path.into() }
    }

    /// Rejects absolute paths and any path whose components would step above
    /// the root. Checked lexically so nonexistent files still resolve (the
    /// caller distinguishes traversal from missing-file).
    pub fn resolve(&self, relative: &str) -> Result<PathBuf, IngestError> {
        let rel = Path::new(relative);
        if rel.is_absolute() {
            return Err(IngestError::PathTraversal(relative.into()));
        }
        let mut depth: i64 = 0;
        for component in rel.components() {
            match component {
                Component::ParentDir => {
                    depth -= 1;
                    if depth < 0 {
                        return Err(IngestError::PathTraversal(relative.into()));
                    }
                }
                Component::Normal(_) => depth += 1,
                Component::CurDir => {}
                _ => return Err(IngestError::PathTraversal(relative.into())),
            }
        }
        Ok(self.root_path.join(rel))
    }
}

/// Populates each finding's `source_text` with the full file contents.
/// Missing files mark the finding unassessable ("missing-source"); files
/// that are not valid UTF-8 get a distinct reason ("unreadable-encoding").
/// Traversal attempts are hard errors.
pub fn attach_source(report: &mut SecurityReport, root: &SourceRoot) -> Result<(), IngestError> {
    for finding in &mut report.findings {
        let path = root.resolve(&finding.file_path)?;
        match std::fs::read(&path) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(text) if !text.is_empty() => {
                    finding.source_text = Some(text);
                    finding.unassessable = None;
                }
                Ok(_) => finding.unassessable = Some("missing-source".into()),
                Err(_) => finding.unassessable = Some("unreadable-encoding".into()),
            },
            Err(_) => finding.unassessable = Some("missing-source".into()),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Finding;

    fn finding(path: &str) -> Finding {
        Finding {
            id: path.into(),
            tool: "T".into(),
            category: "C".into(),
            cwe_id: 79,
            file_path: path.into(),
            line: 1,
            method_name: None,
            risk_type: None,
            source_text: None,
            language_tag: None,
            unassessable: None,
            needs_review: false,
        }
    }

    #[test]
    fn attaches_full_file_contents() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("src")).unwrap();
        std::fs::write(dir.path().join("src/A.java"), "class A {}\n").unwrap();
        let mut report = SecurityReport::new(vec![finding("src/A.java")]);
        attach_source(&mut report, &SourceRoot::new(dir.path())).unwrap();
        assert_eq!(report.findings[0].source_text.as_deref(), Some("class A {}\n"));
        assert!(report.findings[0].is_assessable());
    }

    #[test]
    fn missing_file_marks_unassessable() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = SecurityReport::new(vec![finding("src/Gone.java")]);
        attach_source(&mut report, &SourceRoot::new(dir.path())).unwrap();
        assert_eq!(report.findings[0].unassessable.as_deref(), Some("missing-source"));
    }

    #[test]
    fn non_utf8_file_gets_distinct_reason() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bin.dat"), [0xff, 0xfe, 0x00, 0x80]).unwrap();
        let mut report = SecurityReport::new(vec![finding("bin.dat")]);
        attach_source(&mut report, &SourceRoot::new(dir.path())).unwrap();
        assert_eq!(report.findings[0].unassessable.as_deref(), Some("unreadable-encoding"));
    }

    #[test]
    fn traversal_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = SecurityReport::new(vec![finding("../../etc/passwd")]);
        let err = attach_source(&mut report, &SourceRoot::new(dir.path())).unwrap_err();
        assert!(matches!(err, IngestError::PathTraversal(_)));
    }

    #[test]
    fn internal_parent_components_within_root_are_fine() {
        let root = SourceRoot::new("/repo");
        assert!(root.resolve("src/../src/A.java").is_ok());
        assert!(root.resolve("src/../../A.java").is_err());
        assert!(root.resolve("/etc/passwd").is_err());
    }
}
