//! Few-shot Chain-of-Thought prompt rendering.
//!
//! Templates are plain text files with named sections: `[system]`,
//! `[example.N.context]` / `[example.N.reasoning]` / `[example.N.decision]`,
//! and `[body]`. The body must contain exactly one `{context_items}`
//! placeholder; a `{tool}` placeholder is filled from the finding's tool
//! name so the same body serves every scanner.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Finding;

pub const DEFAULT_TOKEN_BUDGET: u32 = 8192;

/// The shipped 3-shot CoT template (one genuine weakness, one false
/// positive, one uncertain case).
pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/cot3.prompt");

const CONTEXT_PLACEHOLDER: &str = "{context_items}";
const TOOL_PLACEHOLDER: &str = "{tool}";
const ELISION_MARKER: &str = "[... source elided ...]";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("finding {0} is unassessable: no source text attached")]
    Unassessable(String),
    #[error("prompt-too-large: {estimated} tokens estimated, budget {budget}")]
    TooLarge { estimated: u32, budget: u32 },
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub context: String,
    pub reasoning: String,
    pub decision: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_message: String,
    pub fewshot_examples: Vec<FewShotExample>,
    pub body_template: String,
}

impl PromptTemplate {
    /// Parses the named-section template format.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let trimmed = line.trim_end();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && !trimmed.contains(' ') {
                sections.push((trimmed[1..trimmed.len() - 1].to_string(), String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push_str(line);
                body.push('\n');
            } else if !line.trim().is_empty() {
                return Err(PromptError::Template(format!(
                    "content before first section header: {line:?}"
                )));
            }
        }

        let get = |name: &str| -> Option<String> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, body)| body.trim_end().to_string())
        };
        let system_message = get("system")
            .ok_or_else(|| PromptError::Template("missing [system] section".into()))?;
        let body_template = get("body")
            .ok_or_else(|| PromptError::Template("missing [body] section".into()))?;
        if body_template.matches(CONTEXT_PLACEHOLDER).count() != 1 {
            return Err(PromptError::Template(format!(
                "[body] must contain exactly one {CONTEXT_PLACEHOLDER} placeholder"
            )));
        }

        let mut fewshot_examples = Vec::new();
        for i in 1.. {
            let (Some(context), Some(reasoning), Some(decision)) = (
                get(&format!("example.{i}.context")),
                get(&format!("example.{i}.reasoning")),
                get(&format!("example.{i}.decision")),
            ) else {
                break;
            };
            fewshot_examples.push(FewShotExample { context, reasoning, decision });
        }
        Ok(PromptTemplate { system_message, fewshot_examples, body_template })
    }

    pub fn default_3shot() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("shipped template is valid")
    }

    /// Same template with the example list cut to `shots` entries.
    pub fn with_shots(mut self, shots: usize) -> Self {
        self.fewshot_examples.truncate(shots);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub finding_id: String,
    pub system_message: String,
    pub user_message: String,
    pub estimated_tokens: u32,
    pub fingerprint: String,
}

/// How to handle prompts whose source file blows the token budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverBudget {
    /// Fail with `prompt-too-large` (the default: silently shortening the
    /// source changes what the model sees).
    Error,
    /// Keep a window of +-`window_lines` around the reported line, with
    /// explicit elision markers.
    Truncate { window_lines: u32 },
}

/// Conservative deterministic upper bound: ceil(bytes / 3).
pub fn estimate_tokens(text: &str) -> u32 {
    (text.len() as u32).div_ceil(3)
}

/// The six context items, in the order the scanner supplies them; absent
/// optional fields are rendered as "unknown".
pub fn build_context_block(finding: &Finding) -> Result<String, PromptError> {
    build_context_block_with(finding, finding.source_text.as_deref())
}

fn build_context_block_with(finding: &Finding, source: Option<&str>) -> Result<String, PromptError> {
    let source = source
        .filter(|s| !s.is_empty())
        .ok_or_else(|| PromptError::Unassessable(finding.id.clone()))?;
    Ok(format!(
        "\nweakness category: {}\nCWE-ID: {}\nmethod name: {}\nline of code: {}\nsecurity risk type: {}\ncomplete source code file:\n{}",
        finding.category,
        finding.cwe_id,
        finding.method_name.as_deref().unwrap_or("unknown"),
        finding.line,
        finding.risk_type.as_deref().unwrap_or("unknown"),
        source,
    ))
}

/// Renders the full user message: few-shot examples first, then the body
/// with the context block substituted. Deterministic; the fingerprint hashes
/// (system_message, user_message).
pub fn render_prompt(
    finding: &Finding,
    template: &PromptTemplate,
    budget: u32,
    over_budget: OverBudget,
) -> Result<RenderedPrompt, PromptError> {
    let full = render_with_source(finding, template, finding.source_text.as_deref())?;
    let estimated = estimate_tokens(&full) + estimate_tokens(&template.system_message);
    if estimated <= budget {
        return Ok(finish(finding, template, full, estimated));
    }
    match over_budget {
        OverBudget::Error => Err(PromptError::TooLarge { estimated, budget }),
        OverBudget::Truncate { window_lines } => {
            let source = finding
                .source_text
                .as_deref()
                .ok_or_else(|| PromptError::Unassessable(finding.id.clone()))?;
            let windowed = window_source(source, finding.line, window_lines);
            let truncated = render_with_source(finding, template, Some(&windowed))?;
            let estimated = estimate_tokens(&truncated) + estimate_tokens(&template.system_message);
            if estimated > budget {
                return Err(PromptError::TooLarge { estimated, budget });
            }
            Ok(finish(finding, template, truncated, estimated))
        }
    }
}

fn render_with_source(
    finding: &Finding,
    template: &PromptTemplate,
    source: Option<&str>,
) -> Result<String, PromptError> {
    let context = build_context_block_with(finding, source)?;
    let mut out = String::new();
    for example in &template.fewshot_examples {
        out.push_str(&format!(
            "Vulnerability identified by the security scanner and contextual information: {}\nExplanation: {} Decision: {}\n\n",
            example.context, example.reasoning, example.decision
        ));
    }
    out.push_str(
        &template
            .body_template
            .replace(TOOL_PLACEHOLDER, &finding.tool)
            .replace(CONTEXT_PLACEHOLDER, &context),
    );
    Ok(out)
}

fn finish(
    finding: &Finding,
    template: &PromptTemplate,
    user_message: String,
    estimated_tokens: u32,
) -> RenderedPrompt {
    let mut hasher = Sha256::new();
    hasher.update(template.system_message.as_bytes());
    hasher.update([0u8]);
    hasher.update(user_message.as_bytes());
    RenderedPrompt {
        finding_id: finding.id.clone(),
        system_message: template.system_message.clone(),
        user_message,
        estimated_tokens,
        fingerprint: hex::encode(hasher.finalize()),
    }
}

/// Lines [line - window, line + window] of the file, 1-based, with elision
/// markers where text was dropped. Always contains the reported line.
fn window_source(source: &str, line: u32, window: u32) -> String {
    let lines: Vec<&str> = source.lines().collect();
    let center = (line.max(1) as usize - 1).min(lines.len().saturating_sub(1));
    let start = center.saturating_sub(window as usize);
    let end = (center + window as usize + 1).min(lines.len());
    let mut out = String::new();
    if start > 0 {
        out.push_str(ELISION_MARKER);
        out.push('\n');
    }
    out.push_str(&lines[start..end].join("\n"));
    if end < lines.len() {
        out.push('\n');
        out.push_str(ELISION_MARKER);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finding(source: Option<&str>) -> Finding {
        Finding {
            id: "f1".into(),
            tool: "SpotBugs".into(),
            category: "XSS_SERVLET".into(),
            cwe_id: 79,
            file_path: "a/B.java".into(),
            line: 3,
            method_name: Some("doPost".into()),
            risk_type: Some("reflected XSS".into()),
            source_text: source.map(String::from),
            language_tag: None,
            unassessable: None,
            needs_review: false,
        }
    }

    #[test]
    fn default_template_has_three_examples() {
        let template = PromptTemplate::default_3shot();
        assert_eq!(template.fewshot_examples.len(), 3);
        assert_eq!(
            template.system_message,
            "You are a software security expert. Your main task is to analyze potential software vulnerabilities."
        );
    }

    #[test]
    fn context_block_lists_six_items_in_order() {
        let block = build_context_block(&finding(Some("class B {}"))).unwrap();
        let positions: Vec<usize> = [
            "weakness category: XSS_SERVLET",
            "CWE-ID: 79",
            "method name: doPost",
            "line of code: 3",
            "security risk type: reflected XSS",
            "complete source code file:\nclass B {}",
        ]
        .iter()
        .map(|needle| block.find(needle).expect(needle))
        .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn absent_optional_fields_render_unknown() {
        let mut f = finding(Some("x"));
        f.method_name = None;
        f.risk_type = None;
        let block = build_context_block(&f).unwrap();
        assert!(block.contains("method name: unknown"));
        assert!(block.contains("security risk type: unknown"));
    }

    #[test]
    fn missing_source_is_unassessable() {
        assert!(matches!(
            build_context_block(&finding(None)),
            Err(PromptError::Unassessable(_))
        ));
    }

    #[test]
    fn rendered_prompt_contains_examples_then_body() {
        let template = PromptTemplate::default_3shot();
        let prompt =
            render_prompt(&finding(Some("class B {}")), &template, DEFAULT_TOKEN_BUDGET, OverBudget::Error)
                .unwrap();
        assert!(prompt.user_message.contains("Decision: 10.0"));
        assert!(prompt
            .user_message
            .contains("Return a number for your decision ranging from \"0.0\" to \"10.0\""));
        assert!(prompt.user_message.contains("security scanner \"SpotBugs\""));
        // Examples come before the body.
        let body_at = prompt.user_message.find("Analyze the following").unwrap();
        let example_at = prompt.user_message.find("Decision: 10.0").unwrap();
        assert!(example_at < body_at);
    }

    #[test]
    fn zero_shot_renders_body_only() {
        let template = PromptTemplate::default_3shot().with_shots(0);
        let prompt =
            render_prompt(&finding(Some("class B {}")), &template, DEFAULT_TOKEN_BUDGET, OverBudget::Error)
                .unwrap();
        assert!(prompt.user_message.starts_with("Analyze the following"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let template = PromptTemplate::default_3shot();
        let a = render_prompt(&finding(Some("x")), &template, 8192, OverBudget::Error).unwrap();
        let b = render_prompt(&finding(Some("x")), &template, 8192, OverBudget::Error).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
    }

    #[test]
    fn over_budget_defaults_to_error() {
        let template = PromptTemplate::default_3shot();
        let big = "x".repeat(100_000);
        let err = render_prompt(&finding(Some(&big)), &template, 8192, OverBudget::Error).unwrap_err();
        assert!(matches!(err, PromptError::TooLarge { .. }));
    }

    #[test]
    fn truncation_keeps_reported_line_with_elision_markers() {
        let template = PromptTemplate::default_3shot().with_shots(0);
        let source: String = (1..=4000).map(|i| format!("line {i}\n")).collect();
        let mut f = finding(Some(&source));
        f.line = 2000;
        let prompt = render_prompt(&f, &template, 8192, OverBudget::Truncate { window_lines: 80 }).unwrap();
        assert!(prompt.user_message.contains("line 2000"));
        assert!(prompt.user_message.contains("line 1920"));
        assert!(prompt.user_message.contains("line 2080"));
        assert!(!prompt.user_message.contains("line 1919\n"));
        assert_eq!(prompt.user_message.matches(ELISION_MARKER).count(), 2);
        assert!(prompt.estimated_tokens <= 8192);
    }

    #[test]
    fn token_estimator_is_ceil_bytes_over_three() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens(&"a".repeat(300)), 100);
        assert_eq!(estimate_tokens(&"a".repeat(301)), 101);
    }
}
