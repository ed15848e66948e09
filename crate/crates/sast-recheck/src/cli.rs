//! Command-line entry point: ingest, assess, calibrate, ensemble, report.
//!
//! Exit codes: 0 success, 2 configuration/usage, 3 parse, 4 transport,
//! 5 calibration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::assess::{
    assess_batch, read_assessment_jsonl, write_assessment_jsonl, AssessmentLine,
};
use crate::calibrate::{
    ensemble_union, labels_fingerprint_pairs, threshold_sweep, write_calibration_csv,
    CalibrationResult, EnsembleMember, LabeledScore, ThresholdGrid,
};
use crate::config::RunConfig;
use crate::gateway::{DeterministicMock, Gateway, HttpTransport, Mode, ModelEndpoint, Transport};
use crate::ingest::{
    attach_source, emit_canonical_jsonl, load_ground_truth, parse_canonical_jsonl, parse_sarif,
    parse_spotbugs_xml, SourceRoot,
};
use crate::model::{GroundTruthLabel, SecurityReport};
use crate::prompt::PromptTemplate;
use crate::report::{build_flagged_report, render_markdown};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;
pub const EXIT_CALIBRATION: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

fn config_err(message: impl std::fmt::Display) -> CliError {
    CliError { code: EXIT_CONFIG, message: message.to_string() }
}
fn parse_err(message: impl std::fmt::Display) -> CliError {
    CliError { code: EXIT_PARSE, message: message.to_string() }
}
fn transport_err(message: impl std::fmt::Display) -> CliError {
    CliError { code: EXIT_TRANSPORT, message: message.to_string() }
}
fn calibration_err(message: impl std::fmt::Display) -> CliError {
    CliError { code: EXIT_CALIBRATION, message: message.to_string() }
}

#[derive(Parser, Debug)]
#[command(name = "sast-recheck", version, about = "LLM re-assessment of SAST findings with conservative false-positive filtering")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Spotbugs,
    Sarif,
    Jsonl,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a SAST report into canonical findings JSONL.
    Ingest {
        /// Input report file.
        input: PathBuf,
        #[arg(long, value_enum)]
        format: InputFormat,
        /// Directory for resolving finding file paths; when given, source
        /// files are attached.
        #[arg(long)]
        source_root: Option<PathBuf>,
        /// Ground-truth labels (CSV or JSONL) to match and echo as JSONL.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run LLM assessments over canonical findings.
    Assess {
        /// Canonical findings JSONL.
        findings: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Model id; must match an endpoint in the config, or "mock" for the
        /// built-in deterministic mock.
        #[arg(long, default_value = "mock")]
        model: String,
        /// Self-consistency: n runs at the elevated temperature.
        #[arg(long)]
        self_consistency: bool,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        sc_runs: Option<u32>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        aggregation: Option<crate::model::AggregationRule>,
        /// Prompt template file (named-section format); default is the
        /// shipped 3-shot CoT template.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Sweep thresholds against ground truth and select the conservative one.
    Calibrate {
        /// Assessment JSONL from `assess`.
        assessments: PathBuf,
        /// Canonical findings JSONL (for categories).
        #[arg(long)]
        findings: PathBuf,
        /// Ground-truth labels (CSV or JSONL).
        #[arg(long)]
        labels: PathBuf,
        /// Output directory for calibration.json / calibration.csv.
        #[arg(short, long)]
        output: PathBuf,
        /// Comma-separated threshold grid override, e.g. "1,2,3".
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Merge the TN sets of conservatively calibrated models.
    Ensemble {
        /// calibration.json files, one per member model.
        #[arg(required = true)]
        calibrations: Vec<PathBuf>,
        #[arg(long)]
        findings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Emit the flagged security report (JSON + markdown).
    Report {
        /// Assessment JSONL from `assess`.
        assessments: PathBuf,
        #[arg(long)]
        findings: PathBuf,
        /// Decision threshold; alternatively take it from a calibration.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Output directory for flagged_report.json / flagged_report.md.
        #[arg(short, long)]
        output: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(config_err)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Ingest { input, format, source_root, labels, output } => {
            cmd_ingest(&input, format, source_root.as_deref(), labels.as_deref(), &output)
        }
        Command::Assess {
            findings,
            output,
            model,
            self_consistency,
            mode,
            cache_dir,
            sc_runs,
            shots,
            aggregation,
            template,
        } => {
            let mut config = config;
            if let Some(n) = sc_runs {
                config.assessment.sc_runs = n;
            }
            if let Some(s) = shots {
                config.assessment.shots = s;
            }
            if let Some(rule) = aggregation {
                config.assessment.aggregation_rule = rule;
            }
            if let Some(m) = mode {
                config.mode = m;
            }
            if let Some(dir) = cache_dir {
                config.cache_dir = Some(dir);
            }
            if let Some(path) = template {
                config.template_path = Some(path);
            }
            config.validate().map_err(config_err)?;
            cmd_assess(&findings, &output, &model, self_consistency, &config)
        }
        Command::Calibrate { assessments, findings, labels, output, grid, beta } => {
            let grid = resolve_grid(grid.as_deref(), &config)?;
            cmd_calibrate(
                &assessments,
                &findings,
                &labels,
                &output,
                &grid,
                beta.unwrap_or(config.beta),
            )
        }
        Command::Ensemble { calibrations, findings, labels, output, beta } => {
            cmd_ensemble(&calibrations, &findings, &labels, &output, beta.unwrap_or(config.beta))
        }
        Command::Report { assessments, findings, threshold, calibration, output } => {
            cmd_report(&assessments, &findings, threshold, calibration.as_deref(), &output, &config)
        }
    }
}

fn resolve_grid(flag: Option<&str>, config: &RunConfig) -> Result<ThresholdGrid, CliError> {
    let values = match flag {
        Some(text) => Some(
            text.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| config_err(format!("bad --grid value: {e}")))?,
        ),
        None => config.grid.clone(),
    };
    match values {
        Some(values) => ThresholdGrid::new(values).map_err(config_err),
        None => Ok(ThresholdGrid::default()),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| parse_err(format!("cannot read {}: {e}", path.display())))
}

fn load_findings(path: &Path) -> Result<SecurityReport, CliError> {
    parse_canonical_jsonl(&read_file(path)?).map_err(parse_err)
}

fn load_labels(path: &Path, report: &SecurityReport) -> Result<Vec<GroundTruthLabel>, CliError> {
    let result = load_ground_truth(&read_file(path)?, report).map_err(parse_err)?;
    if !result.unmatched_keys.is_empty() {
        eprintln!("warning: {} label keys matched no finding", result.unmatched_keys.len());
    }
    if result.uncovered > 0 {
        eprintln!("warning: {} findings have no ground-truth label", result.uncovered);
    }
    Ok(result.labels)
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| config_err(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, bytes).map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))
}

fn cmd_ingest(
    input: &Path,
    format: InputFormat,
    source_root: Option<&Path>,
    labels: Option<&Path>,
    output: &Path,
) -> Result<(), CliError> {
    let document = read_file(input)?;
    let mut report = match format {
        InputFormat::Spotbugs => parse_spotbugs_xml(&document).map_err(parse_err)?,
        InputFormat::Sarif => parse_sarif(&document).map_err(parse_err)?,
        InputFormat::Jsonl => parse_canonical_jsonl(&document).map_err(parse_err)?,
    };
    if let Some(root) = source_root {
        attach_source(&mut report, &SourceRoot::new(root)).map_err(parse_err)?;
    }
    let mut unmatched = 0usize;
    if let Some(labels_path) = labels {
        let result = load_ground_truth(&read_file(labels_path)?, &report).map_err(parse_err)?;
        unmatched = result.unmatched_keys.len();
        let mut out = Vec::new();
        for label in &result.labels {
            serde_json::to_writer(&mut out, label).map_err(parse_err)?;
            out.push(b'\n');
        }
        write_output(&output.with_extension("labels.jsonl"), &out)?;
    }
    let mut buffer = Vec::new();
    emit_canonical_jsonl(&report, &mut buffer).map_err(parse_err)?;
    write_output(output, &buffer)?;
    println!(
        "ingested {} findings ({} skipped, {} unmatched label keys) -> {}",
        report.findings.len(),
        report.skipped,
        unmatched,
        output.display()
    );
    Ok(())
}

fn gateway_for(endpoint: &ModelEndpoint, config: &RunConfig) -> Gateway {
    let transport: Box<dyn Transport> = if endpoint.is_mock() {
        Box::new(DeterministicMock)
    } else {
        Box::new(HttpTransport::new())
    };
    Gateway::new(transport, config.mode, config.cache_dir.clone())
}

fn cmd_assess(
    findings_path: &Path,
    output: &Path,
    model: &str,
    self_consistency: bool,
    config: &RunConfig,
) -> Result<(), CliError> {
    let report = load_findings(findings_path)?;
    let endpoint = match config.endpoint(model) {
        Some(endpoint) => endpoint.clone(),
        None if model == "mock" => ModelEndpoint::mock("mock"),
        None => return Err(config_err(format!("no endpoint configured for model {model}"))),
    };
    let template = match &config.template_path {
        Some(path) => PromptTemplate::parse(
            &fs::read_to_string(path)
                .map_err(|e| parse_err(format!("cannot read template {}: {e}", path.display())))?,
        )
        .map_err(parse_err)?,
        None => PromptTemplate::default_3shot(),
    }
    .with_shots(config.assessment.shots);

    let existing = match fs::read(output) {
        Ok(bytes) => read_assessment_jsonl(&bytes).map_err(parse_err)?,
        Err(_) => Vec::new(),
    };
    let gateway = gateway_for(&endpoint, config);
    let new_lines = assess_batch(
        &report.findings,
        &gateway,
        &endpoint,
        &template,
        &config.assessment,
        self_consistency,
        &existing,
    );
    info!("assessed {} findings ({} already present)", new_lines.len(), existing.len());

    let hard_failures = new_lines
        .iter()
        .filter(|l| matches!(l, AssessmentLine::Failure { reason, .. } if reason.starts_with("gateway")))
        .count();

    let mut all = existing;
    all.extend(new_lines);
    all.sort_by(|a, b| (a.finding_id(), a.model_id()).cmp(&(b.finding_id(), b.model_id())));
    let mut buffer = Vec::new();
    write_assessment_jsonl(&all, &mut buffer).map_err(|e| parse_err(e.to_string()))?;
    write_output(output, &buffer)?;
    println!("wrote {} assessment lines -> {}", all.len(), output.display());
    if hard_failures > 0 {
        return Err(transport_err(format!("{hard_failures} findings failed with transport errors")));
    }
    Ok(())
}

/// Joins assessment scores with labels and categories.
fn labeled_scores(
    report: &SecurityReport,
    assessments: &[AssessmentLine],
    labels: &[GroundTruthLabel],
) -> Vec<LabeledScore> {
    let label_of: BTreeMap<&str, bool> =
        labels.iter().map(|l| (l.finding_id.as_str(), l.is_real)).collect();
    let mut out = Vec::new();
    for line in assessments {
        let Some(score) = line.score() else { continue };
        let Some(&is_real) = label_of.get(line.finding_id()) else { continue };
        let Some(finding) = report.find(line.finding_id()) else { continue };
        out.push(LabeledScore {
            finding_id: finding.id.clone(),
            category: finding.category.clone(),
            score,
            is_real,
        });
    }
    out
}

fn cmd_calibrate(
    assessments_path: &Path,
    findings_path: &Path,
    labels_path: &Path,
    output: &Path,
    grid: &ThresholdGrid,
    beta: f64,
) -> Result<(), CliError> {
    let report = load_findings(findings_path)?;
    let assessments = read_assessment_jsonl(&read_file(assessments_path)?).map_err(parse_err)?;
    let labels = load_labels(labels_path, &report)?;
    if labels.is_empty() {
        return Err(calibration_err("calibration requires ground-truth labels"));
    }
    let model_id = assessments
        .first()
        .map(|l| l.model_id().to_string())
        .ok_or_else(|| calibration_err("assessment file is empty"))?;
    let data = labeled_scores(&report, &assessments, &labels);
    let result = threshold_sweep(&model_id, &data, grid, beta).map_err(calibration_err)?;

    fs::create_dir_all(output).map_err(config_err)?;
    let json = serde_json::to_vec_pretty(&result).map_err(parse_err)?;
    write_output(&output.join("calibration.json"), &json)?;
    let mut csv = Vec::new();
    write_calibration_csv(&result, &mut csv).map_err(|e| parse_err(e.to_string()))?;
    write_output(&output.join("calibration.csv"), &csv)?;

    match result.conservative_threshold {
        Some(threshold) => println!(
            "conservative threshold: {threshold} (tn = {} of {} SAST false positives)",
            result.tn_set_at_conservative.len(),
            data.iter().filter(|d| !d.is_real).count()
        ),
        None => println!("not conservative: every grid threshold misses a genuine weakness"),
    }
    Ok(())
}

fn cmd_ensemble(
    calibrations: &[PathBuf],
    findings_path: &Path,
    labels_path: &Path,
    output: &Path,
    beta: f64,
) -> Result<(), CliError> {
    let report = load_findings(findings_path)?;
    let labels = load_labels(labels_path, &report)?;
    let label_map: BTreeMap<String, bool> =
        labels.iter().map(|l| (l.finding_id.clone(), l.is_real)).collect();
    let fingerprint =
        labels_fingerprint_pairs(label_map.iter().map(|(k, &v)| (k.as_str(), v)));

    let mut members = Vec::new();
    for path in calibrations {
        let result: CalibrationResult =
            serde_json::from_slice(&read_file(path)?).map_err(parse_err)?;
        if result.labels_fingerprint != fingerprint {
            return Err(calibration_err(format!(
                "calibration {} was computed on a different labeled set",
                path.display()
            )));
        }
        members.push(EnsembleMember::from(&result));
    }
    let result = ensemble_union(&members, &label_map, beta).map_err(calibration_err)?;
    let json = serde_json::to_vec_pretty(&result).map_err(parse_err)?;
    write_output(output, &json)?;
    println!(
        "ensemble of {} models: union tn = {} ({:.2}% of SAST false positives)",
        result.member_models.len(),
        result.union_tn_set.len(),
        100.0 * result.combined_metrics.tn_ratio
    );
    Ok(())
}

fn cmd_report(
    assessments_path: &Path,
    findings_path: &Path,
    threshold: Option<f64>,
    calibration: Option<&Path>,
    output: &Path,
    config: &RunConfig,
) -> Result<(), CliError> {
    let report = load_findings(findings_path)?;
    let assessments = read_assessment_jsonl(&read_file(assessments_path)?).map_err(parse_err)?;
    let threshold = match (threshold, calibration) {
        (Some(t), _) => t,
        (None, Some(path)) => {
            let result: CalibrationResult =
                serde_json::from_slice(&read_file(path)?).map_err(parse_err)?;
            result
                .conservative_threshold
                .ok_or_else(|| calibration_err("calibration has no conservative threshold"))?
        }
        (None, None) => {
            return Err(calibration_err("supply --threshold or --calibration"));
        }
    };
    let flagged = build_flagged_report(&report, &assessments, threshold, &config.assessment)
        .map_err(calibration_err)?;

    fs::create_dir_all(output).map_err(config_err)?;
    let json = serde_json::to_vec_pretty(&flagged).map_err(parse_err)?;
    write_output(&output.join("flagged_report.json"), &json)?;
    write_output(&output.join("flagged_report.md"), render_markdown(&flagged).as_bytes())?;
    // Run timestamp lives in a sidecar so the report artifacts themselves
    // are deterministic.
    let meta = serde_json::json!({
        "schema_version": crate::report::REPORT_SCHEMA_VERSION,
        "generated_at": chrono::Utc::now().to_rfc3339(),
    });
    write_output(&output.join("run_meta.json"), meta.to_string().as_bytes())?;

    let vulnerable = flagged
        .findings
        .iter()
        .filter(|f| f.flag == crate::model::Flag::FlaggedVulnerable)
        .count();
    println!(
        "flagged {} of {} findings for expert review (threshold {threshold}) -> {}",
        vulnerable,
        flagged.findings.len(),
        output.display()
    );
    Ok(())
}
