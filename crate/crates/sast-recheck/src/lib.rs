//! Re-assessment of SAST findings with LLM decision scoring.
//!
//! The pipeline ingests static-analysis reports, renders a few-shot
//! Chain-of-Thought prompt per finding, collects 0.0-10.0 decision scores
//! from one or more models (optionally with self-consistency repetition),
//! calibrates a conservative threshold that keeps the assessment
//! false-negative count at zero on labeled data, and emits a flagged report
//! that partitions findings into "review" and "ignorable".
//!
//! See the `book/` guide for the concepts and the CLI walkthrough.

pub mod assess;
pub mod calibrate;
pub mod cli;
pub mod config;
pub mod gateway;
pub mod ingest;
pub mod model;
pub mod prompt;
pub mod report;

// Keep the book's code snippets compiling: each chapter is run as a doctest.
#[cfg(doctest)]
mod book {
    macro_rules! doc_check {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(unused)]
            mod $name {}
        };
    }
    doc_check!(introduction, "../../../book/src/introduction.md");
    doc_check!(pipeline, "../../../book/src/pipeline.md");
    doc_check!(prompting, "../../../book/src/prompting.md");
    doc_check!(scoring, "../../../book/src/scoring.md");
    doc_check!(calibration, "../../../book/src/calibration.md");
    doc_check!(ensembles, "../../../book/src/ensembles.md");
    doc_check!(cli_guide, "../../../book/src/cli.md");
}
