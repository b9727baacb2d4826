//! Command-line entry points (`train`, `grade`, `eval`, `synth`, `serve`)
//! and the local HTTP service behind the annotator.

pub mod commands;
pub mod data;
pub mod report;
pub mod service;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use omr_core::classifiers::ModelKind;
use omr_core::strategy::StrategyKind;
use omr_core::OmrError;

#[derive(Debug, Parser)]
#[command(name = "omr", version, about = "Grade scanned multiple-choice answer sheets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a strategy's box classifiers from labeled sheets.
    Train(TrainArgs),
    /// Grade a directory of sheets and write reports.
    Grade(GradeArgs),
    /// Cross-validate classifiers on labeled sheets.
    Eval(EvalArgs),
    /// Write a synthetic labeled exam to disk.
    Synth(SynthArgs),
    /// Serve the HTTP API on localhost.
    Serve(ServeArgs),
}

/// The model answer sheet and its metadata.
#[derive(Debug, Clone, Args)]
pub struct ExamArgs {
    /// Reference image; repeat once per page, in page order.
    #[arg(long = "reference", required = true)]
    pub references: Vec<PathBuf>,
    #[arg(long)]
    pub metadata: PathBuf,
}

/// Sheets plus their per-box labels.
#[derive(Debug, Clone, Args)]
pub struct LabeledArgs {
    #[command(flatten)]
    pub exam: ExamArgs,
    #[arg(long)]
    pub sheets: PathBuf,
    /// CSV with columns image,question,choice,answerType.
    #[arg(long)]
    pub labels: PathBuf,
    /// Skip augmenting crossed-out boxes.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CnnPreset {
    Desk,
    Compact,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: LabeledArgs,
    #[arg(long, value_parser = parse_strategy, default_value = "SF")]
    pub strategy: StrategyKind,
    /// Classifier of a straight-forward strategy.
    #[arg(long, value_parser = parse_kind)]
    pub classifier: Option<ModelKind>,
    /// Class subset letter (a-d); a straight-forward strategy needs (a).
    #[arg(long)]
    pub classes: Option<char>,
    #[arg(long, value_parser = parse_kind)]
    pub stage1: Option<ModelKind>,
    #[arg(long, value_parser = parse_kind)]
    pub stage2: Option<ModelKind>,
    /// JSON classifier configuration replacing the defaults of its kind.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "compact")]
    pub cnn: CnnPreset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Xml,
}

#[derive(Debug, Clone, Args)]
pub struct GradeArgs {
    #[command(flatten)]
    pub exam: ExamArgs,
    #[arg(long)]
    pub sheets: PathBuf,
    /// Strategy descriptor written by `train`.
    #[arg(long)]
    pub strategy: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,xml")]
    pub format: Vec<ReportFormat>,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    #[arg(long, default_value_t = omr_core::grading::DEFAULT_REVIEW_THRESHOLD)]
    pub review_threshold: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: LabeledArgs,
    /// Classifiers to evaluate.
    #[arg(long, value_parser = parse_kind, value_delimiter = ',', default_value = "baseline,nbc,bovw,cnn")]
    pub classifiers: Vec<ModelKind>,
    /// Class subset letters.
    #[arg(long, default_value = "abcd")]
    pub subsets: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "compact")]
    pub cnn: CnnPreset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "exam0")]
    pub exam_id: String,
    #[arg(long, default_value_t = 30)]
    pub sheets: usize,
    #[arg(long, default_value_t = 10)]
    pub questions: usize,
    #[arg(long, default_value_t = 4)]
    pub choices: usize,
    /// Probabilities of confirmed, crossed-out and empty boxes.
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0.25,0.05,0.70")]
    pub mixture: Vec<f64>,
    /// Scale of rotation, shift, noise and blur; 0 gives clean sheets.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub exam: ExamArgs,
    #[arg(long)]
    pub sheets: PathBuf,
    /// Directory of strategy descriptors offered to clients.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value_t = omr_core::grading::DEFAULT_REVIEW_THRESHOLD)]
    pub review_threshold: f64,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: OmrError| e.to_string())
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: OmrError| e.to_string())
}

/// Registration failures while grading.
pub const EXIT_REGISTRATION: u8 = 2;

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Train(a) => commands::train(&a).map(|_| ExitCode::SUCCESS),
        Command::Grade(a) => commands::grade(&a).map(|o| o.exit_code()),
        Command::Eval(a) => commands::eval(&a).map(|_| ExitCode::SUCCESS),
        Command::Synth(a) => commands::synth(&a).map(|_| ExitCode::SUCCESS),
        Command::Serve(a) => service::serve(&a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}
