use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use medvqa::config::{BackendKind, Overrides, RunConfig};
use medvqa::dataset::{parse_label_table, summarize, MissingAs, TableSchema, UncertainAs, UncertainPolicy};
use medvqa::pipeline::{self, CalibrateRequest, CalibrationFile, PipelineError};
use medvqa::prompt::TemplateId;
use medvqa::referral::{CalibrationConfig, ReferralDirection};
use medvqa::report;

#[derive(Parser)]
#[command(
    name = "medvqa",
    version,
    about = "Prompt-strategy evaluation harness for medical VQA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a label table and print its composition.
    Ingest(IngestArgs),
    /// Tune weak-learner thresholds from a scores file and a label table.
    Calibrate(CalibrateArgs),
    /// Run an evaluation.
    Run(RunArgs),
    /// Render tables from one or more record files.
    Report(ReportArgs),
    /// Render POPE tables from record files.
    Pope(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Label table (comma-separated with a header row).
    labels: PathBuf,
    #[arg(long, default_value = "Path")]
    path_column: String,
    #[arg(long)]
    id_column: Option<String>,
    #[arg(long, value_parser = parse_uncertain, default_value = "negative")]
    uncertain_as: UncertainAs,
    #[arg(long, value_parser = parse_missing, default_value = "negative")]
    missing_as: MissingAs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Restrict to these pathologies (default: every pathology in the scores file).
    #[arg(long = "pathology")]
    pathologies: Vec<String>,
    #[arg(long, default_value = "calibration.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    w_specificity: f64,
    #[arg(long, default_value_t = 0.8)]
    w_npv: f64,
    /// Largest tolerated fraction of score rows without a label row.
    #[arg(long, default_value_t = pipeline::DEFAULT_MAX_JOIN_MISS)]
    max_join_miss: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_template)]
    template: Option<TemplateId>,
    #[arg(long = "pathology")]
    pathologies: Vec<String>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<ReferralDirection>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum in-flight backend requests.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Continue an interrupted run from its record file.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    records: Vec<PathBuf>,
}

fn parse_template(s: &str) -> Result<TemplateId, String> {
    s.parse()
}

fn parse_policy(s: &str) -> Result<ReferralDirection, String> {
    s.parse()
}

fn parse_uncertain(s: &str) -> Result<UncertainAs, String> {
    match s {
        "negative" => Ok(UncertainAs::Negative),
        "positive" => Ok(UncertainAs::Positive),
        "exclude" => Ok(UncertainAs::Exclude),
        _ => Err(format!("`{s}` is not one of negative, positive, exclude")),
    }
}

fn parse_missing(s: &str) -> Result<MissingAs, String> {
    match s {
        "negative" => Ok(MissingAs::Negative),
        "exclude" => Ok(MissingAs::Exclude),
        _ => Err(format!("`{s}` is not one of negative, exclude")),
    }
}

fn ingest(args: IngestArgs) -> Result<(), PipelineError> {
    let schema = TableSchema {
        path_column: args.path_column,
        id_column: args.id_column,
        ..TableSchema::default()
    };
    let file = File::open(&args.labels).map_err(|source| PipelineError::Io {
        path: args.labels.clone(),
        source,
    })?;
    let parsed = parse_label_table(file, &schema)?;
    for e in &parsed.row_errors {
        eprintln!("row {}: {}", e.row, e.reason);
    }
    let policy = UncertainPolicy {
        uncertain_as: args.uncertain_as,
        missing_as: args.missing_as,
    };
    let mut findings = schema.findings.clone();
    findings.extend(parsed.extra_findings.iter().cloned());
    let summary = summarize(&parsed.studies, &findings, policy);
    print!("{}", summary.render_table());
    if !parsed.row_errors.is_empty() {
        eprintln!("{} malformed row(s) skipped", parsed.row_errors.len());
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<(), PipelineError> {
    let mut req = CalibrateRequest::new(args.scores, args.labels);
    req.pathologies = args.pathologies;
    req.config = CalibrationConfig::new(args.w_specificity, args.w_npv)?;
    req.max_join_miss = args.max_join_miss;
    let reports = pipeline::run_calibrate(&req)?;
    CalibrationFile::new(reports.clone()).save(&args.out)?;
    print!("{}", report::weak_learner_table(&reports));
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<(), PipelineError> {
    let mut config = RunConfig::load(&args.config)?;
    config.apply(Overrides {
        template: args.template,
        pathologies: args.pathologies,
        backend: args.backend,
        endpoint: args.endpoint,
        scores: args.scores,
        policy: args.policy,
        seed: args.seed,
        out: args.out,
        concurrency: args.concurrency,
    });
    let outcome = pipeline::run_eval(&config, args.resume)?;
    print!("{}", outcome.report);
    eprintln!(
        "{} records ({} resumed) in {}; {} backend call(s), {} cache hit(s)",
        outcome.records.len(),
        outcome.resumed,
        outcome.records_path.display(),
        outcome.backend_calls,
        outcome.cache_hits
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Run(a) => run(a),
        Command::Report(a) => pipeline::run_report(&a.records, false).map(|t| print!("{t}")),
        Command::Pope(a) => pipeline::run_report(&a.records, true).map(|t| print!("{t}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
