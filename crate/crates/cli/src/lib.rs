//! `maka` command-line driver. [`run_cli`] parses arguments, dispatches to a
//! subcommand and maps failures to exit codes: 1 for usage or configuration
//! problems, 2 for bad input data, 3 for model gateway failures.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::PartialConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_GATEWAY: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Gateway(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Gateway(_) => EXIT_GATEWAY,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "maka", version, about = "Criterion augmentation and patient-criterion matching over clinical notes")]
struct Cli {
    /// JSON file with defaults for any run setting.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus against a criteria catalog and print its statistics.
    Ingest(DataArgs),
    /// Prepare criteria only and write the prepared-criteria file.
    Augment(RunArgs),
    /// Prepare criteria, match every patient-criterion pair and write artifacts.
    Run(RunArgs),
    /// Score a decisions file against the corpus gold labels.
    Evaluate(EvaluateArgs),
    /// Compare several decision sets side by side.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
struct DataArgs {
    /// Directory of patient XML documents.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Criteria catalog JSON.
    #[arg(long, value_name = "FILE")]
    criteria: Option<PathBuf>,
    /// Catalog variant: original, redefined or augmented.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Debug, Args, Default)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// zeroshot, cot or maka.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// http, replay or scripted.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// strict or record.
    #[arg(long)]
    replay_mode: Option<String>,
    /// Script fixture for the scripted backend.
    #[arg(long, value_name = "FILE")]
    script: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    max_concurrency: Option<usize>,
    /// Whitespace tokens allowed per matching prompt.
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long)]
    trial_threshold: Option<usize>,
    #[arg(long)]
    seed: Option<i64>,
    /// JSON Lines snippet store for the retrieval route.
    #[arg(long, value_name = "FILE")]
    snippets: Option<PathBuf>,
    /// JSON Lines search results for the online search route.
    #[arg(long, value_name = "FILE")]
    search_results: Option<PathBuf>,
    /// Prepared-criteria file from an earlier run.
    #[arg(long, value_name = "FILE")]
    prepared: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long, value_name = "DIR")]
    prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Decisions file (JSON Lines).
    #[arg(long, value_name = "FILE", conflicts_with = "run")]
    decisions: Option<PathBuf>,
    /// Run directory; the decisions file is taken from its manifest.
    #[arg(long, value_name = "DIR")]
    run: Option<PathBuf>,
    #[arg(long)]
    trial_threshold: Option<usize>,
    /// Also write report.md, report.csv and report.json here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `LABEL=PATH` or `PATH`, where PATH is a decisions file or run directory.
    #[arg(long = "input", value_name = "LABEL=PATH", required = true)]
    inputs: Vec<String>,
    #[arg(long)]
    trial_threshold: Option<usize>,
    /// Write the tables to this file as well.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

impl DataArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            corpus_dir: self.corpus.clone(),
            criteria_path: self.criteria.clone(),
            variant: self.variant.clone(),
            ..Default::default()
        }
    }
}

impl RunArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            strategy: self.strategy.clone(),
            model_id: self.model.clone(),
            backend: self.backend.clone(),
            cache_dir: self.cache_dir.clone(),
            replay_mode: self.replay_mode.clone(),
            script_path: self.script.clone(),
            out_dir: self.out.clone(),
            max_concurrency: self.max_concurrency,
            token_budget: self.token_budget,
            trial_threshold: self.trial_threshold,
            seed: self.seed,
            snippets_path: self.snippets.clone(),
            search_results_path: self.search_results.clone(),
            prepared_path: self.prepared.clone(),
            prompts_dir: self.prompts.clone(),
            ..self.data.partial()
        }
    }
}

/// Output streams and environment lookup, injectable for tests.
pub struct Io<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
    pub env: &'a dyn Fn(&str) -> Option<String>,
}

/// Runs the CLI with the process environment and standard streams.
/// `argv[0]` is the program name.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let env = |k: &str| std::env::var(k).ok();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    run_cli_with(argv, &mut Io { out: &mut out, err: &mut err, env: &env })
}

pub fn run_cli_with<I, T>(argv: I, io: &mut Io<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = io.out.write_all(text.as_bytes());
                EXIT_OK
            } else {
                let _ = io.err.write_all(text.as_bytes());
                EXIT_USAGE
            };
        }
    };
    match dispatch(cli, io) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let kind = match e {
                CliError::Usage(_) => "usage error",
                CliError::Data(_) => "data error",
                CliError::Gateway(_) => "gateway failure",
            };
            let _ = writeln!(io.err, "maka: {kind}: {e}");
            e.exit_code()
        }
    }
}

fn layered(flags: PartialConfig, config: Option<&PathBuf>, io: &Io<'_>) -> Result<config::RunConfig, CliError> {
    let file = match config {
        Some(path) => PartialConfig::from_file(path)?,
        None => PartialConfig::default(),
    };
    let env = PartialConfig::from_env(io.env)?;
    config::RunConfig::resolve(flags.over(file).over(env))
}

fn dispatch(cli: Cli, io: &mut Io<'_>) -> Result<(), CliError> {
    let config = cli.config.as_ref();
    match cli.command {
        Command::Ingest(a) => {
            // Backend settings are irrelevant here; keep them from tripping validation.
            let flags = PartialConfig { backend: Some("http".into()), ..a.partial() };
            let cfg = layered(flags, config, io)?;
            commands::ingest(&cfg, io)
        }
        Command::Augment(a) => {
            let flags = PartialConfig { strategy: Some("maka".into()), ..a.partial() };
            let cfg = layered(flags, config, io)?;
            commands::augment(&cfg, io)
        }
        Command::Run(a) => {
            let cfg = layered(a.partial(), config, io)?;
            commands::run(&cfg, io)
        }
        Command::Evaluate(a) => {
            let flags = PartialConfig {
                trial_threshold: a.trial_threshold,
                backend: Some("http".into()),
                ..a.data.partial()
            };
            let cfg = layered(flags, config, io)?;
            let source = match (a.decisions, a.run) {
                (Some(d), None) => commands::DecisionSource::File(d),
                (None, Some(r)) => commands::DecisionSource::Run(r),
                _ => return Err(CliError::Usage("evaluate needs --decisions or --run".into())),
            };
            let format = match a.format {
                ReportFormat::Markdown => commands::Format::Markdown,
                ReportFormat::Csv => commands::Format::Csv,
                ReportFormat::Json => commands::Format::Json,
            };
            commands::evaluate(&cfg, source, format, a.out.as_deref(), io)
        }
        Command::Report(a) => {
            let flags = PartialConfig {
                trial_threshold: a.trial_threshold,
                backend: Some("http".into()),
                ..a.data.partial()
            };
            let cfg = layered(flags, config, io)?;
            commands::report(&cfg, &a.inputs, a.out.as_deref(), io)
        }
    }
}
