//! `daco`: run navigation episodes, score traces, render marked maps.

mod annotate;
mod config;
mod eval;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Error that should end the process with status 2: bad flags, config or
/// inputs detected before any work starts.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Parser)]
#[command(name = "daco", version, about = "Dual-agent vision-language navigation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes and write one trace per episode.
    Run(RunArgs),
    /// Score traces and print metrics and cost reports.
    Eval(EvalArgs),
    /// Draw a trajectory onto a scene's top-down maps.
    Annotate(AnnotateArgs),
    /// Print a saved evaluation report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Oracle,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// TOML file with defaults for any of these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scene_dir: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub oracle_script: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// none, static or dynamic.
    #[arg(long)]
    pub plan_style: Option<String>,
    #[arg(long, overrides_with = "no_replan")]
    pub replan: bool,
    #[arg(long, overrides_with = "replan")]
    pub no_replan: bool,
    #[arg(long)]
    pub max_steps: Option<u32>,
    #[arg(long)]
    pub max_replans: Option<u32>,
    /// Dataset mode for episodes that do not name one: r2r, reverie or r4r.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_label: Option<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also write every marked map set sent to the planner.
    #[arg(long)]
    pub dump_maps: bool,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Metrics,
    Cost,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory holding one subdirectory of traces per run label.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub scene_dir: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub report: ReportKind,
    /// Where to write report.json and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub scene_dir: PathBuf,
    #[arg(long)]
    pub scan: String,
    /// JSON array of viewpoint ids, or a trace file (.jsonl).
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Step indices to render; all when omitted.
    #[arg(long = "step", value_delimiter = ',')]
    pub steps: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// report.json written by `eval --out`.
    pub report: PathBuf,
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(args),
        Command::Eval(args) => eval::cmd_eval(&args).map(|_| 0),
        Command::Annotate(args) => annotate::cmd_annotate(&args).map(|_| 0),
        Command::Report(args) => eval::cmd_report(&args).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
