//! `briefx`: clean, synth, split, infer, eval, kappa and report subcommands
//! over a shared work directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{EndpointFlags, RunConfig};

/// Exit codes: 1 usage or config, 2 data, 3 endpoint exhaustion.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Endpoint(String),
}

impl CliError {
    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Endpoint(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Endpoint(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "briefx", version, about = "Structured extraction pipeline for police briefings")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Fold seed; recorded in every artifact it influences.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest the post CSV and write cleaned briefings plus stats.
    Clean {
        #[arg(long)]
        input: Option<PathBuf>,
        /// File of post ids (one per line) withheld from the corpus.
        #[arg(long)]
        exclude_ids: Option<PathBuf>,
        #[arg(long)]
        min_length: Option<usize>,
    },
    /// Build the chat fine-tuning dataset and training manifest.
    Synth {
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Assign annotated records to cross-validation folds.
    Split {
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Send briefings to a chat-completions endpoint.
    Infer {
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Only the test records of this fold.
        #[arg(long)]
        fold: Option<usize>,
        /// Number of worked examples prepended to each prompt.
        #[arg(long)]
        few_shot: Option<usize>,
        #[command(flatten)]
        endpoint: EndpointFlags,
    },
    /// Score raw outputs against gold records.
    Eval {
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, conflicts_with = "aggregate")]
        fold: Option<usize>,
        /// Average the per-fold reports.
        #[arg(long)]
        aggregate: bool,
        #[arg(long)]
        tokenizer: Option<String>,
    },
    /// Inter-annotator agreement between two gold files.
    Kappa {
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
    },
    /// Render a saved JSON report.
    Report {
        #[arg(long)]
        input: Option<PathBuf>,
        /// markdown, csv or json.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = commands::Context::new(&cli, config)?;
    match cli.command {
        Command::Clean { input, exclude_ids, min_length } => commands::clean(&ctx, input, exclude_ids, min_length),
        Command::Synth { gold, templates } => commands::synth(&ctx, gold, templates),
        Command::Split { gold, folds } => commands::split(&ctx, gold, folds),
        Command::Infer { gold, templates, fold, few_shot, endpoint } => {
            commands::infer(&ctx, gold, templates, fold, few_shot, &endpoint)
        }
        Command::Eval { gold, fold, aggregate, tokenizer } => commands::eval(&ctx, gold, fold, aggregate, tokenizer),
        Command::Kappa { a, b } => commands::kappa(&ctx, a, b),
        Command::Report { input, format, out } => commands::report(&ctx, input, format, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
