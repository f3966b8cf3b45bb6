//! `pmr`: preprocess skeleton corpora, train the retargeting model, anonymize
//! recordings and evaluate re-identification risk.

mod anonymize;
mod config;
mod evaluate;
mod preprocess;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Preset, RunConfig};
use pmr_core::Error;

/// Invalid flags or configuration values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 1;
const EXIT_MISSING_INPUT: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "pmr", version, about = "Skeleton motion anonymization by retargeting")]
struct Cli {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration; overrides the file's `preset` key.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a raw corpus, or generate a synthetic one, and write its manifest.
    Preprocess(preprocess::Args),
    /// Run the stage plan, writing checkpoints and a JSON-lines log.
    Train(train::Args),
    /// Retarget recordings onto dummy skeletons.
    Anonymize(anonymize::Args),
    /// Score anonymized corpora against offline probes.
    Evaluate(evaluate::Args),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    match cli.command {
        Command::Preprocess(a) => preprocess::run(cfg, a),
        Command::Train(a) => train::run(cfg, a),
        Command::Anonymize(a) => anonymize::run(cfg, a),
        Command::Evaluate(a) => evaluate::run(cfg, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                Error::Config(_) | Error::InvalidConfig(_) => EXIT_USAGE,
                _ => EXIT_MISSING_INPUT,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_MISSING_INPUT;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
