//! `xmar`: pretrain victims, reprogram them, evaluate, export images, run
//! baselines and the timing check.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 bad config or arguments.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Config;
use error::CliError;

#[derive(Parser)]
#[command(name = "xmar", version, about = "Adversarial reprogramming of image classifiers for sequence tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a victim, train it on the synthetic shapes task and freeze it.
    PretrainVictim {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train an adversarial program against a frozen victim.
    Reprogram {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trained program on the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render one input sequence through a trained program as a PNG.
    ExportImage {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// TF-IDF unigram and selected n-gram baselines.
    Baseline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Embedding wall-clock at doubling sequence lengths.
    BenchTiming {
        #[arg(long)]
        config: PathBuf,
    },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(raw) = std::env::var("XMAR_DETERMINISTIC") {
        // Reductions are always ordered; both values are accepted.
        if raw != "0" && raw != "1" {
            return Err(CliError::Config(format!("XMAR_DETERMINISTIC must be 0 or 1, got {raw:?}")));
        }
    }
    if let Ok(raw) = std::env::var("XMAR_THREADS") {
        let threads = raw
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("XMAR_THREADS must be a positive integer, got {raw:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::PretrainVictim { config } => commands::pretrain(&Config::load(&config)?),
        Command::Reprogram { config, resume } => commands::reprogram(&Config::load(&config)?, resume.as_deref()),
        Command::Eval { config, checkpoint } => commands::eval(&Config::load(&config)?, &checkpoint),
        Command::ExportImage { checkpoint, input, out } => commands::export_image(&checkpoint, &input, &out),
        Command::Baseline { config } => commands::baseline(&Config::load(&config)?),
        Command::BenchTiming { config } => commands::timing(&Config::load(&config)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
