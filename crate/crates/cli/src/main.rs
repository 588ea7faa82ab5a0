//! Pipeline driver. Every subcommand reads one TOML config, works inside
//! the configured work directory, and exits with a coded status:
//! 0 success, 2 configuration error, 3 missing upstream artifact,
//! 4 runtime failure, 5 validation failure.

mod config;
mod log;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::stages::TransferMode;

#[derive(Parser)]
#[command(
    name = "mirage",
    about = "Synthesize vision-language training data from text only",
    version
)]
struct Cli {
    /// Path to the pipeline configuration file.
    #[arg(long, global = true, default_value = "pipeline.toml")]
    config: PathBuf,

    /// Override the configured RNG seed (applies to run and simulation).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Validate configuration and inputs without side effects.
    #[arg(long, global = true)]
    dry_run: bool,

    /// Redo work even when outputs look current.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, filter, dedupe, and template-expand the seed corpus.
    Seed,
    /// Stage 1: expand seeds into detailed captions via the LLM gateway.
    Expand,
    /// Stage 2: generate instruction dialogues from sampled captions.
    Instruct,
    /// Encode captions into text embedding shards.
    Embed,
    /// Stage 3: mean-center embeddings into synthetic image representations.
    Transfer {
        /// pretrain: text shards -> synthetic reps; inference: real-image
        /// shards -> centered reps.
        #[arg(long, default_value = "pretrain")]
        mode: String,
        /// Input directory of real-image shards (inference mode).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Reference mean file (.unic) instead of the batch mean
        /// (inference mode).
        #[arg(long)]
        mean: Option<PathBuf>,
    },
    /// Assemble the final datasets with manifest and checksums.
    Pack,
    /// Re-read a packed dataset and check every recorded invariant.
    Verify,
    /// Compute corpus diversity and length metrics.
    Analyze {
        /// Corpus to analyze (JSONL with a "text" field, or plain text);
        /// defaults to the stage-1 captions.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Stats JSON of another corpus to compare against.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Run the paired-embedding gap experiment and print its report.
    SimulateGap {
        /// Also write the report JSON to this path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize gateway cost from the ledger journal.
    Report {
        /// Sample count for the per-sample figure; defaults to accepted
        /// stage-1 captions.
        #[arg(long)]
        samples: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let loaded = match config::load_config(&cli.config, cli.seed) {
        Ok(loaded) => loaded,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let result = match cli.command {
        Command::Seed => stages::seed(&loaded, cli.force, cli.dry_run),
        Command::Expand => stages::expand(&loaded, cli.force, cli.dry_run),
        Command::Instruct => stages::instruct(&loaded, cli.force, cli.dry_run),
        Command::Embed => stages::embed(&loaded, cli.force, cli.dry_run),
        Command::Transfer { mode, input, mean } => {
            let mode = match mode.as_str() {
                "pretrain" => TransferMode::Pretrain,
                "inference" => match input {
                    Some(input_dir) => TransferMode::Inference {
                        input_dir,
                        mean_file: mean,
                    },
                    None => {
                        eprintln!("configuration error: --mode inference requires --input");
                        return ExitCode::from(2);
                    }
                },
                other => {
                    eprintln!("configuration error: unknown transfer mode {other:?}");
                    return ExitCode::from(2);
                }
            };
            stages::transfer(&loaded, cli.force, cli.dry_run, mode)
        }
        Command::Pack => stages::pack(&loaded, cli.force, cli.dry_run),
        Command::Verify => stages::verify(&loaded),
        Command::Analyze { input, against } => stages::analyze(&loaded, input, against),
        Command::SimulateGap { output } => stages::simulate_gap(&loaded, output),
        Command::Report { samples } => stages::report(&loaded, samples),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{}", failure.message());
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
