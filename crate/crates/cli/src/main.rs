use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unitsynth::config::PipelineConfig;
use unitsynth::pipeline::{Pipeline, PipelineError, RunOptions, Stage};

/// Build a unit-test-verified code dataset from a Python corpus.
#[derive(Parser, Debug)]
#[command(name = "unitsynth", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "unitsynth.toml")]
    config: PathBuf,
    /// Continue an interrupted run instead of starting over.
    #[arg(long, global = true)]
    resume: bool,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Maximum concurrent jobs and requests.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Answer every model request from this script.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read the corpus, drop duplicates and contaminated documents.
    Ingest,
    /// Extract functions and apply the package and safety filters.
    Extract,
    /// Generate a test suite per function.
    GenTests,
    /// Run every function against its suite once.
    Execute,
    /// Repair failing functions.
    Improve,
    /// Document passing functions and re-verify them.
    Refine,
    /// Write training pairs and the dataset manifest.
    Export,
    /// Package statistics over the exported dataset.
    Stats,
    /// Evaluate the test generator on canonical solutions.
    EvalGenerator,
    /// Run every stage from ingest to stats.
    Run {
        /// Stop after this stage (the run can be continued with --resume).
        #[arg(long)]
        stop_after: Option<Stage>,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Self::Ingest => Stage::Ingest,
            Self::Extract => Stage::Extract,
            Self::GenTests => Stage::GenTests,
            Self::Execute => Stage::Execute,
            Self::Improve => Stage::Improve,
            Self::Refine => Stage::Refine,
            Self::Export => Stage::Export,
            Self::Stats => Stage::Stats,
            Self::EvalGenerator => Stage::EvalGenerator,
            Self::Run { .. } => return None,
        })
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, PipelineError> {
    let config = PipelineConfig::load(&cli.config)?;
    let pipeline = Pipeline::open(
        config,
        RunOptions {
            resume: cli.resume,
            output_dir: cli.output_dir,
            parallelism: cli.parallelism,
            mock_script: cli.mock_script,
        },
    )?;
    match (&cli.command, cli.command.stage()) {
        (_, Some(stage)) => pipeline.run_stage(stage),
        (Command::Run { stop_after }, None) => Ok(match pipeline.run_all(*stop_after)? {
            Some(manifest) => serde_json::to_value(manifest).expect("manifest serializes"),
            None => serde_json::json!({ "stopped_after": stop_after }),
        }),
        _ => unreachable!("every command is a stage or run"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
