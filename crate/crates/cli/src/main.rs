mod config;
mod error;
mod figures;
mod stages;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Overrides, PipelineConfig};
use crate::error::CliError;
use crate::stages::Context;

/// Self-supervised change detection in satellite image time series.
#[derive(Debug, Parser)]
#[command(name = "sitscd", version)]
struct Cli {
    /// TOML pipeline configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step, overriding the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-scene work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Root of all stage outputs, overriding the file.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one pipeline stage.
    Run { stage: Stage },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Synth,
    Pseudo,
    Train,
    Finetune,
    Infer,
    Eval,
    Report,
}

fn execute(cli: &Cli) -> Result<String, CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        workdir: cli.workdir.clone(),
    };
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Config => toml::to_string(&cfg).map_err(|e| CliError::Other(e.to_string())),
        Command::Run { stage } => {
            let ctx = Context::new(cfg, cli.jobs)?;
            match stage {
                Stage::Synth => stages::synth(&ctx),
                Stage::Pseudo => stages::pseudo(&ctx),
                Stage::Train => stages::train(&ctx),
                Stage::Finetune => stages::finetune(&ctx),
                Stage::Infer => stages::infer_stage(&ctx),
                Stage::Eval => stages::eval(&ctx),
                Stage::Report => stages::report(&ctx),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            // A closed pipe on the reader's side is not a failure of the run.
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            e.exit_code()
        }
    }
}
