use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mvae", about = "Multimodal variational autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write run artifacts.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: log-likelihood estimates and weight variances.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per paired fraction and record cross-modality accuracy.
    Weaksweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast oracle suite and print one pass/fail line per check.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => mvae_cli::commands::cmd_train(&config, &out),
        Command::Eval {
            checkpoint,
            config,
            out,
        } => mvae_cli::commands::cmd_eval(&checkpoint, &config, &out),
        Command::Weaksweep {
            config,
            fractions,
            out,
        } => mvae_cli::commands::cmd_weaksweep(&config, &fractions, &out),
        Command::Check => mvae_cli::commands::cmd_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
