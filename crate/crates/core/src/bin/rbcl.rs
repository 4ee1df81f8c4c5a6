use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rbcl::cli::{emit_report, generate_data, run_experiment, CliError};

#[derive(Parser)]
#[command(
    name = "rbcl",
    about = "Backward compatible embedding training experiments"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every configured method.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the result table of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, out } => {
            for path in generate_data(&config, out.as_deref())? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Run { config, seed, out } => {
            let dir = run_experiment(&config, seed, out.as_deref())?;
            print!("{}", emit_report(&dir)?);
        }
        Command::Report { out } => print!("{}", emit_report(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rbcl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
