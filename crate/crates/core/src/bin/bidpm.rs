use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bidpm::cli::{self, LOG_ENV};
use bidpm::flow::Direction;

/// Bi-directional discrete process matching on 2D toy data.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Push a point table through a trained field.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Point table; source rows are used for forward, target rows for backward.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "forward")]
        direction: Direction,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        use_ema: bool,
        /// Euler steps; defaults to the config's evaluation steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on a held-out paired set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Point table; defaults to the held-out split from the checkpoint's config.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        use_ema: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train and evaluate every combination of the config's sweep lists.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Print the contents of a checkpoint.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(args: Args) -> bidpm::Result<()> {
    match args.command {
        Command::Train {
            config,
            out,
            seed_override,
        } => {
            let s = cli::cmd_train(&config, out.as_deref(), seed_override)?;
            println!("trained {} steps, checkpoint {}", s.steps, s.checkpoint.display());
        }
        Command::Synthesize {
            checkpoint,
            input,
            out,
            direction,
            use_ema,
            steps,
        } => {
            let t = cli::cmd_synthesize(&checkpoint, &input, &out, direction, use_ema, steps)?;
            println!("wrote {} rows to {}", t.rows.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            input,
            out,
            use_ema,
            steps,
        } => {
            let r = cli::cmd_eval(&checkpoint, input.as_deref(), &out, use_ema, steps)?;
            println!("{}", r.summary());
        }
        Command::Sweep {
            config,
            out,
            seed_override,
        } => {
            let o = cli::cmd_sweep(&config, out.as_deref(), seed_override)?;
            let failed = o.runs.iter().filter(|r| r.1.is_err()).count();
            println!("{} runs, {failed} failed", o.runs.len());
            for v in &o.trend_violations {
                println!("trend: {v}");
            }
        }
        Command::InspectCheckpoint { checkpoint } => print!("{}", cli::cmd_inspect(&checkpoint)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
