use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pba_core::harness::{self, HarnessError, ReplayMode};

#[derive(Parser)]
#[command(
    name = "pba",
    version,
    about = "Search, replay and baseline augmentation schedules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a population search and write schedule.json and search_log.csv.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh model under a schedule in one of the replay modes.
    Train {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: ReplayMode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train models under random schedules and write the expected best-of-n curve.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a search output directory as CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<ReplayMode, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Search { config, out } => {
            let a = harness::cmd_search(&config, &out)?;
            println!(
                "best trial {} (val accuracy {:.4}); wrote {} and {}",
                a.result.best_trial,
                a.result.best_score,
                a.schedule_path.display(),
                a.log_path.display()
            );
        }
        Command::Train {
            schedule,
            mode,
            config,
            out,
        } => {
            let o = harness::cmd_train(&schedule, mode, &config, &out)?;
            if let Some(old) = o.stretched_from {
                println!("schedule stretched from {old} to {} epochs", o.epochs.len());
            }
            if let Some(s) = o.shuffle_seed {
                println!("shuffle seed {s}");
            }
            println!("{mode}: final test accuracy {:.4}", o.final_test_accuracy());
        }
        Command::Baseline {
            config,
            trials,
            out,
        } => {
            let curve = harness::cmd_baseline(&config, trials, &out)?;
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!(
                    "expected best: n=1 {:.4}, n={} {:.4}",
                    first.1, last.0, last.1
                );
            }
        }
        Command::Report { input, out } => {
            let stats = harness::cmd_report(&input, &out)?;
            println!("wrote {} rows to {}", stats.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors count as configuration errors
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
