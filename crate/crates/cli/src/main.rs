use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use owal::io::config::SEED_ENV;
use owal::io::output::write_atomic;
use owal::{Policy, Result};
use owal_cli::{evaluate, exit_code, score, select, simulate, SelectArgs};

/// Open-world active learning for LiDAR detection pools.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error.
#[derive(Parser)]
#[command(name = "owal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated experiment; writes trace.json, metrics.csv and selections.csv.
    ///
    /// The OWAL_SEED environment variable replaces the world and protocol seeds.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every frame of a prediction dump (olc, entropy, margin, gradnorm, random).
    Score {
        #[arg(long)]
        policy: Policy,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// Destination CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add per-class counts, mean confidences and the max-entropy flag.
        #[arg(long)]
        diagnostics: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pick k unlabeled frames from a prediction dump.
    Select {
        #[arg(long)]
        policy: Policy,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        k: usize,
        /// File with one labeled frame id per line.
        #[arg(long)]
        labeled: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Active-learning round; open-crb uses OLC in round 1 and CRB after.
        #[arg(long, default_value_t = 1)]
        round: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class AP and mAP_unk / mAP_k / mAP_H of predictions against truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(bytes: Vec<u8>, out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => write_atomic(&path, &bytes),
        None => Ok(std::io::stdout().lock().write_all(&bytes)?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let seed = std::env::var(SEED_ENV).ok();
            simulate(&config, &out, seed.as_deref()).map(|_| ())
        }
        Command::Score {
            policy,
            dump,
            catalog,
            out,
            diagnostics,
            seed,
        } => emit(score(policy, &dump, &catalog, diagnostics, seed)?, out),
        Command::Select {
            policy,
            dump,
            k,
            labeled,
            catalog,
            seed,
            round,
            out,
        } => {
            let args = SelectArgs {
                policy,
                dump: &dump,
                k,
                labeled: labeled.as_deref(),
                catalog: catalog.as_deref(),
                seed,
                round,
            };
            emit(select(&args)?, out)
        }
        Command::Evaluate {
            pred,
            truth,
            tau,
            catalog,
            out,
        } => emit(evaluate(&pred, &truth, tau, catalog.as_deref())?, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
