use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use cemu::clock::{retain_freed_memory, tighten_timer_slack};

mod orchestrate;
mod roles;

#[derive(Parser)]
#[command(
    name = "cemu",
    version,
    about = "Collective communication emulator for data-parallel training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthetic training loop as one rank.
    Worker(roles::WorkerArgs),
    /// Impersonate every rank except the real one.
    Emulator(roles::EmulatorArgs),
    /// Time blocking collectives as one rank.
    Collbench(roles::CollbenchArgs),
    /// Run randomised correctness trials as one rank.
    Verify(roles::VerifyArgs),
    /// Per-call collective times, baseline against emulated.
    Microbench(orchestrate::MicrobenchArgs),
    /// Iteration times of the shipped profiles, baseline against emulated.
    E2e(orchestrate::E2eArgs),
    /// Iteration time as a function of injected per-call delay.
    Whatif(orchestrate::WhatifArgs),
}

/// Flags shared by the experiment drivers.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Job configuration; endpoints are replaced by free loopback ports.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Result CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Omit the timestamp comment from CSV output.
    #[arg(long)]
    pub deterministic: bool,
    /// Event log of the emulator.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Exit non-zero unless the acceptance thresholds hold.
    #[arg(long)]
    pub check: bool,
    /// Ring size when no config is given.
    #[arg(long, default_value_t = 2)]
    pub world_size: usize,
    /// Kill child processes after this many seconds.
    #[arg(long, default_value_t = 600)]
    pub timeout_s: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    tighten_timer_slack();
    retain_freed_memory();
    let result: Result<bool> = match cli.command {
        Command::Worker(a) => roles::worker(a).map(|_| true),
        Command::Emulator(a) => roles::emulator(a).map(|_| true),
        Command::Collbench(a) => roles::collbench(a).map(|_| true),
        Command::Verify(a) => roles::verify(a).map(|_| true),
        Command::Microbench(a) => orchestrate::microbench(a),
        Command::E2e(a) => orchestrate::e2e(a),
        Command::Whatif(a) => orchestrate::whatif(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("cemu: check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("cemu: {e:#}");
            ExitCode::FAILURE
        }
    }
}
