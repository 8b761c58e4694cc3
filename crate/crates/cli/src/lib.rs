//! Command-line front end for the Hamiltonian Updates solver.
//!
//! Every command writes `manifest_<command>.txt` into its output directory;
//! `hu replay` reruns a manifest and checks the outputs.
//!
//! Exit codes: 0 feasible or complete, 2 infeasibility certificate, 3 an
//! iteration cap was reached, 4 replay mismatch, 1 any error.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub mod artifact;
pub mod campaign;
pub mod commands;
pub mod manifest;
pub mod stats;

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_CAP: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "hu", version, about = "Hamiltonian Updates QUBO relaxation solver")]
pub struct Cli {
    /// One log line per iteration.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[arg(long, global = true, env = "HU_OUT_DIR", default_value = "hu_out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random sparse instance.
    Gen(commands::GenArgs),
    /// Run one feasibility probe or a full binary search.
    Solve(commands::SolveArgs),
    /// Round a stored Hamiltonian's Gibbs state to binary vectors.
    Round(commands::RoundArgs),
    /// Quantum resource estimate for a solver ledger.
    Estimate(commands::EstimateArgs),
    /// Run a benchmark campaign.
    Bench(campaign::BenchArgs),
    /// Rerun a manifest and compare its outputs.
    Replay(commands::ReplayArgs),
}

/// Parses `argv` (program name first) and runs it; returns the exit code.
pub fn run_argv(argv: Vec<String>) -> Result<u8> {
    let cli = Cli::try_parse_from(&argv)?;
    run(cli, argv)
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<u8> {
    if !matches!(cli.command, Command::Replay(_)) {
        std::fs::create_dir_all(&cli.out_dir)?;
    }
    match &cli.command {
        Command::Gen(a) => commands::gen(a, &cli.out_dir, argv),
        Command::Solve(a) => commands::solve(a, &cli.out_dir, argv),
        Command::Round(a) => commands::round(a, &cli.out_dir, argv),
        Command::Estimate(a) => commands::estimate(a, &cli.out_dir, argv),
        Command::Bench(a) => campaign::bench(a, &cli.out_dir, argv),
        Command::Replay(a) => commands::replay(a),
    }
}
