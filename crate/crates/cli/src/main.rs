mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qfolio::hamiltonian_sim::EvolutionMethod;
use qfolio::portfolio_qp::BudgetMode;

/// Simulated quantum (HHL) Markowitz portfolio optimization with classical
/// cross-checks.
#[derive(Debug, Parser)]
#[command(name = "qfolio", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Price CSV (`time,<asset>...`).
    #[arg(long, global = true, conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Synthetic factor-model panel of shape NxT (assets x price ticks).
    #[arg(long, global = true)]
    pub synthetic: Option<String>,
    /// Factor count of the synthetic panel.
    #[arg(long, global = true)]
    pub factors: Option<usize>,
    #[arg(long, global = true)]
    pub dt_period: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub mu_min: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub mu_max: Option<f64>,
    #[arg(long, global = true)]
    pub mu_steps: Option<usize>,
    /// Target return for `solve`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub mu: Option<f64>,
    /// Wealth.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub xi: Option<f64>,
    /// `unit` (1ᵀw = ξ) or `prices` (latest prices ᵀw = ξ).
    #[arg(long, global = true)]
    pub budget_mode: Option<BudgetMode>,
    /// Solve the raw KKT system instead of the row-balanced one.
    #[arg(long, global = true)]
    pub no_balance: bool,
    /// Condition cutoff; derived from the spectrum when omitted.
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    #[arg(long, global = true)]
    pub phase_bits: Option<usize>,
    /// `exact`, `trotter` or `density_exp`.
    #[arg(long, global = true)]
    pub backend: Option<EvolutionMethod>,
    /// Base evolution time of phase estimation.
    #[arg(long, global = true)]
    pub t0: Option<f64>,
    #[arg(long, global = true)]
    pub trotter_steps: Option<usize>,
    #[arg(long, global = true)]
    pub density_copies: Option<usize>,
    /// Swap-test shots (0 = exact readout).
    #[arg(long, global = true)]
    pub shots: Option<u64>,
    /// Measurement samples for the sampled portfolio.
    #[arg(long, global = true)]
    pub samples: Option<u64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantum and classical efficient frontier over a μ grid.
    Frontier,
    /// One HHL solve at `--mu` plus readout and a sampled portfolio.
    Solve,
    /// Run every acceptance criterion and write a pass/fail report.
    Verify,
    /// Dump the |χ⟩, |χ̃⟩ and covariance-density preparations for a panel.
    PrepDemo,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(std::env::args_os())
}

/// Parse arguments and dispatch; every failure maps to exit status 1 because
/// status 2 is reserved for partial frontiers.
fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<ExitCode> {
    let cfg = config::RunConfig::resolve(cli)?;
    match cli.command {
        Command::Frontier => commands::frontier(&cfg),
        Command::Solve => commands::solve(&cfg),
        Command::Verify => commands::verify(&cfg),
        Command::PrepDemo => commands::prep_demo(&cfg),
    }
}
