//! `idroop`: steady state, H2 performance, stability certificates, modal
//! norms, simulations and parameter sweeps from a JSON network document.
//!
//! Exit codes: 0 success, 1 usage or validation failure, 2 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "idroop",
    version,
    about = "Frequency dynamics of inverter-controlled power networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Network document (JSON)
    #[arg(long)]
    pub network: PathBuf,
    /// Switch every inverter to this mode: cp, dc, vi or idroop
    #[arg(long)]
    pub mode: Option<String>,
    /// Print JSON instead of text
    #[arg(long)]
    pub json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synchronous frequency, steady state and the optimality check
    SteadyState {
        #[command(flatten)]
        common: Common,
    },
    /// Step or noise response; writes trajectory.csv and metrics.json
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Time step in seconds (overrides the document)
        #[arg(long)]
        dt: Option<f64>,
        /// Run length in seconds (overrides the document)
        #[arg(long)]
        horizon: Option<f64>,
        /// Drive the noise inputs
        #[arg(long)]
        stochastic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every n-th sample
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Squared H2 norm (Gramian or frequency-weighted, chosen automatically)
    H2 {
        #[command(flatten)]
        common: Common,
        /// Also evaluate the analytic formula (homogeneous DC or CP fleets)
        #[arg(long)]
        closed_form: bool,
    },
    /// Decentralized stability certificate for iDroop buses
    Stability {
        #[command(flatten)]
        common: Common,
    },
    /// Laplacian eigenvalues and per-mode H2 norms (homogeneous fleets)
    Modal {
        #[command(flatten)]
        common: Common,
    },
    /// Metric over a grid of inverter parameters; writes sweep.csv
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep spec (JSON)
        #[arg(long)]
        sweep: PathBuf,
        /// Output directory (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time step in seconds (overrides the document)
        #[arg(long)]
        dt: Option<f64>,
        /// Run length in seconds (overrides the document)
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Kron-reduce load buses and write the generator-only document
    Kron {
        #[command(flatten)]
        common: Common,
        /// Output file (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::SteadyState { common } => commands::steady_state(&common),
        Command::Simulate {
            common,
            out,
            dt,
            horizon,
            stochastic,
            seed,
            stride,
        } => commands::simulate(
            &common,
            &commands::SimulateArgs {
                out,
                dt,
                horizon,
                stochastic,
                seed,
                stride,
            },
        ),
        Command::H2 { common, closed_form } => commands::h2(&common, closed_form),
        Command::Stability { common } => commands::stability(&common),
        Command::Modal { common } => commands::modal(&common),
        Command::Sweep {
            common,
            sweep,
            out,
            dt,
            horizon,
        } => commands::sweep(&common, &sweep, out.as_deref(), dt, horizon),
        Command::Kron { common, out } => commands::kron(&common, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
