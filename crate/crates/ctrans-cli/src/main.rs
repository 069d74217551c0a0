//! `ctrans` — transport costs and controlled-path realizations for
//! time-varying linear systems, from the command line.
//!
//! Every command reads a system description (TOML), runs its pipeline, and
//! writes deterministic artifacts into the output directory.  Exit codes:
//! 0 on success, 1 on a computation or I/O failure, 2 on a usage error.
//! Failures emit a single machine-readable JSON object on stderr.

mod commands;
mod config;
mod emit;
mod measures;
mod sysfile;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::PlanMethod;
use crate::config::{GlobalFlags, RunConfig};
use crate::emit::Json;

/// Errors surfaced to the user, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid invocation or configuration (exit code 2).
    Usage(String),
    /// A failure while running the pipeline (exit code 1).
    Failure { kind: String, message: String },
}

impl CliError {
    pub fn usage(message: String) -> Self {
        CliError::Usage(message)
    }

    pub fn failure(kind: &str, message: String) -> Self {
        CliError::Failure {
            kind: kind.to_string(),
            message,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(message) => message,
            CliError::Failure { message, .. } => message,
        }
    }

    fn kind(&self) -> &str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Failure { kind, .. } => kind,
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure { .. } => 1,
        }
    }

    fn to_json(&self) -> String {
        Json::Obj(vec![(
            "error",
            Json::Obj(vec![
                ("kind", Json::str(self.kind())),
                ("message", Json::str(self.message())),
            ]),
        )])
        .render()
    }
}

impl From<ctrans::Error> for CliError {
    fn from(err: ctrans::Error) -> Self {
        CliError::failure("computation", err.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "ctrans",
    version,
    about = "Optimal transport with controlled-trajectory costs for time-varying linear systems"
)]
struct Cli {
    #[command(flatten)]
    flags: GlobalFlags,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the state-transition flow and report its diagnostics
    Flow {
        /// Evaluate the flow from time s (requires --t)
        #[arg(long, requires = "t")]
        s: Option<f64>,
        /// Evaluate the flow up to time t (requires --s)
        #[arg(long, requires = "s")]
        t: Option<f64>,
    },
    /// Check controllability via the rank condition and the Gramian
    Controllability,
    /// Compute the optimal point-to-point cost c_p(x, y)
    Cost {
        /// Source point, comma-separated coordinates
        #[arg(long)]
        x: String,
        /// Target point, comma-separated coordinates
        #[arg(long)]
        y: String,
        /// Also export the optimal control samples as CSV
        #[arg(long)]
        controls: bool,
    },
    /// Solve the static transport problem between two discrete measures
    Plan {
        /// Source measure CSV (weight, coordinates...)
        #[arg(long)]
        mu: PathBuf,
        /// Target measure CSV (weight, coordinates...)
        #[arg(long)]
        nu: PathBuf,
        /// Solver backend
        #[arg(long, value_enum, default_value = "simplex")]
        method: PlanMethod,
        /// Entropic regularization strength (sinkhorn only)
        #[arg(long)]
        eps: Option<f64>,
        /// Marginal feasibility tolerance for sinkhorn
        #[arg(long, default_value_t = 1e-9)]
        marginal_tol: f64,
        /// Sweep limit for sinkhorn
        #[arg(long, default_value_t = 10_000)]
        max_sweeps: usize,
    },
    /// Realize the optimal plan as controlled trajectories and export them
    Paths {
        /// Source measure CSV (weight, coordinates...)
        #[arg(long)]
        mu: PathBuf,
        /// Target measure CSV (weight, coordinates...)
        #[arg(long)]
        nu: PathBuf,
    },
    /// Verify that the static cost and the dynamic action agree
    BbVerify {
        /// Source measure CSV (weight, coordinates...)
        #[arg(long)]
        mu: PathBuf,
        /// Target measure CSV (weight, coordinates...)
        #[arg(long)]
        nu: PathBuf,
        /// Number of random admissible perturbations to test
        #[arg(long, default_value_t = 10)]
        perturbations: usize,
        /// Also export the realized trajectories as CSV
        #[arg(long)]
        trajectories: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    if let Some(threads) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|err| CliError::failure("threads", err.to_string()))?;
    }
    let ctx = commands::load_context(cfg)?;
    match cli.command {
        Command::Flow { s, t } => commands::cmd_flow(&ctx, s, t),
        Command::Controllability => commands::cmd_controllability(&ctx),
        Command::Cost { x, y, controls } => commands::cmd_cost(&ctx, &x, &y, controls),
        Command::Plan {
            mu,
            nu,
            method,
            eps,
            marginal_tol,
            max_sweeps,
        } => commands::cmd_plan(&ctx, &mu, &nu, method, eps, marginal_tol, max_sweeps),
        Command::Paths { mu, nu } => commands::cmd_paths(&ctx, &mu, &nu),
        Command::BbVerify {
            mu,
            nu,
            perturbations,
            trajectories,
        } => commands::cmd_bb_verify(&ctx, &mu, &nu, perturbations, trajectories),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", err.to_json());
        std::process::exit(err.exit_code());
    }
}
