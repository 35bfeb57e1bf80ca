//! Experiment driver for the solver library: single solves, parameter
//! sweeps, convergence tables, policy heatmaps, the verification suite and
//! a time-step certification check.
//!
//! Exit codes: 0 success, 1 verification or internal failure, 2 time-step
//! (CFL) failure, 3 solver non-convergence, 4 configuration error.

mod config;
mod experiment;
mod report;
mod verify;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use hjbvi::SolverError;
use std::path::PathBuf;

/// Canonical float formatting of every CSV artifact: 9 significant digits,
/// locale-independent.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

/// One error type across the front end, mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad config file, flag or key combination (exit 4).
    Config(String),
    /// The solver rejected or failed the run (exit 2, 3 or 4 by kind).
    Solver(SolverError),
    /// Filesystem trouble while writing artifacts (exit 1).
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Solver(e) => write!(f, "{e}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        CliError::Solver(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 4,
            CliError::Solver(SolverError::CflViolation { .. }) => 2,
            CliError::Solver(SolverError::NonConvergence { .. }) => 3,
            CliError::Solver(SolverError::InvalidConfig(_)) => 4,
            CliError::Solver(_) => 1,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hjbvi",
    version,
    about = "Solve, sweep and report on the bundled stochastic control experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a single solve and write a one-cell result bundle.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `out` key.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a config entry, e.g. --override scheme.h=1/80 (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the configured sweep and write the result bundle.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for independent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Build an increment/ratio table from a bundle's cells.csv.
    Table {
        /// Result-bundle directory produced by solve or sweep.
        #[arg(long)]
        bundle: PathBuf,
        /// Ladder to tabulate along: h, rho or control_mesh.
        #[arg(long)]
        axis: String,
        /// Pin another axis, e.g. --fix rho=16e3 (repeatable).
        #[arg(long = "fix", value_name = "KEY=VALUE")]
        fixes: Vec<String>,
        /// Output file; defaults to table_<axis>.csv inside the bundle.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one cell and export the feedback policy with stopped flags.
    Heatmap {
        #[arg(long)]
        config: PathBuf,
        /// Time level (completed steps); defaults to the final level and
        /// requires a snapshot stride that captures it otherwise.
        #[arg(long)]
        step: Option<usize>,
        /// Output file; defaults to heatmap.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the scheme verification suite on the configured instance.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Optional CSV file for the probe reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Certify the explicit part of the step without marching.
    CflCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors; anything else is a
            // configuration problem and must not collide with the CFL code.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 4,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.cmd {
        Cmd::Solve { config, out, overrides } => {
            let exp = config::load(&config, &overrides, out)?;
            experiment::ensure_single_cell(&exp)?;
            run_and_write(&exp, 1)
        }
        Cmd::Sweep { config, out, jobs, overrides } => {
            let exp = config::load(&config, &overrides, out)?;
            run_and_write(&exp, jobs)
        }
        Cmd::Table { bundle, axis, fixes, out } => {
            let path = report::table(&bundle, &axis, &fixes, out)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Cmd::Heatmap { config, step, out, overrides } => {
            let exp = config::load(&config, &overrides, None)?;
            let path = report::heatmap(&exp, step, out)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Cmd::Verify { config, out, overrides } => {
            let exp = config::load(&config, &overrides, None)?;
            verify::run_suite(&exp, out)
        }
        Cmd::CflCheck { config, overrides } => {
            let exp = config::load(&config, &overrides, None)?;
            experiment::ensure_single_cell(&exp)?;
            let cell = experiment::cells(&exp)?[0];
            let (problem, _) = experiment::cell_problem(&exp, &cell)?;
            let scheme_cfg = exp.scheme_config(cell.rho);
            let report = hjbvi::scheme::check_cfl(&problem, &scheme_cfg)?;
            println!("dt = {}", fmt_float(report.dt));
            println!("radius = {}", fmt_float(report.radius));
            println!("gamma1 = {}", fmt_float(report.gamma1));
            println!("gamma2 = {}", fmt_float(report.gamma2));
            println!("global_margin = {}", fmt_float(report.global_margin));
            println!("node_margin = {}", fmt_float(report.node_margin));
            println!("certified = {}", report.certified);
            Ok(if report.certified { 0 } else { 2 })
        }
    }
}

fn run_and_write(exp: &config::Experiment, jobs: usize) -> Result<i32, CliError> {
    let cells = experiment::cells(exp)?;
    let results = experiment::run_all(exp, &cells, jobs);
    let mut done = Vec::with_capacity(results.len());
    for (k, result) in results.into_iter().enumerate() {
        match result {
            Ok(r) => done.push(r),
            Err(e) => {
                let c = &cells[k];
                eprintln!(
                    "cell {k} (h = {}, rho = {}, control_mesh = {}) failed",
                    c.h, c.rho, c.mesh
                );
                return Err(e);
            }
        }
    }
    experiment::write_bundle(exp, &done, &exp.out)?;
    for (k, r) in done.iter().enumerate() {
        let max_iters = r.step_stats.iter().map(|s| s.iterations).max().unwrap_or(0);
        println!(
            "cell {k}: h = {}, rho = {}, control_mesh = {}, value = {}, steps = {}, max iterations = {max_iters}",
            r.cell.h,
            r.cell.rho,
            r.cell.mesh,
            fmt_float(r.value),
            r.step_stats.len()
        );
    }
    println!("wrote {}", exp.out.display());
    Ok(0)
}
