//! The scheme verification suite: randomized monotonicity trials, the a
//! priori growth bound along a full march, the driver slant identity, and
//! (on instances small enough for the reference solver) agreement between
//! policy iteration and a control-wise fixed point.

use crate::config::{Experiment, ModelSpec};
use crate::experiment::{self, Cell};
use crate::CliError;
use hjbvi::oracle::{self, OracleReport};
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

/// Largest grid the reference fixed-point comparison runs on; beyond it the
/// probe is skipped with a note instead of erroring.
const COMPARISON_NODE_CAP: usize = 50;

/// Run the suite on the configured single-cell instance, print one line per
/// probe, optionally write the reports as CSV, and return the process exit
/// code (0 when every probe passed, 1 otherwise).
pub fn run_suite(exp: &Experiment, out: Option<PathBuf>) -> Result<i32> {
    experiment::ensure_single_cell(exp)?;
    let cell: Cell = experiment::cells(exp)?[0];
    let (problem, _) = experiment::cell_problem(exp, &cell)?;
    let config = exp.scheme_config(cell.rho);

    let mut reports: Vec<OracleReport> = Vec::new();
    reports.push(oracle::probe_monotonicity(
        &problem,
        &config,
        exp.verify_trials,
        exp.seed,
    )?);
    reports.push(oracle::probe_apriori(&problem, &config)?);
    reports.push(slant_report(exp)?);
    if problem.grid.num_nodes() <= COMPARISON_NODE_CAP {
        reports.push(oracle::probe_comparison(
            &problem,
            &config,
            exp.verify_eps,
            exp.seed + 1,
        )?);
    } else {
        println!(
            "SKIP comparison: {} nodes exceed the {}-node reference-solver cap",
            problem.grid.num_nodes(),
            COMPARISON_NODE_CAP
        );
    }

    for report in &reports {
        println!("{report}");
    }

    if let Some(path) = out {
        let mut text = String::from(OracleReport::csv_header());
        text.push('\n');
        for report in &reports {
            text.push_str(&report.csv_row());
            text.push('\n');
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
            }
        }
        std::fs::write(&path, &text)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }

    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}

/// Slant-identity probe at model-appropriate sample points: mid-domain
/// state, an interior control, and value samples inside the driver's
/// admissible range.
fn slant_report(exp: &Experiment) -> Result<OracleReport> {
    let report = match &exp.model {
        ModelSpec::Investment(m) => oracle::probe_slant(
            "investment driver",
            &m.driver(),
            &[0.5],
            &[0.5 * m.x_max],
            &[-0.9, -0.3, 0.0, 0.5, 0.9],
            0.25,
        )?,
        ModelSpec::Consumption(m) => oracle::probe_slant(
            "consumption driver",
            &m.driver(),
            &[0.4, 0.4],
            &[0.5 * m.x_max, 0.5 * m.v_max],
            &[-2.0, -1.0, -0.25],
            0.0,
        )?,
    };
    Ok(report)
}
