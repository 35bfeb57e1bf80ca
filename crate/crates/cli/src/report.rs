//! Convergence tables and policy heatmaps.
//!
//! Tables are computed from a bundle's `cells.csv`, so they can be
//! regenerated without re-running solves; the heatmap runs its own single
//! solve because it needs the minimizing policy, which bundles do not
//! store.

use crate::config::Experiment;
use crate::experiment::{self, Cell};
use crate::{fmt_float, CliError};
use hjbvi::free_boundary::{self, FreeBoundaryParams};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, CliError>;

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// One parsed row of `cells.csv`, keeping the axis columns as canonical
/// strings so exact matching survives the round trip through text.
struct CellRow {
    axes: [String; 3],
    value: f64,
    value_str: String,
}

const AXES: [&str; 3] = ["h", "rho", "control_mesh"];

fn read_cells(bundle: &Path) -> Result<Vec<CellRow>> {
    let path = bundle.join("cells.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad(format!("{} is empty", path.display())))?
        .split(',')
        .collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| bad(format!("{} lacks a {name:?} column", path.display())))
    };
    let (ch, crho, cmesh, cval) = (col("h")?, col("rho")?, col("control_mesh")?, col("value")?);
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let need = [ch, crho, cmesh, cval].into_iter().max().unwrap();
        if fields.len() <= need {
            return Err(bad(format!("{} row {} is short", path.display(), k + 2)));
        }
        let value: f64 = fields[cval]
            .parse()
            .map_err(|_| bad(format!("{} row {}: bad value field", path.display(), k + 2)))?;
        rows.push(CellRow {
            axes: [
                fields[ch].to_string(),
                fields[crho].to_string(),
                fields[cmesh].to_string(),
            ],
            value,
            value_str: fields[cval].to_string(),
        });
    }
    Ok(rows)
}

/// Build the increment/ratio table along `axis` from a bundle, holding the
/// other axes fixed. `fixes` are `key=value` filters; the value is parsed
/// and canonicalized before matching so `1/320` matches the stored column.
/// For the penalty axis a regression footer estimates the contact constant.
pub fn table(bundle: &Path, axis: &str, fixes: &[String], out: Option<PathBuf>) -> Result<PathBuf> {
    let axis_idx = AXES
        .iter()
        .position(|a| *a == axis)
        .ok_or_else(|| bad(format!("axis must be one of h, rho, control_mesh; got {axis:?}")))?;

    let mut rows = read_cells(bundle)?;
    for fix in fixes {
        let (key, value) = fix
            .split_once('=')
            .ok_or_else(|| bad(format!("fix {fix:?} is not of the form key=value")))?;
        let idx = AXES
            .iter()
            .position(|a| *a == key.trim())
            .ok_or_else(|| bad(format!("fix key must be one of h, rho, control_mesh; got {key:?}")))?;
        let canonical = fmt_float(crate::config::parse_number(value)?);
        rows.retain(|r| r.axes[idx] == canonical);
    }
    if rows.is_empty() {
        return Err(bad("no cells match the requested axis and filters"));
    }
    for other in 0..3 {
        if other == axis_idx {
            continue;
        }
        let first = &rows[0].axes[other];
        if rows.iter().any(|r| &r.axes[other] != first) {
            return Err(bad(format!(
                "cells vary along {} as well; pin it with --fix {}=<value>",
                AXES[other], AXES[other]
            )));
        }
    }
    let mut seen = HashSet::new();
    for r in &rows {
        if !seen.insert(r.axes[axis_idx].clone()) {
            return Err(bad(format!(
                "duplicate {axis} = {} after filtering; pin the other axes with --fix",
                r.axes[axis_idx]
            )));
        }
    }

    let mut text = String::new();
    let _ = writeln!(text, "{axis},value,increment,ratio");
    let mut prev_value: Option<f64> = None;
    let mut prev_inc: Option<f64> = None;
    for r in &rows {
        let inc = prev_value.map(|p| r.value - p);
        let ratio = match (prev_inc, inc) {
            (Some(a), Some(b)) if b != 0.0 => Some(a / b),
            _ => None,
        };
        let _ = writeln!(
            text,
            "{},{},{},{}",
            r.axes[axis_idx],
            r.value_str,
            inc.map(fmt_float).unwrap_or_default(),
            ratio.map(fmt_float).unwrap_or_default()
        );
        prev_value = Some(r.value);
        if inc.is_some() {
            prev_inc = inc;
        }
    }

    if axis == "rho" {
        let samples: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| {
                let rho: f64 = r.axes[1].parse().map_err(|_| bad("bad rho field"))?;
                Ok((rho, r.value))
            })
            .collect::<Result<_>>()?;
        if samples.len() >= 3 {
            let fit = free_boundary::estimate_c0(&samples)?;
            let _ = writeln!(text, "# penalty fit: value ~ intercept - c0 / rho");
            let _ = writeln!(text, "# c0 = {}", fmt_float(fit.c0));
            let _ = writeln!(text, "# intercept = {}", fmt_float(fit.intercept));
            let _ = writeln!(text, "# max_residual = {}", fmt_float(fit.max_residual));
        } else {
            let _ = writeln!(text, "# penalty fit skipped: needs at least 3 ladder points");
        }
    }

    let path = out.unwrap_or_else(|| bundle.join(format!("table_{axis}.csv")));
    std::fs::write(&path, &text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Solve one cell and export the feedback policy at a time level: state
/// coordinates, the minimizing control components and whether the node lies
/// in the contact band (always false without a penalty term).
pub fn heatmap(exp: &Experiment, step: Option<usize>, out: Option<PathBuf>) -> Result<PathBuf> {
    experiment::ensure_single_cell(exp)?;
    let cell: Cell = experiment::cells(exp)?[0];
    if exp.rho > 0.0 && exp.fb_c0.is_none() {
        return Err(bad(
            "free_boundary.c0 is required to flag stopped nodes when scheme.rho > 0",
        ));
    }
    let result = experiment::run_cell(exp, &cell)?;
    let (problem, _) = experiment::cell_problem(exp, &cell)?;

    let (field, policy, t) = match step {
        None => (
            &result.field,
            &result.policy,
            problem.horizon,
        ),
        Some(n) => {
            let f = result
                .snapshots
                .iter()
                .find(|(s, _)| *s == n)
                .map(|(_, f)| f);
            let p = result
                .policy_snapshots
                .iter()
                .find(|(s, _)| *s == n)
                .map(|(_, p)| p);
            match (f, p) {
                (Some(f), Some(p)) => (f, p, result.cfl.dt * n as f64),
                _ => {
                    return Err(bad(format!(
                        "no snapshot at step {n}; set scheme.snapshot_stride so it is captured"
                    )))
                }
            }
        }
    };

    let stopped: HashSet<usize> = if exp.rho > 0.0 {
        let params = FreeBoundaryParams::new(exp.fb_c0.unwrap(), exp.fb_rate)?;
        let zeta = problem.obstacle.zeta.clone();
        let zeta_fn = move |s: f64, x: &[f64]| zeta(s, x);
        let set = free_boundary::gamma_rho(&[(t, field)], &zeta_fn, &params, exp.rho)?;
        set.members().iter().map(|&(_, node)| node).collect()
    } else {
        HashSet::new()
    };

    let grid = field.grid();
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{},{},stopped",
        exp.model.coord_names().join(","),
        exp.model.control_names().join(",")
    );
    let mut x = vec![0.0; grid.dim()];
    for i in 0..grid.num_nodes() {
        grid.coords_into(i, &mut x);
        for c in &x {
            let _ = write!(text, "{},", fmt_float(*c));
        }
        for comp in problem.controls.get(policy.as_slice()[i]) {
            let _ = write!(text, "{},", fmt_float(*comp));
        }
        let _ = writeln!(text, "{}", stopped.contains(&i));
    }

    let path = out.unwrap_or_else(|| exp.out.join("heatmap.csv"));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    std::fs::write(&path, &text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}
