//! Sweep execution and result bundles.
//!
//! A sweep is the cartesian product of the configured ladders (state mesh,
//! penalty rate, control mesh); an empty sweep is a single cell. Cells are
//! independent solves and run on a small worker pool; artifacts are written
//! by the caller thread afterwards, in cell order, so bundle contents do
//! not depend on the worker count. Wall times go to a separate file
//! (`timings.csv`) to keep every other artifact byte-identical across
//! reruns.

use crate::config::{Experiment, ModelSpec};
use crate::{fmt_float, CliError};
use hjbvi::grid::Field;
use hjbvi::policy::PolicyField;
use hjbvi::scheme::{self, CflReport, Problem, StepStats};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

pub type Result<T> = std::result::Result<T, CliError>;

/// One point of the sweep lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub h: f64,
    pub rho: f64,
    pub mesh: f64,
}

/// Enumerate sweep cells in ladder order: state mesh outermost, penalty
/// rate, then control mesh.
pub fn cells(exp: &Experiment) -> Result<Vec<Cell>> {
    let hs: Vec<f64> = if exp.sweep_h.is_empty() {
        vec![exp.h.ok_or_else(|| {
            CliError::Config("scheme.h is required when sweep.h is not given".into())
        })?]
    } else {
        exp.sweep_h.clone()
    };
    let rhos: Vec<f64> = if exp.sweep_rho.is_empty() {
        vec![exp.rho]
    } else {
        exp.sweep_rho.clone()
    };
    let meshes: Vec<f64> = if exp.sweep_mesh.is_empty() {
        vec![exp.model.control_mesh()]
    } else {
        exp.sweep_mesh.clone()
    };
    let mut out = Vec::with_capacity(hs.len() * rhos.len() * meshes.len());
    for &h in &hs {
        for &rho in &rhos {
            for &mesh in &meshes {
                out.push(Cell { h, rho, mesh });
            }
        }
    }
    Ok(out)
}

/// Reject configurations with sweep axes where a single run is expected.
pub fn ensure_single_cell(exp: &Experiment) -> Result<()> {
    if !exp.sweep_h.is_empty() || !exp.sweep_rho.is_empty() || !exp.sweep_mesh.is_empty() {
        return Err(CliError::Config(
            "this command runs a single cell; drop the sweep.* keys or use `sweep`".into(),
        ));
    }
    Ok(())
}

/// Everything one finished cell contributes to the bundle.
pub struct CellOutput {
    pub cell: Cell,
    pub value: f64,
    pub cfl: CflReport,
    pub step_stats: Vec<StepStats>,
    pub field: Field,
    pub policy: PolicyField,
    pub snapshots: Vec<(usize, Field)>,
    pub policy_snapshots: Vec<(usize, PolicyField)>,
    pub wall_seconds: f64,
}

/// The model with this cell's control mesh and the probe point installed.
pub fn cell_model(exp: &Experiment, cell: &Cell) -> ModelSpec {
    let mut model = exp.model.clone();
    match &mut model {
        ModelSpec::Investment(m) => m.control_mesh = cell.mesh,
        ModelSpec::Consumption(m) => m.control_mesh = cell.mesh,
    }
    model
}

/// Build the evolution problem and the probe's flat node index for a cell;
/// off-grid probes fail here rather than being interpolated.
pub fn cell_problem(exp: &Experiment, cell: &Cell) -> Result<(Problem, usize)> {
    let model = cell_model(exp, cell);
    let (problem, idx) = match &model {
        ModelSpec::Investment(m) => {
            let p = m.build_problem(cell.h)?;
            let idx = m.spot_index(&p.grid)?;
            (p, idx)
        }
        ModelSpec::Consumption(m) => {
            let p = m.build_problem(cell.h)?;
            let idx = m.spot_index(&p.grid)?;
            (p, idx)
        }
    };
    Ok((problem, idx))
}

/// Solve one cell.
pub fn run_cell(exp: &Experiment, cell: &Cell) -> Result<CellOutput> {
    let start = Instant::now();
    let (problem, idx) = cell_problem(exp, cell)?;
    let config = exp.scheme_config(cell.rho);
    let out = scheme::run(&problem, &config)?;
    Ok(CellOutput {
        cell: *cell,
        value: out.final_field.values()[idx],
        cfl: out.cfl,
        step_stats: out.steps,
        field: out.final_field,
        policy: out.final_policy,
        snapshots: out.snapshots,
        policy_snapshots: out.policy_snapshots,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Run every cell on `jobs` workers; results come back in cell order.
pub fn run_all(exp: &Experiment, cells: &[Cell], jobs: usize) -> Vec<Result<CellOutput>> {
    let jobs = jobs.max(1).min(cells.len().max(1));
    if jobs == 1 {
        return cells.iter().map(|c| run_cell(exp, c)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<CellOutput>>>> =
        (0..cells.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let result = run_cell(exp, &cells[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every claimed slot"))
        .collect()
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Render the solution field (or a snapshot) as coordinate columns plus a
/// value column.
fn field_csv(model: &ModelSpec, field: &Field) -> String {
    let grid = field.grid();
    let mut text = String::new();
    let _ = writeln!(text, "{},value", model.coord_names().join(","));
    let mut x = vec![0.0; grid.dim()];
    for (i, v) in field.values().iter().enumerate() {
        grid.coords_into(i, &mut x);
        for c in &x {
            let _ = write!(text, "{},", fmt_float(*c));
        }
        let _ = writeln!(text, "{}", fmt_float(*v));
    }
    text
}

fn steps_csv(stats: &[StepStats]) -> String {
    let mut text = String::from("step,t,iterations,final_delta,final_residual\n");
    for s in stats {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            s.index,
            fmt_float(s.t),
            s.iterations,
            fmt_float(s.final_delta),
            fmt_float(s.final_residual)
        );
    }
    text
}

/// Header of `cells.csv`.
pub const CELLS_HEADER: &str = "cell,h,rho,control_mesh,value,steps,max_iterations,\
total_iterations,worst_residual,cfl_dt,cfl_radius,cfl_gamma1,cfl_gamma2,\
cfl_global_margin,cfl_node_margin,certified";

fn cells_csv(results: &[CellOutput]) -> String {
    let mut text = String::from(CELLS_HEADER);
    text.push('\n');
    for (i, r) in results.iter().enumerate() {
        let max_iters = r.step_stats.iter().map(|s| s.iterations).max().unwrap_or(0);
        let total_iters: usize = r.step_stats.iter().map(|s| s.iterations).sum();
        let worst_res = r
            .step_stats
            .iter()
            .map(|s| s.final_residual)
            .fold(0.0f64, f64::max);
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            i,
            fmt_float(r.cell.h),
            fmt_float(r.cell.rho),
            fmt_float(r.cell.mesh),
            fmt_float(r.value),
            r.step_stats.len(),
            max_iters,
            total_iters,
            fmt_float(worst_res),
            fmt_float(r.cfl.dt),
            fmt_float(r.cfl.radius),
            fmt_float(r.cfl.gamma1),
            fmt_float(r.cfl.gamma2),
            fmt_float(r.cfl.global_margin),
            fmt_float(r.cfl.node_margin),
            r.cfl.certified
        );
    }
    text
}

/// Write the full result bundle under `dir`:
/// `resolved_config.txt`, `cells.csv`, `timings.csv` and one `cell_<k>/`
/// directory per cell with the solution, step statistics and any snapshots.
pub fn write_bundle(exp: &Experiment, results: &[CellOutput], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_file(&dir.join("resolved_config.txt"), &exp.resolved_text())?;
    write_file(&dir.join("cells.csv"), &cells_csv(results))?;

    let mut timings = String::from("cell,wall_seconds\n");
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(timings, "{},{:.3}", i, r.wall_seconds);
    }
    write_file(&dir.join("timings.csv"), &timings)?;

    for (i, r) in results.iter().enumerate() {
        let cell_dir = dir.join(format!("cell_{i:03}"));
        std::fs::create_dir_all(&cell_dir).map_err(|e| io_err(&cell_dir, e))?;
        write_file(&cell_dir.join("solution.csv"), &field_csv(&exp.model, &r.field))?;
        write_file(&cell_dir.join("steps.csv"), &steps_csv(&r.step_stats))?;
        for (step, field) in &r.snapshots {
            write_file(
                &cell_dir.join(format!("snapshot_{step:04}.csv")),
                &field_csv(&exp.model, field),
            )?;
        }
    }
    Ok(())
}
