//! Howard policy iteration with semismooth slant linearization.
//!
//! One backward-Euler time step leads to a per-node minimization over a
//! finite set of control samples of a scalar residual that is nondecreasing
//! in the node's own value. [`iterate`] alternates
//!
//! 1. *improvement*: at the current iterate, pick for every node the control
//!    with the smallest residual (lowest index on ties), and
//! 2. *evaluation*: solve one linear system with the slant (generalized
//!    Jacobian) of the residual map under the frozen policy, stepping the
//!    iterate by the full Newton increment.
//!
//! The loop stops when consecutive iterates agree in the sup norm to the
//! requested tolerance, and fails loudly with the full delta history
//! otherwise. Each slant system is checked for strict row-wise diagonal
//! dominance before solving; tridiagonal systems go through the direct
//! sweep, everything else through Gauss-Seidel.

use crate::error::{Result, SolverError};
use crate::linalg::{sup_norm, CsrMatrix};

/// Finite sample of the control set. Samples are points in control space,
/// addressed by dense `u32` indices so policies store compactly.
#[derive(Clone, Debug)]
pub struct ControlGrid {
    dim: usize,
    samples: Vec<f64>,
}

impl ControlGrid {
    /// A single fixed control (possibly zero-dimensional for uncontrolled
    /// problems).
    pub fn single(point: Vec<f64>) -> Self {
        Self {
            dim: point.len(),
            samples: point,
        }
    }

    /// Uniform samples of the interval `[lo, hi]`, endpoints included.
    pub fn box1d(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 || (count == 1 && hi != lo) || hi < lo {
            return Err(SolverError::InvalidConfig(format!(
                "control interval [{lo}, {hi}] with {count} samples is invalid"
            )));
        }
        let mut samples = Vec::with_capacity(count);
        if count == 1 {
            samples.push(lo);
        } else {
            let step = (hi - lo) / (count - 1) as f64;
            for i in 0..count {
                samples.push(lo + i as f64 * step);
            }
        }
        Ok(Self { dim: 1, samples })
    }

    /// Lattice of mesh size `step` on the triangle
    /// `{(a, b): a >= 0, b >= 0, a + b <= 1}`. `1/step` must be an integer.
    /// Samples are ordered lexicographically in `(a, b)`.
    pub fn simplex2d(step: f64) -> Result<Self> {
        if !(step > 0.0) || step > 1.0 {
            return Err(SolverError::InvalidConfig(format!(
                "simplex mesh size {step} must lie in (0, 1]"
            )));
        }
        let n = (1.0 / step).round();
        if ((1.0 / step) - n).abs() > 1e-9 {
            return Err(SolverError::InvalidConfig(format!(
                "simplex mesh size {step} must divide 1"
            )));
        }
        let n = n as usize;
        let mut samples = Vec::new();
        for i in 0..=n {
            for j in 0..=(n - i) {
                samples.push(i as f64 * step);
                samples.push(j as f64 * step);
            }
        }
        Ok(Self { dim: 2, samples })
    }

    /// Dimension of one control point.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            1
        } else {
            self.samples.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinates of sample `c`.
    pub fn get(&self, c: u32) -> &[f64] {
        let d = self.dim;
        &self.samples[c as usize * d..(c as usize + 1) * d]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |c| self.get(c as u32))
    }
}

/// One chosen control sample per grid node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyField(pub Vec<u32>);

impl PolicyField {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// What one time step's policy iteration has to provide.
///
/// The residual is the time-step-scaled nonlinear map whose root is the next
/// time level: roughly `(y - u_prev) - dt * (implicit terms) - dt * (frozen
/// explicit terms)`, nondecreasing in `y` for admissible time steps.
pub trait PolicyProblem {
    fn num_nodes(&self) -> usize;
    fn num_controls(&self) -> usize;

    /// Scaled residual of control `c` at node `i`, evaluated at iterate `u`.
    fn residual_at(&mut self, i: usize, c: u32, u: &[f64]) -> Result<f64>;

    /// Rows of the slant operator of the residual map at iterate `u` under
    /// the frozen `policy` (one row per node, diagonal entry required).
    fn slant_rows(&mut self, policy: &[u32], u: &[f64]) -> Result<Vec<Vec<(usize, f64)>>>;

    /// Improvement pass: fill `policy[i]` with the residual-minimizing
    /// control at node `i` (lowest index on ties) and `ghat[i]` with that
    /// minimal residual. The default scans every control per node.
    fn improve(&mut self, u: &[f64], policy: &mut [u32], ghat: &mut [f64]) -> Result<()> {
        let nc = self.num_controls();
        debug_assert!(nc > 0);
        for i in 0..self.num_nodes() {
            let mut best_c = 0u32;
            let mut best = self.residual_at(i, 0, u)?;
            for c in 1..nc as u32 {
                let r = self.residual_at(i, c, u)?;
                if r < best {
                    best = r;
                    best_c = c;
                }
            }
            policy[i] = best_c;
            ghat[i] = best;
        }
        Ok(())
    }
}

/// Indices of all controls whose residual at node `i` comes within `slack`
/// of the minimum. Used by diagnostics that care about near-optimal sets
/// rather than the single representative the iteration picks.
pub fn argmin_set(
    problem: &mut dyn PolicyProblem,
    i: usize,
    u: &[f64],
    slack: f64,
) -> Result<Vec<u32>> {
    let nc = problem.num_controls();
    let mut vals = Vec::with_capacity(nc);
    let mut best = f64::INFINITY;
    for c in 0..nc as u32 {
        let r = problem.residual_at(i, c, u)?;
        best = best.min(r);
        vals.push(r);
    }
    Ok(vals
        .iter()
        .enumerate()
        .filter(|&(_, &r)| r <= best + slack)
        .map(|(c, _)| c as u32)
        .collect())
}

/// Stopping rule and safeguards for [`iterate`].
#[derive(Clone, Copy, Debug)]
pub struct IterationSettings {
    /// Stop when consecutive iterates differ by at most this in sup norm.
    pub tol: f64,
    pub max_iters: usize,
    /// Least acceptable diagonal-dominance margin (`diag - sum |off|`) of
    /// the slant rows; `1 - dt * mu` with `mu` the driver's monotonicity
    /// bound for the time-stepping problems.
    pub required_margin: f64,
}

/// Convergence record of one policy iteration run.
#[derive(Clone, Debug)]
pub struct IterationStats {
    /// Number of linear solves performed.
    pub iterations: usize,
    /// Sup-norm Newton increments, one per iteration.
    pub deltas: Vec<f64>,
    /// Sup norm of the minimized residual at the returned iterate.
    pub final_residual: f64,
}

/// Result of [`iterate`]: the fixed point, the minimizing policy there, and
/// the convergence record.
#[derive(Clone, Debug)]
pub struct PolicyIterationOutcome {
    pub solution: Vec<f64>,
    pub policy: PolicyField,
    pub stats: IterationStats,
}

/// Cap on Gauss-Seidel sweeps inside one policy-evaluation solve.
const MAX_GS_SWEEPS: usize = 20_000;

/// Check each slant row for a positive diagonal, nonpositive off-diagonals,
/// and a dominance margin of at least `required`; returns the worst margin.
pub fn check_slant_rows(rows: &[Vec<(usize, f64)>], required: f64) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for (i, row) in rows.iter().enumerate() {
        let mut diag = 0.0;
        let mut off = 0.0;
        for &(j, v) in row {
            if j == i {
                diag += v;
            } else {
                if v > 1e-14 {
                    return Err(SolverError::DominanceViolation {
                        row: i,
                        margin: -v,
                    });
                }
                off += v.abs();
            }
        }
        let margin = diag - off;
        if diag <= 0.0 || margin < required - 1e-9 {
            return Err(SolverError::DominanceViolation { row: i, margin });
        }
        worst = worst.min(margin);
    }
    Ok(worst)
}

fn solve_slant(rows: Vec<Vec<(usize, f64)>>, rhs: &[f64]) -> Result<Vec<f64>> {
    let m = CsrMatrix::from_rows(rows)?;
    if m.is_tridiagonal() {
        m.to_tridiag()?.solve(rhs)
    } else {
        m.gauss_seidel(rhs, None, MAX_GS_SWEEPS)
    }
}

/// Run policy iteration from the start iterate `u0` until consecutive
/// iterates agree to `settings.tol` in the sup norm.
pub fn iterate(
    problem: &mut dyn PolicyProblem,
    u0: &[f64],
    settings: &IterationSettings,
) -> Result<PolicyIterationOutcome> {
    let n = problem.num_nodes();
    debug_assert_eq!(u0.len(), n);
    if settings.max_iters == 0 {
        return Err(SolverError::InvalidConfig(
            "policy iteration needs at least one iteration".into(),
        ));
    }
    let mut u = u0.to_vec();
    let mut policy = vec![0u32; n];
    let mut ghat = vec![0.0; n];
    let mut deltas = Vec::new();

    for _ in 0..settings.max_iters {
        problem.improve(&u, &mut policy, &mut ghat)?;
        let rows = problem.slant_rows(&policy, &u)?;
        check_slant_rows(&rows, settings.required_margin)?;
        let neg: Vec<f64> = ghat.iter().map(|&g| -g).collect();
        let step = solve_slant(rows, &neg)?;
        let delta = sup_norm(&step);
        for (ui, si) in u.iter_mut().zip(&step) {
            *ui += si;
        }
        deltas.push(delta);
        if delta <= settings.tol {
            problem.improve(&u, &mut policy, &mut ghat)?;
            return Ok(PolicyIterationOutcome {
                solution: u,
                policy: PolicyField(policy),
                stats: IterationStats {
                    iterations: deltas.len(),
                    final_residual: sup_norm(&ghat),
                    deltas,
                },
            });
        }
    }
    let last_delta = *deltas.last().unwrap();
    Err(SolverError::NonConvergence {
        max_iters: settings.max_iters,
        last_delta,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(tol: f64, max_iters: usize) -> IterationSettings {
        IterationSettings {
            tol,
            max_iters,
            required_margin: 0.5,
        }
    }

    /// Decoupled two-control problem: residuals `u - 1` and `2 (u - 3)`.
    /// The pointwise minimum vanishes at `u = 3` under the second control.
    struct TwoBranches {
        n: usize,
    }

    impl PolicyProblem for TwoBranches {
        fn num_nodes(&self) -> usize {
            self.n
        }
        fn num_controls(&self) -> usize {
            2
        }
        fn residual_at(&mut self, i: usize, c: u32, u: &[f64]) -> Result<f64> {
            Ok(match c {
                0 => u[i] - 1.0,
                _ => 2.0 * (u[i] - 3.0),
            })
        }
        fn slant_rows(&mut self, policy: &[u32], _u: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
            Ok(policy
                .iter()
                .enumerate()
                .map(|(i, &c)| vec![(i, if c == 0 { 1.0 } else { 2.0 })])
                .collect())
        }
    }

    #[test]
    fn howard_solves_the_pointwise_minimum() {
        let mut p = TwoBranches { n: 5 };
        let out = iterate(&mut p, &vec![0.0; 5], &settings(1e-12, 20)).unwrap();
        for &v in &out.solution {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert_eq!(out.policy.as_slice(), &[1, 1, 1, 1, 1]);
        assert!(out.stats.final_residual < 1e-12);
        assert!(out.stats.iterations <= 4);
    }

    /// Single-control coupled tridiagonal system `(I - dt A) u = rhs`:
    /// Newton converges in one solve, so the second delta vanishes.
    struct LinearSystem {
        rows: Vec<Vec<(usize, f64)>>,
        rhs: Vec<f64>,
    }

    impl LinearSystem {
        fn new(n: usize) -> Self {
            let mut rows = Vec::new();
            for i in 0..n {
                let mut row = vec![(i, 2.0)];
                if i > 0 {
                    row.push((i - 1, -0.5));
                }
                if i + 1 < n {
                    row.push((i + 1, -0.5));
                }
                rows.push(row);
            }
            let rhs = (0..n).map(|i| 1.0 + (i as f64) * 0.1).collect();
            Self { rows, rhs }
        }

        fn apply(&self, u: &[f64], i: usize) -> f64 {
            self.rows[i].iter().map(|&(j, v)| v * u[j]).sum()
        }
    }

    impl PolicyProblem for LinearSystem {
        fn num_nodes(&self) -> usize {
            self.rhs.len()
        }
        fn num_controls(&self) -> usize {
            1
        }
        fn residual_at(&mut self, i: usize, _c: u32, u: &[f64]) -> Result<f64> {
            Ok(self.apply(u, i) - self.rhs[i])
        }
        fn slant_rows(&mut self, _policy: &[u32], _u: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
            Ok(self.rows.clone())
        }
    }

    #[test]
    fn a_linear_problem_converges_in_one_newton_step() {
        let mut p = LinearSystem::new(12);
        let out = iterate(&mut p, &vec![0.0; 12], &settings(1e-11, 5)).unwrap();
        for i in 0..12 {
            let r = p.apply(&out.solution, i) - p.rhs[i];
            assert!(r.abs() < 1e-10);
        }
        assert!(out.stats.iterations <= 2);
        assert!(out.stats.final_residual < 1e-10);
    }

    #[test]
    fn hitting_the_iteration_cap_reports_the_delta_history() {
        let mut p = LinearSystem::new(12);
        // One iteration cannot reach a zero *consecutive* delta.
        let err = iterate(&mut p, &vec![0.0; 12], &settings(1e-14, 1)).unwrap_err();
        match err {
            SolverError::NonConvergence {
                max_iters, deltas, ..
            } => {
                assert_eq!(max_iters, 1);
                assert_eq!(deltas.len(), 1);
                assert!(deltas[0] > 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    struct BadRow;

    impl PolicyProblem for BadRow {
        fn num_nodes(&self) -> usize {
            3
        }
        fn num_controls(&self) -> usize {
            1
        }
        fn residual_at(&mut self, i: usize, _c: u32, u: &[f64]) -> Result<f64> {
            Ok(u[i])
        }
        fn slant_rows(&mut self, _policy: &[u32], _u: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
            Ok(vec![
                vec![(0, 1.0)],
                vec![(1, 1.0), (0, -2.0)],
                vec![(2, 1.0)],
            ])
        }
    }

    #[test]
    fn lost_dominance_names_the_offending_row() {
        let err = iterate(&mut BadRow, &[0.0; 3], &settings(1e-9, 3)).unwrap_err();
        match err {
            SolverError::DominanceViolation { row, margin } => {
                assert_eq!(row, 1);
                assert!(margin < 0.5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ties_go_to_the_lowest_control_index() {
        struct Tied;
        impl PolicyProblem for Tied {
            fn num_nodes(&self) -> usize {
                2
            }
            fn num_controls(&self) -> usize {
                3
            }
            fn residual_at(&mut self, i: usize, _c: u32, u: &[f64]) -> Result<f64> {
                Ok(u[i] - 1.0)
            }
            fn slant_rows(&mut self, _p: &[u32], _u: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
                Ok(vec![vec![(0, 1.0)], vec![(1, 1.0)]])
            }
        }
        let out = iterate(&mut Tied, &[0.0; 2], &settings(1e-12, 5)).unwrap();
        assert_eq!(out.policy.as_slice(), &[0, 0]);
    }

    #[test]
    fn near_optimal_controls_are_enumerable() {
        let mut p = TwoBranches { n: 1 };
        // At u = 3 the second branch vanishes and the first equals 2.
        let set = argmin_set(&mut p, 0, &[3.0], 1e-9).unwrap();
        assert_eq!(set, vec![1]);
        let set = argmin_set(&mut p, 0, &[3.0], 2.5).unwrap();
        assert_eq!(set, vec![0, 1]);
    }

    #[test]
    fn control_grids_sample_boxes_and_simplices() {
        let g = ControlGrid::box1d(-1.0, 1.0, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g.get(0), &[-1.0]);
        assert_eq!(g.get(4), &[1.0]);
        assert!((g.get(1)[0] + 0.5).abs() < 1e-15);

        let s = ControlGrid::simplex2d(0.05).unwrap();
        assert_eq!(s.len(), 231);
        let s = ControlGrid::simplex2d(0.2).unwrap();
        assert_eq!(s.len(), 21);
        for pt in s.iter() {
            assert!(pt[0] >= 0.0 && pt[1] >= 0.0);
            assert!(pt[0] + pt[1] <= 1.0 + 1e-12);
        }
        // Lexicographic ordering puts the origin first and (1, 0) last.
        assert_eq!(s.get(0), &[0.0, 0.0]);
        assert_eq!(s.get(20), &[1.0, 0.0]);

        let single = ControlGrid::single(vec![0.7]);
        assert_eq!(single.len(), 1);
        assert_eq!(single.get(0), &[0.7]);

        assert!(ControlGrid::box1d(1.0, -1.0, 3).is_err());
        assert!(ControlGrid::simplex2d(0.3).is_err());
    }
}
