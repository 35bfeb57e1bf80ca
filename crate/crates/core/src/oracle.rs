//! Independent verification utilities.
//!
//! Nothing in this module is used by the solver itself. It holds slow,
//! simple reference computations (adaptive quadrature, bisection, a
//! fixed-point solve of the discrete equations) and randomized structural
//! probes (monotonicity, comparison, a priori bounds, continuous dependence,
//! slant identities) that the verification command and the test suite run
//! against the fast production code paths.
//!
//! Probes return an [`OracleReport`] instead of asserting, so the command
//! line can collect them into a table; a report fails exactly when its worst
//! observed violation exceeds the stated tolerance. Every probe draws its
//! randomness from a caller-supplied seed and is reproducible bit for bit.

use crate::driver::Driver;
use crate::error::{Result, SolverError};
use crate::grid::Field;
use crate::scheme::{self, LevelProbe, Problem, SchemeConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Deterministic generator for randomized probes.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
///
/// The classic recursive scheme: a panel is accepted when halving it changes
/// the Simpson value by less than 15 times the panel tolerance, and the
/// Richardson correction `(s2 - s1) / 15` is added. Depth is bounded to fail
/// loudly on non-integrable behavior.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(b >= a) || !a.is_finite() || !b.is_finite() {
        return Err(SolverError::InvalidConfig(
            "quadrature interval must be finite and ordered".into(),
        ));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    let v = simpson_rec(f, a, b, fa, fm, fb, whole, tol, 60)?;
    Ok(v)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(SolverError::DivergentIntegral(format!(
            "adaptive Simpson did not settle on [{a}, {b}]"
        )));
    }
    let lv = simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let rv = simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(lv + rv)
}

/// Root of a continuous function on `[lo, hi]` by bisection. The endpoints
/// must bracket a sign change (a zero endpoint is returned directly).
pub fn bisect(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol_x: f64) -> Result<f64> {
    let mut a = lo;
    let mut b = hi;
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(SolverError::InvalidConfig(format!(
            "bisection endpoints do not bracket a root: f({a}) = {fa}, f({b}) = {fb}"
        )));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if b - a <= tol_x {
            return Ok(m);
        }
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Uniform sample in `[lo, hi)`.
pub fn sample_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Clamp `s` to the band `[-p, p]`.
///
/// This is the truncation map used to build Lipschitz surrogates of drivers
/// with unbounded growth; it fixes `0` and is nonexpansive, so truncating
/// never worsens a comparison argument.
pub fn truncate_pi(p: f64, s: f64) -> f64 {
    s.clamp(-p, p)
}

/// Outcome of one structural probe.
///
/// `passed` is derived in [`OracleReport::new`]: a report fails exactly when
/// the worst observed violation exceeds the stated tolerance. Violations are
/// signed; a healthy probe typically reports a strictly negative worst value
/// (the margin by which the property held).
#[derive(Clone, Debug)]
pub struct OracleReport {
    /// Name of the property that was probed.
    pub property: String,
    /// Short description of the instance it ran on.
    pub instance: String,
    /// Largest violation the probe may report and still pass.
    pub tolerance: f64,
    /// Worst (largest) violation observed over all samples.
    pub worst_violation: f64,
    /// Number of inequality samples tested.
    pub samples: usize,
    pub passed: bool,
}

impl OracleReport {
    pub fn new(
        property: &str,
        instance: &str,
        tolerance: f64,
        worst_violation: f64,
        samples: usize,
    ) -> Self {
        Self {
            property: property.to_string(),
            instance: instance.to_string(),
            tolerance,
            worst_violation,
            samples,
            passed: worst_violation <= tolerance,
        }
    }

    pub fn csv_header() -> &'static str {
        "property,instance,passed,worst_violation,tolerance,samples"
    }

    /// One CSV record; commas inside free-text fields become semicolons so
    /// the row always has exactly six columns.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.8e},{:.8e},{}",
            self.property.replace(',', ";"),
            self.instance.replace(',', ";"),
            self.passed,
            self.worst_violation,
            self.tolerance,
            self.samples
        )
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} on {}: worst violation {:.3e} (tolerance {:.3e}, {} samples)",
            if self.passed { "PASS" } else { "FAIL" },
            self.property,
            self.instance,
            self.worst_violation,
            self.tolerance,
            self.samples
        )
    }
}

/// Admissible band for candidate node values: the driver's open interval,
/// inset where finite so evaluations stay strictly inside, intersected with
/// a generous cap around the data scale.
fn value_band(problem: &Problem, scale: f64) -> Result<(f64, f64)> {
    let (alo, ahi) = problem.driver.admissible_y();
    let cap = 1e6 * (1.0 + scale);
    let lo = if alo.is_finite() {
        (alo + 1e-12 * (1.0 + alo.abs())).max(-cap)
    } else {
        -cap
    };
    let hi = if ahi.is_finite() {
        (ahi - 1e-12 * (1.0 + ahi.abs())).min(cap)
    } else {
        cap
    };
    if !(lo < hi) {
        return Err(SolverError::InvalidConfig(format!(
            "admissible value band [{lo}, {hi}] is empty"
        )));
    }
    Ok((lo, hi))
}

/// Root of the scalar residual at `node` in its own value, holding every
/// other entry of `u` fixed. The residual is strictly increasing in the
/// node's value (slope at least `1/dt - mu > 0`), so a sign change bracket
/// expanded from the current iterate pins the root; `u[node]` is restored
/// before returning.
fn node_root(
    probe: &mut LevelProbe<'_>,
    node: usize,
    u: &mut [f64],
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let saved = u[node];
    let out = node_root_inner(probe, node, u, lo, hi);
    u[node] = saved;
    out
}

fn node_root_inner(
    probe: &mut LevelProbe<'_>,
    node: usize,
    u: &mut [f64],
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let y0 = u[node].clamp(lo, hi);
    u[node] = y0;
    let r0 = probe.residual(node, u)?;
    if r0 == 0.0 {
        return Ok(y0);
    }
    let mut step = 1e-3 * (1.0 + y0.abs());
    let (mut a, mut b) = (y0, y0);
    if r0 > 0.0 {
        loop {
            if a <= lo {
                return Err(SolverError::InvalidConfig(format!(
                    "node {node}: the scalar residual has no sign change in [{lo}, {y0}]"
                )));
            }
            a = (a - step).max(lo);
            u[node] = a;
            let ra = probe.residual(node, u)?;
            if ra == 0.0 {
                return Ok(a);
            }
            if ra < 0.0 {
                break;
            }
            step *= 2.0;
        }
    } else {
        loop {
            if b >= hi {
                return Err(SolverError::InvalidConfig(format!(
                    "node {node}: the scalar residual has no sign change in [{y0}, {hi}]"
                )));
            }
            b = (b + step).min(hi);
            u[node] = b;
            let rb = probe.residual(node, u)?;
            if rb == 0.0 {
                return Ok(b);
            }
            if rb > 0.0 {
                break;
            }
            step *= 2.0;
        }
    }
    let tol_x = 1e-14 * (1.0 + a.abs().max(b.abs()));
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if b - a <= tol_x {
            return Ok(m);
        }
        u[node] = m;
        let rm = probe.residual(node, u)?;
        if rm == 0.0 {
            return Ok(m);
        }
        if rm < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Reference solve of one time level by Gauss-Seidel sweeps of per-node
/// bisection, deliberately independent of the policy-iteration machinery.
///
/// Each sweep replaces every node value by the exact root of its scalar
/// residual (the minimum over controls of the discrete equation at that
/// node), holding the others fixed; sweeps repeat until consecutive iterates
/// agree to `1e-12` in the sup norm. This exploits only strict monotonicity
/// of the scalar map, so it also handles drivers that are merely continuous
/// in the value argument. It is intentionally slow and limited to instances
/// of at most 50 nodes; use the production march for anything larger.
///
/// `step` is the 0-based index of the level `u_prev` lives on; the returned
/// field is the level above it.
pub fn fixed_point_solve(
    problem: &Problem,
    config: &SchemeConfig,
    step: usize,
    u_prev: &Field,
    max_sweeps: usize,
) -> Result<Field> {
    let n = problem.grid.num_nodes();
    if n > 50 {
        return Err(SolverError::InvalidConfig(format!(
            "the reference fixed-point solver is limited to 50 nodes, got {n}"
        )));
    }
    if max_sweeps == 0 {
        return Err(SolverError::InvalidConfig(
            "fixed-point solve needs at least one sweep".into(),
        ));
    }
    let mut probe = scheme::level_probe(problem, config, step, u_prev)?;
    let (lo, hi) = value_band(problem, u_prev.sup_norm())?;
    let mut u: Vec<f64> = u_prev.values().iter().map(|v| v.clamp(lo, hi)).collect();
    let mut history = Vec::new();
    for _ in 0..max_sweeps {
        let mut delta = 0.0f64;
        for i in 0..n {
            let y = node_root(&mut probe, i, &mut u, lo, hi)?;
            delta = delta.max((y - u[i]).abs());
            u[i] = y;
        }
        history.push(delta);
        if delta < 1e-12 {
            return Field::new(problem.grid.clone(), u);
        }
    }
    let last = history.last().copied().unwrap_or(f64::INFINITY);
    Err(SolverError::NonConvergence {
        max_iters: max_sweeps,
        last_delta: last,
        deltas: history,
    })
}

/// Randomized check that the first time level of the scheme is monotone:
/// raising any other unknown of the new level, or any value of the previous
/// level, must not raise a node's residual.
///
/// Next-level neighbors enter through the implicit legs with nonpositive
/// sign regardless of the time step, so those trials are cheap bumps against
/// one prepared level. Previous-level values carry the explicit load (jump
/// quadrature, numerical viscosity, the identity term), so a fraction of the
/// budget rebuilds the level with one bumped entry and rescans every node;
/// this is the part that catches an inflated time step. Violations are
/// residual increases, in time-scaled residual units.
pub fn probe_monotonicity(
    problem: &Problem,
    config: &SchemeConfig,
    trials: usize,
    seed: u64,
) -> Result<OracleReport> {
    if trials == 0 {
        return Err(SolverError::InvalidConfig(
            "monotonicity probe needs a positive trial budget".into(),
        ));
    }
    let grid = problem.grid.clone();
    let init = problem.obstacle.initial.clone();
    let u0 = Field::from_fn(grid.clone(), |x| init(x))?;
    let mut probe = scheme::level_probe(problem, config, 0, &u0)?;
    let n = probe.num_nodes();
    let (lo, hi) = value_band(problem, u0.sup_norm())?;
    let spread = 0.25 * (1.0 + u0.sup_norm());
    let mut rng = seeded_rng(seed);
    let draw_field = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        u0.values()
            .iter()
            .map(|v| (v + sample_uniform(rng, -spread, spread)).clamp(lo, hi))
            .collect()
    };
    let mut u = draw_field(&mut rng);
    let mut worst = f64::NEG_INFINITY;
    let mut samples = 0usize;

    let bump_trials = trials.saturating_sub(trials / 8).max(1);
    for t in 0..bump_trials {
        if n < 2 {
            break;
        }
        if t % 64 == 63 {
            u = draw_field(&mut rng);
        }
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let old = u[j];
        let bumped = (old + sample_uniform(&mut rng, 1e-4, spread.max(2e-4))).min(hi);
        if bumped <= old {
            continue;
        }
        let r0 = probe.residual(i, &u)?;
        u[j] = bumped;
        let r1 = probe.residual(i, &u)?;
        u[j] = old;
        worst = worst.max(r1 - r0);
        samples += 1;
    }

    let rebuilds = (trials / 32).clamp(4, 48);
    let mut base = vec![0.0; n];
    for _ in 0..rebuilds {
        u = draw_field(&mut rng);
        for (i, r) in base.iter_mut().enumerate() {
            *r = probe.residual(i, &u)?;
        }
        let j = rng.gen_range(0..n);
        let mut prev = u0.values().to_vec();
        let bumped = (prev[j] + sample_uniform(&mut rng, 1e-4, spread.max(2e-4))).min(hi);
        if bumped <= prev[j] {
            continue;
        }
        prev[j] = bumped;
        let vf = Field::new(grid.clone(), prev)?;
        let mut shifted = scheme::level_probe(problem, config, 0, &vf)?;
        for (i, r0) in base.iter().enumerate() {
            let r1 = shifted.residual(i, &u)?;
            worst = worst.max(r1 - r0);
            samples += 1;
        }
    }

    let instance = format!(
        "{} nodes; {} controls; dt {:.3e}",
        n,
        probe.num_controls(),
        probe.dt()
    );
    Ok(OracleReport::new(
        "scheme monotonicity",
        &instance,
        1e-9,
        worst,
        samples,
    ))
}

/// Discrete comparison check on the first time level.
///
/// Solves the level with [`fixed_point_solve`], then verifies that the
/// uniform shifts of the solution are residual-sign-correct (`u* + eps` has
/// nonnegative residuals, `u* - eps` nonpositive, both up to solver slack)
/// and that raising the previous level by random amounts in `[eps/2, eps]`
/// produces a solution nowhere below the original. Violations mix residual
/// units (scaled by `1/dt`) and value units; the tolerance covers both.
pub fn probe_comparison(
    problem: &Problem,
    config: &SchemeConfig,
    eps: f64,
    seed: u64,
) -> Result<OracleReport> {
    if !(eps > 0.0) {
        return Err(SolverError::InvalidConfig(
            "comparison probe needs a positive shift size".into(),
        ));
    }
    let grid = problem.grid.clone();
    let init = problem.obstacle.initial.clone();
    let u0 = Field::from_fn(grid.clone(), |x| init(x))?;
    let u_star = fixed_point_solve(problem, config, 0, &u0, 400)?;
    let mut probe = scheme::level_probe(problem, config, 0, &u0)?;
    let n = probe.num_nodes();
    let (lo, hi) = value_band(problem, u0.sup_norm())?;
    let mut up = u_star.values().to_vec();
    let mut dn = u_star.values().to_vec();
    for i in 0..n {
        up[i] += eps;
        dn[i] -= eps;
        if up[i] > hi || dn[i] < lo {
            return Err(SolverError::InvalidConfig(format!(
                "shift size {eps} leaves the driver's admissible range at node {i}; \
                 choose a smaller eps"
            )));
        }
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let rp = probe.residual(i, &up)?;
        let rm = probe.residual(i, &dn)?;
        worst = worst.max((-rp).max(rm));
    }

    let mut rng = seeded_rng(seed);
    let raised: Vec<f64> = u0
        .values()
        .iter()
        .map(|v| (v + sample_uniform(&mut rng, 0.5 * eps, eps)).min(hi))
        .collect();
    let vf = Field::new(grid.clone(), raised)?;
    let v_star = fixed_point_solve(problem, config, 0, &vf, 400)?;
    for (a, b) in u_star.values().iter().zip(v_star.values()) {
        worst = worst.max(a - b);
    }

    let tolerance = 1e-8 * (1.0 + 1.0 / probe.dt());
    let instance = format!("{} nodes; shift {:.1e}", n, eps);
    Ok(OracleReport::new(
        "discrete comparison",
        &instance,
        tolerance,
        worst,
        3 * n,
    ))
}

/// Sup norm of the exterior extension over everything the stencils could
/// plausibly consume: the domain padded by the jump kernel's displacement
/// range (estimated by sampling the displacement map over controls, nodes
/// and jump sizes) plus two cells for finite differences, sampled at every
/// time level.
fn exterior_sup(problem: &Problem, dt: f64, steps: usize) -> f64 {
    let ext = match &problem.bc.exterior {
        Some(e) => e.clone(),
        None => return f64::NEG_INFINITY,
    };
    let grid = &problem.grid;
    let d = grid.dim();
    let mut reach_lo = vec![0.0f64; d];
    let mut reach_hi = vec![0.0f64; d];
    if let Some(jp) = &problem.jumps {
        let mut disp = vec![0.0; d];
        let mut x = vec![0.0; d];
        let node_stride = (grid.num_nodes() / 48).max(1);
        for c in 0..problem.controls.len() {
            let ctrl = problem.controls.get(c as u32);
            for node in (0..grid.num_nodes()).step_by(node_stride) {
                grid.coords_into(node, &mut x);
                for k in 0..48 {
                    let mag = 1e-6 * (50.0f64 / 1e-6).powf(k as f64 / 47.0);
                    for e in [mag, -mag] {
                        (jp.kernel.eta)(ctrl, 0.0, &x, e, &mut disp);
                        for a in 0..d {
                            reach_lo[a] = reach_lo[a].min(disp[a]);
                            reach_hi[a] = reach_hi[a].max(disp[a]);
                        }
                    }
                }
            }
        }
    }
    let mut lo = vec![0.0; d];
    let mut hi = vec![0.0; d];
    for a in 0..d {
        let pad = 2.0 * grid.spacing()[a];
        lo[a] = grid.lo()[a] + reach_lo[a] - pad;
        hi[a] = grid.hi()[a] + reach_hi[a] + pad;
    }
    let per_axis = 33usize;
    let mut sup = f64::NEG_INFINITY;
    let mut point = vec![0.0; d];
    let total: usize = per_axis.pow(d as u32);
    for level in 0..=steps {
        let t = dt * level as f64;
        for flat in 0..total {
            let mut rem = flat;
            for a in 0..d {
                let idx = rem % per_axis;
                rem /= per_axis;
                point[a] = lo[a] + (hi[a] - lo[a]) * idx as f64 / (per_axis - 1) as f64;
            }
            sup = sup.max(ext(t, &point).abs());
        }
    }
    sup
}

fn pinned_sup(problem: &Problem, t: f64) -> f64 {
    let ext = match &problem.bc.exterior {
        Some(e) => e,
        None => return 0.0,
    };
    let grid = &problem.grid;
    let mut x = vec![0.0; grid.dim()];
    let mut sup = 0.0f64;
    for (i, class) in problem.node_class.iter().enumerate() {
        if *class == scheme::NodeClass::Dirichlet {
            grid.coords_into(i, &mut x);
            sup = sup.max(ext(t, &x).abs());
        }
    }
    sup
}

fn obstacle_plus_sup(problem: &Problem, t: f64) -> f64 {
    let grid = &problem.grid;
    let mut x = vec![0.0; grid.dim()];
    let mut top = f64::NEG_INFINITY;
    for i in 0..grid.num_nodes() {
        grid.coords_into(i, &mut x);
        top = top.max((problem.obstacle.zeta)(t, &x));
    }
    top.max(0.0)
}

/// Runs the full march with a snapshot at every step and re-derives the
/// a priori sup-norm ladder from published constants only: the driver's
/// growth envelope and monotonicity bound, the certified tail masses, the
/// obstacle's positive part, the pinned boundary values and a sampled bound
/// on the exterior extension. Each step's sup norm must stay inside its
/// allowance. The production march enforces the same ladder with sharper
/// (per-stencil) constants; this probe checks the theorem-shaped bound
/// independently.
pub fn probe_apriori(problem: &Problem, config: &SchemeConfig) -> Result<OracleReport> {
    let mut cfg = config.clone();
    cfg.snapshot_stride = 1;
    let out = scheme::run(problem, &cfg)?;
    let dt = out.cfl.dt;
    let steps = out.snapshots.len();
    if steps == 0 || out.snapshots[steps - 1].0 != steps {
        return Err(SolverError::InvalidConfig(
            "a priori probe expected one snapshot per step".into(),
        ));
    }
    let driver = problem.driver.as_ref();
    let denom = 1.0 - dt * driver.monotonicity_bound().max(0.0);
    if !(denom > 0.0) {
        return Err(SolverError::CflViolation {
            detail: format!("dt {dt} exceeds the driver's monotone range"),
        });
    }
    let mlip = problem
        .jumps
        .as_ref()
        .map(|j| j.kernel.m_lipschitz)
        .unwrap_or(0.0);
    let jump_env = out.cfl.gamma1 + driver.jump_lipschitz() * mlip * out.cfl.gamma2;
    let z0 = driver.zero_bound();
    let ext_bound = exterior_sup(problem, dt, steps);

    let init = problem.obstacle.initial.clone();
    let mut sup = Field::from_fn(problem.grid.clone(), |x| init(x))?.sup_norm();
    let mut worst = f64::NEG_INFINITY;
    let mut max_allowed = 0.0f64;
    for (idx, (_, field)) in out.snapshots.iter().enumerate() {
        let growth_env = z0 + driver.growth(sup) + 2.0 * jump_env * sup;
        let mut allowed = (sup + dt * growth_env) / denom;
        allowed = allowed.max(ext_bound);
        allowed = allowed.max(pinned_sup(problem, dt * (idx + 1) as f64));
        if cfg.rho > 0.0 {
            allowed = allowed.max(obstacle_plus_sup(problem, dt * idx as f64));
        }
        let s = field.sup_norm();
        worst = worst.max(s - allowed);
        max_allowed = max_allowed.max(allowed);
        sup = s;
    }
    let tolerance = 1e-9 * (1.0 + max_allowed);
    let instance = format!("{} nodes; {} steps", problem.grid.num_nodes(), steps);
    Ok(OracleReport::new(
        "a priori growth bound",
        &instance,
        tolerance,
        worst,
        steps,
    ))
}

/// Continuous dependence on a model parameter: `build(delta)` must return
/// the perturbed problem and config, with `build(0.0)` the reference.
/// `deltas` is a strictly decreasing ladder of nonnegative perturbation
/// sizes; the sup-norm distances to the reference solution must decrease
/// strictly along it, and any `delta = 0` entry must land within twice the
/// policy tolerance of the reference.
pub fn probe_continuous_dependence(
    label: &str,
    build: &dyn Fn(f64) -> Result<(Problem, SchemeConfig)>,
    deltas: &[f64],
) -> Result<OracleReport> {
    if deltas.is_empty() {
        return Err(SolverError::InvalidConfig(
            "continuous-dependence probe needs a nonempty ladder".into(),
        ));
    }
    for pair in deltas.windows(2) {
        if !(pair[1] < pair[0]) {
            return Err(SolverError::InvalidConfig(
                "perturbation ladder must be strictly decreasing".into(),
            ));
        }
    }
    if !(deltas[deltas.len() - 1] >= 0.0) {
        return Err(SolverError::InvalidConfig(
            "perturbation sizes must be nonnegative".into(),
        ));
    }
    let (base_problem, base_config) = build(0.0)?;
    let base = scheme::run(&base_problem, &base_config)?.final_field;
    let mut worst = f64::NEG_INFINITY;
    let mut diffs = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let (problem, config) = build(delta)?;
        if problem.grid.num_nodes() != base_problem.grid.num_nodes() {
            return Err(SolverError::InvalidConfig(
                "perturbed runs must share the reference grid".into(),
            ));
        }
        let field = scheme::run(&problem, &config)?.final_field;
        let d = field.sup_diff(&base);
        if delta == 0.0 {
            worst = worst.max(d - 2.0 * config.policy_tol);
        }
        diffs.push(d);
    }
    for pair in diffs.windows(2) {
        worst = worst.max(pair[1] - pair[0]);
    }
    Ok(OracleReport::new(
        "continuous dependence",
        label,
        1e-12,
        worst,
        deltas.len(),
    ))
}

/// Slant-derivative identity check at a cloud of value samples: along a
/// geometric ladder `e = e0 / 2^j`, the quotient
/// `|f(y + e) - f(y) - slant(y + e) e| / e` must vanish as `e` does. The
/// worst last-rung quotient over the cloud is reported. The gradient and
/// jump channels are held at zero, `t` at zero.
pub fn probe_slant(
    label: &str,
    driver: &dyn Driver,
    ctrl: &[f64],
    x: &[f64],
    ys: &[f64],
    k: f64,
) -> Result<OracleReport> {
    if ys.is_empty() {
        return Err(SolverError::InvalidConfig(
            "slant probe needs at least one value sample".into(),
        ));
    }
    let d = x.len();
    let z = vec![0.0; d];
    let slope = vec![0.0; d];
    let (alo, ahi) = driver.admissible_y();
    let rungs = 25usize;
    let mut worst = f64::NEG_INFINITY;
    for &y in ys {
        if !(y > alo && y < ahi) {
            return Err(SolverError::InvalidConfig(format!(
                "slant sample {y} lies outside the admissible range ({alo}, {ahi})"
            )));
        }
        let mut e0 = 0.1 * (1.0 + y.abs());
        let mut shrink = 0;
        while y + e0 >= ahi && shrink < 80 {
            e0 *= 0.5;
            shrink += 1;
        }
        if shrink == 80 {
            return Err(SolverError::InvalidConfig(format!(
                "no room above sample {y} inside the admissible range"
            )));
        }
        let f0 = driver.eval(ctrl, 0.0, x, y, &z, &slope, k)?;
        let mut last = f64::INFINITY;
        for j in 0..rungs {
            let e = e0 * 0.5f64.powi(j as i32);
            let fe = driver.eval(ctrl, 0.0, x, y + e, &z, &slope, k)?;
            let s = driver.slant_y(ctrl, 0.0, x, y + e, &z, &slope, k)?;
            last = (fe - f0 - s * e).abs() / e;
        }
        worst = worst.max(last);
    }
    let instance = format!("{}; {} samples", label, ys.len());
    Ok(OracleReport::new(
        "slant identity",
        &instance,
        1e-6,
        worst,
        ys.len() * rungs,
    ))
}
