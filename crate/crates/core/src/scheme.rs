//! Semi-implicit monotone time stepping for penalized obstacle problems.
//!
//! One step advances the field by solving, node by node and minimized over
//! the control samples, the residual
//!
//! ```text
//! R_i(u) = (u_i - U_i) - dt * [ A u |_i  +  K U |_i
//!        + f(t, x_i, u_i, sigma_r^T DU_i, DU_i, B U |_i)
//!        + (theta / dt) * sum_l (dplus_l - dminus_l)
//!        + rho * (zeta(t, x_i) - u_i)^+ ]  =  0,
//! ```
//!
//! where `U` is the previous level and `u` the unknown one. The compensated
//! local generator `A` (diffusion widened by the small jumps, drift reduced
//! by the tail compensator) acts implicitly on `u`; the nonlocal terms `K U`
//! and `B U`, the gradient arguments, and the artificial viscosity are frozen
//! at the previous level, which keeps the per-step system sparse with the
//! local stencil's footprint. The penalty and the driver's own dependence on
//! `u_i` are implicit through the node's value only, so the system stays
//! diagonally dominant whenever `1 - dt * mu > 0` with `mu` the driver's
//! monotonicity bound.
//!
//! The minimized residual is solved by semismooth policy iteration
//! ([`crate::policy`]); monotonicity of the explicit part is certified up
//! front (tail mass, jump coefficient sums, viscosity width) and enforced at
//! run time by an a priori growth monitor that aborts rather than report a
//! polluted field.
//!
//! Nodes are classed either as unknowns or as pinned boundary values; pinned
//! nodes carry the identity equation `u_i = exterior(t_next, x_i)` so the
//! linear algebra can treat every node uniformly.

use std::cell::Cell;
use std::path::PathBuf;
use std::sync::Arc;

use crate::driver::{Driver, FluxParams, ObstacleSpec};
use crate::error::{Result, SolverError};
use crate::grid::{ExtendedField, FaceRule, Field, TimePartition, UniformGrid};
use crate::levy::{self, LevyMeasure, NonlocalKernelSpec, NonlocalStencil, TailQuadrature};
use crate::local_op::{self, LocalStencil};
use crate::policy::{self, ControlGrid, IterationSettings, PolicyField, PolicyProblem};
use crate::stencil_cache::{self, StencilKey};

/// How the uniform time step is chosen.
#[derive(Clone, Copy, Debug)]
pub enum DtRule {
    /// Target `dt = factor * h`, rounded down so an integer number of steps
    /// fills the horizon exactly.
    Lambda(f64),
    /// Exactly this many uniform steps.
    Steps(usize),
}

/// How the jump truncation radius is chosen.
#[derive(Clone, Copy, Debug)]
pub enum RadiusRule {
    /// From the measure's singularity order: `max(h, h^{1/kappa})`.
    Auto,
    /// A fixed radius, mainly for cross-checks against reference values.
    Explicit(f64),
}

/// Which discretization of the local generator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalKind {
    /// Upwind differences; needs a diagonally dominant diffusion matrix.
    Upwind,
    /// Semi-Lagrangian feet; unconditionally monotone, first order.
    SemiLagrangian,
}

/// Role of a grid node in the stepping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeClass {
    /// Unknown evolved by the discrete equation.
    Pde,
    /// Pinned to the exterior extension at the new time level.
    Dirichlet,
}

/// Control-, time- and state-dependent coefficient, written into `out`
/// (`d x d` row-major for diffusion factors, length `d` for drifts).
pub type CoeffFn = Arc<dyn Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync>;

/// Jump measure and kernel of the nonlocal part.
pub struct JumpPart {
    pub measure: LevyMeasure,
    pub kernel: NonlocalKernelSpec,
}

/// Everything that defines one evolution problem on one grid.
pub struct Problem {
    pub grid: Arc<UniformGrid>,
    pub bc: crate::grid::BoundaryConditions,
    pub horizon: f64,
    pub driver: Arc<dyn Driver>,
    pub obstacle: ObstacleSpec,
    pub controls: ControlGrid,
    /// Diffusion factor `sigma(control, t, x)`, `d x d` row-major.
    pub sigma: CoeffFn,
    /// Drift `b(control, t, x)`, length `d`.
    pub drift: CoeffFn,
    pub jumps: Option<JumpPart>,
    pub local_kind: LocalKind,
    /// One entry per grid node.
    pub node_class: Vec<NodeClass>,
    /// True when `sigma`, `drift` and the jump kernel do not depend on `t`;
    /// enables stencil reuse and the compensated-diffusion cache.
    pub time_invariant: bool,
    /// Fingerprint of the model and its parameters, used to key the on-disk
    /// stencil cache. Callers must change it whenever anything that shapes
    /// the stencils changes.
    pub model_hash: u64,
}

/// Numerical parameters of one run.
#[derive(Clone, Debug)]
pub struct SchemeConfig {
    pub dt: DtRule,
    /// Artificial-viscosity width; must dominate the driver's gradient
    /// Lipschitz constant times `dt / h` when that constant is positive.
    pub theta: f64,
    /// Penalty rate; zero disables the obstacle entirely.
    pub rho: f64,
    pub radius: RadiusRule,
    /// Sup-norm tolerance of the per-step policy iteration.
    pub policy_tol: f64,
    pub policy_max_iters: usize,
    /// Run even when the explicit-part monotonicity margins are negative;
    /// the returned report then says `certified: false`.
    pub cfl_override: bool,
    /// Keep a copy of the field every this many steps (0 keeps none).
    pub snapshot_stride: usize,
    /// Directory for the on-disk jump-stencil cache; unset builds in memory
    /// every run.
    pub stencil_cache_dir: Option<PathBuf>,
}

impl SchemeConfig {
    pub fn new(dt: DtRule) -> Self {
        Self {
            dt,
            theta: 0.0,
            rho: 0.0,
            radius: RadiusRule::Auto,
            policy_tol: 1e-10,
            policy_max_iters: 30,
            cfl_override: false,
            snapshot_stride: 0,
            stencil_cache_dir: None,
        }
    }
}

/// Certification data for the explicit part of the step.
#[derive(Clone, Debug)]
pub struct CflReport {
    pub dt: f64,
    /// Jump truncation radius (zero without jumps).
    pub radius: f64,
    /// Tail mass of the jump measure beyond the radius.
    pub gamma1: f64,
    /// Tail small moment `integral of (1 and |e|)` beyond the radius.
    pub gamma2: f64,
    /// `1 - dt * gamma1 - 2 d theta`.
    pub global_margin: f64,
    /// Worst `1 - dt * (k_sum + L_k * L_m * b_sum) - 2 d theta` over nodes
    /// and controls.
    pub node_margin: f64,
    pub certified: bool,
}

/// Convergence data of one completed step.
#[derive(Clone, Debug)]
pub struct StepStats {
    /// 1-based index of the completed step.
    pub index: usize,
    /// Time level reached.
    pub t: f64,
    /// Policy iterations spent.
    pub iterations: usize,
    /// Last Newton increment in sup norm.
    pub final_delta: f64,
    /// Sup norm of the minimized residual at the accepted iterate.
    pub final_residual: f64,
    /// Full sup-norm increment history, one entry per iteration.
    pub deltas: Vec<f64>,
}

/// Result of a full march to the horizon.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub final_field: Field,
    /// Minimizing control index per node at the last completed step.
    pub final_policy: PolicyField,
    /// `(completed steps, field)` pairs at the configured stride.
    pub snapshots: Vec<(usize, Field)>,
    /// Minimizing policies paired with `snapshots`, same stride.
    pub policy_snapshots: Vec<(usize, PolicyField)>,
    pub steps: Vec<StepStats>,
    pub cfl: CflReport,
}

/// March the initial condition to the horizon.
pub fn run(problem: &Problem, config: &SchemeConfig) -> Result<RunOutput> {
    let mut eng = Engine::new(problem, config)?;
    let grid = problem.grid.clone();
    let init = problem.obstacle.initial.clone();
    let mut u = Field::from_fn(grid.clone(), |x| init(x))?;
    let steps = eng.time.steps();
    let dtv = eng.time.dt();
    let mu = problem.driver.monotonicity_bound();
    let settings = IterationSettings {
        tol: config.policy_tol,
        max_iters: config.policy_max_iters,
        required_margin: (1.0f64).min(1.0 - dtv * mu),
    };
    let z0 = problem.driver.zero_bound();
    let denom = 1.0 - dtv * mu.max(0.0);
    let jump_env = eng.jump_growth_env;
    let mut stats = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    let mut policy_snapshots = Vec::new();
    let mut final_policy = PolicyField(Vec::new());
    for k in 0..steps {
        eng.prepare_level(k, &u)?;
        let outcome = policy::iterate(&mut eng, u.values(), &settings)?;
        if !(outcome.stats.final_residual <= 10.0 * config.policy_tol) {
            return Err(SolverError::NonConvergence {
                max_iters: outcome.stats.iterations,
                last_delta: outcome.stats.final_residual,
                deltas: outcome.stats.deltas,
            });
        }
        let next = Field::new(grid.clone(), outcome.solution)?;
        // A priori growth monitor: a monotone step cannot push the sup norm
        // past the driver's growth envelope, the obstacle's positive part,
        // the pinned values and whatever the exterior extension supplied.
        // Exceeding the allowance means the explicit part was not monotone
        // after all, so abort instead of marching a polluted field.
        let sup_prev = eng.lvl.sup_prev;
        let growth_env =
            z0 + problem.driver.growth(sup_prev) + 2.0 * jump_env * sup_prev;
        let mut allowed = (sup_prev + dtv * growth_env) / denom;
        allowed = allowed.max(eng.ext_seen.get()).max(eng.lvl.pinned_sup);
        if config.rho > 0.0 {
            allowed = allowed.max(eng.lvl.zeta_plus_sup);
        }
        let new_sup = next.sup_norm();
        if new_sup > allowed * (1.0 + 1e-9) + 1e-12 {
            return Err(SolverError::CflViolation {
                detail: format!(
                    "step {}: sup norm grew to {:.6e}, past the a priori allowance {:.6e}; \
                     the explicit part of the step is not monotone at this dt/theta",
                    k + 1,
                    new_sup,
                    allowed
                ),
            });
        }
        u = next;
        stats.push(StepStats {
            index: k + 1,
            t: eng.time.t(k + 1),
            iterations: outcome.stats.iterations,
            final_delta: outcome.stats.deltas.last().copied().unwrap_or(0.0),
            final_residual: outcome.stats.final_residual,
            deltas: outcome.stats.deltas,
        });
        if config.snapshot_stride > 0 && (k + 1) % config.snapshot_stride == 0 {
            snapshots.push((k + 1, u.clone()));
            policy_snapshots.push((k + 1, outcome.policy.clone()));
        }
        final_policy = outcome.policy;
    }
    Ok(RunOutput {
        final_field: u,
        final_policy,
        snapshots,
        policy_snapshots,
        steps: stats,
        cfl: eng.cfl.clone(),
    })
}

/// Certify the explicit part without running; always returns the report,
/// even when the margins are negative.
pub fn check_cfl(problem: &Problem, config: &SchemeConfig) -> Result<CflReport> {
    let mut cfg = config.clone();
    cfg.cfl_override = true;
    let eng = Engine::new(problem, &cfg)?;
    Ok(eng.cfl)
}

/// Residual of the discrete equation between two consecutive levels, per
/// node, minimized over controls and scaled by `1 / dt` (so it reads as a
/// defect of the continuous-time equation). `step` is the 0-based index of
/// the level `u_prev` lives on.
pub fn step_residual(
    problem: &Problem,
    config: &SchemeConfig,
    step: usize,
    u_prev: &Field,
    u_next: &Field,
) -> Result<Vec<f64>> {
    let mut probe = level_probe(problem, config, step, u_prev)?;
    let u = u_next.values();
    let mut out = vec![0.0; probe.num_nodes()];
    for i in 0..out.len() {
        out[i] = probe.residual(i, u)?;
    }
    Ok(out)
}

/// One prepared time level exposed for slow external verification: per-node
/// residuals of the discrete equation, evaluated at arbitrary candidate
/// vectors, without running the policy solver. The stability gate is
/// bypassed on construction so probes can also examine uncertified
/// configurations.
pub struct LevelProbe<'a> {
    eng: Engine<'a>,
}

/// Prepare level `step` (0-based index of the level `u_prev` lives on) for
/// residual probing.
pub fn level_probe<'a>(
    problem: &'a Problem,
    config: &SchemeConfig,
    step: usize,
    u_prev: &Field,
) -> Result<LevelProbe<'a>> {
    let mut cfg = config.clone();
    cfg.cfl_override = true;
    let mut eng = Engine::new(problem, &cfg)?;
    if step >= eng.time.steps() {
        return Err(SolverError::InvalidConfig(format!(
            "step {} is out of range for {} steps",
            step,
            eng.time.steps()
        )));
    }
    eng.prepare_level(step, u_prev)?;
    Ok(LevelProbe { eng })
}

impl LevelProbe<'_> {
    /// The uniform time step of the partition being probed.
    pub fn dt(&self) -> f64 {
        self.eng.dtv
    }

    pub fn num_nodes(&self) -> usize {
        self.eng.n
    }

    pub fn num_controls(&self) -> usize {
        self.eng.nc
    }

    /// Residual of `node` at the candidate vector `u`, for one control,
    /// scaled by `1 / dt`.
    pub fn control_residual(&mut self, node: usize, ctrl: u32, u: &[f64]) -> Result<f64> {
        Ok(self.eng.residual_at(node, ctrl, u)? / self.eng.dtv)
    }

    /// Residual of `node` at the candidate vector `u`, minimized over
    /// controls and scaled by `1 / dt` (a defect of the continuous-time
    /// equation).
    pub fn residual(&mut self, node: usize, u: &[f64]) -> Result<f64> {
        let mut best = f64::INFINITY;
        for c in 0..self.eng.nc {
            best = best.min(self.eng.residual_at(node, c as u32, u)?);
        }
        Ok(best / self.eng.dtv)
    }
}

/// One control's jump stencil resolved against the extended-field layout:
/// lattice shifts become flat index offsets so the per-level sweep is a
/// plain gather.
struct FlatStencil {
    k_off: Vec<i32>,
    k_w: Vec<f64>,
    k_sum: f64,
    rec_w: Vec<f64>,
    rec_ptr: Vec<u32>,
    c_off: Vec<i32>,
    c_w: Vec<f64>,
    b_sum: f64,
    drift: Vec<f64>,
}

impl FlatStencil {
    fn from_stencil(st: &NonlocalStencil, ext_strides: &[usize]) -> Self {
        let d = ext_strides.len();
        let off_of = |shift: &[i32]| -> i32 {
            let mut o = 0i64;
            for a in 0..d {
                o += shift[a] as i64 * ext_strides[a] as i64;
            }
            debug_assert!(i32::try_from(o).is_ok(), "extended layout too large");
            o as i32
        };
        let mut k_off = Vec::new();
        let mut k_w = Vec::new();
        for (shift, w) in st.k_coeffs() {
            k_off.push(off_of(shift));
            k_w.push(w);
        }
        let (rw, rp, cs, cw) = st.record_parts();
        let mut c_off = Vec::with_capacity(cw.len());
        for chunk in cs.chunks_exact(d.max(1)) {
            c_off.push(off_of(chunk));
        }
        Self {
            k_off,
            k_w,
            k_sum: st.k_sum(),
            rec_w: rw.to_vec(),
            rec_ptr: rp.to_vec(),
            c_off,
            c_w: cw.to_vec(),
            b_sum: st.b_sum(),
            drift: st.drift_comp().to_vec(),
        }
    }
}

/// Per-run jump data: quadratures, padding, and the flattened stencils for
/// every control.
struct JumpData {
    r: f64,
    gamma1: f64,
    gamma2: f64,
    small: TailQuadrature,
    pad_lo: Vec<usize>,
    pad_hi: Vec<usize>,
    ext_strides: Vec<usize>,
    /// Extended-layout offset of each grid node.
    bases: Vec<usize>,
    /// `flats[control][node]`.
    flats: Vec<Vec<FlatStencil>>,
}

fn build_jump_data(
    problem: &Problem,
    config: &SchemeConfig,
    jp: &JumpPart,
    h: f64,
    t: f64,
) -> Result<JumpData> {
    let grid = &problem.grid;
    let d = grid.dim();
    let n = grid.num_nodes();
    let nc = problem.controls.len();
    jp.kernel.validate()?;
    let r = match config.radius {
        RadiusRule::Auto => jp.measure.choose_r(h),
        RadiusRule::Explicit(r) => {
            if !(r > 0.0) || !r.is_finite() {
                return Err(SolverError::InvalidConfig(format!(
                    "explicit truncation radius must be positive and finite, got {r}"
                )));
            }
            r
        }
    };
    let quad = jp.measure.tail_quadrature(r)?;
    let small = jp.measure.small_jump_quadrature(r)?;
    let gamma1 = quad.integrate(|_| 1.0);
    let gamma2 = quad.integrate(|e| e.abs().min(1.0));
    let cache_dir = if problem.time_invariant {
        config.stencil_cache_dir.as_deref()
    } else {
        None
    };
    let mut all: Vec<Vec<NonlocalStencil>> = Vec::with_capacity(nc);
    for c in 0..nc {
        let ctrl = problem.controls.get(c as u32);
        let key = StencilKey::new(problem.model_hash, h, r, c as u32, 0);
        let loaded = match cache_dir {
            Some(dir) => stencil_cache::load(dir, &key)?,
            None => None,
        };
        let sts = match loaded {
            Some(v) if v.len() == n => v,
            _ => {
                let mut v = Vec::with_capacity(n);
                for i in 0..n {
                    v.push(levy::build_stencil(&quad, &jp.kernel, grid, i, ctrl, t)?);
                }
                if let Some(dir) = cache_dir {
                    stencil_cache::save(dir, &key, &v)?;
                }
                v
            }
        };
        all.push(sts);
    }
    let mut pad_lo = vec![0usize; d];
    let mut pad_hi = vec![0usize; d];
    for per in &all {
        for st in per {
            let (lo, hi) = st.reach();
            for a in 0..d {
                pad_lo[a] = pad_lo[a].max((-lo[a]).max(0) as usize);
                pad_hi[a] = pad_hi[a].max(hi[a].max(0) as usize);
            }
        }
    }
    let counts = grid.counts();
    let mut ext_strides = vec![0usize; d];
    let mut s = 1usize;
    for a in (0..d).rev() {
        ext_strides[a] = s;
        s *= counts[a] + pad_lo[a] + pad_hi[a];
    }
    let mut bases = Vec::with_capacity(n);
    let mut mi = vec![0usize; d];
    for i in 0..n {
        grid.multi_into(i, &mut mi);
        let mut b = 0usize;
        for a in 0..d {
            b += (mi[a] + pad_lo[a]) * ext_strides[a];
        }
        bases.push(b);
    }
    let flats = all
        .iter()
        .map(|per| {
            per.iter()
                .map(|st| FlatStencil::from_stencil(st, &ext_strides))
                .collect()
        })
        .collect();
    Ok(JumpData {
        r,
        gamma1,
        gamma2,
        small,
        pad_lo,
        pad_hi,
        ext_strides,
        bases,
        flats,
    })
}

/// Compensated diffusion factors for every `(control, node)` pair, packed
/// `d x d` row-major; only worth precomputing when the coefficients are
/// time-invariant, since the small-jump integral is the expensive part.
fn build_sigma_cache(
    problem: &Problem,
    jd: &JumpData,
    coords: &[f64],
    d: usize,
    n: usize,
    nc: usize,
) -> Vec<f64> {
    let jp = problem.jumps.as_ref().expect("cache is built only with jumps");
    let mut cache = vec![0.0; nc * n * d * d];
    let mut sig = vec![0.0; d * d];
    for c in 0..nc {
        let ctrl = problem.controls.get(c as u32);
        for i in 0..n {
            let x = &coords[i * d..(i + 1) * d];
            (problem.sigma)(ctrl, 0.0, x, &mut sig);
            let mut eta_at = |e: f64, out: &mut [f64]| (jp.kernel.eta)(ctrl, 0.0, x, e, out);
            let sr = levy::compensated_sigma(&sig, d, &jd.small, &mut eta_at);
            cache[(c * n + i) * d * d..][..d * d].copy_from_slice(&sr);
        }
    }
    cache
}

/// Everything frozen at the start of one time level.
struct Level {
    t: f64,
    t_next: f64,
    u_prev: Vec<f64>,
    sup_prev: f64,
    pinned: Vec<f64>,
    pinned_sup: f64,
    zeta: Vec<f64>,
    zeta_plus_sup: f64,
    /// Central slopes, `n x d`; zeros when the driver ignores gradients and
    /// the viscosity is off.
    slope: Vec<f64>,
    /// Artificial-viscosity values, length `n`.
    visc: Vec<f64>,
    /// Linear jump term per `(control, node)`, packed control-major.
    kval: Vec<f64>,
    /// Nonlinear jump functional per `(control, node)`.
    bval: Vec<f64>,
}

impl Level {
    fn empty() -> Self {
        Self {
            t: 0.0,
            t_next: 0.0,
            u_prev: Vec::new(),
            sup_prev: 0.0,
            pinned: Vec::new(),
            pinned_sup: 0.0,
            zeta: Vec::new(),
            zeta_plus_sup: f64::NEG_INFINITY,
            slope: Vec::new(),
            visc: Vec::new(),
            kval: Vec::new(),
            bval: Vec::new(),
        }
    }
}

/// The stepping engine; implements [`PolicyProblem`] so each level is solved
/// by the shared policy iteration.
struct Engine<'a> {
    problem: &'a Problem,
    config: SchemeConfig,
    time: TimePartition,
    dtv: f64,
    h: f64,
    d: usize,
    n: usize,
    nc: usize,
    coords: Vec<f64>,
    uses_gradient: bool,
    needs_diffs: bool,
    any_dirichlet: bool,
    jump: Option<JumpData>,
    sigma_r_cache: Option<Vec<f64>>,
    /// Worst `k_sum + L_k L_m b_sum` over controls and nodes; feeds the
    /// a priori growth envelope.
    jump_growth_env: f64,
    cfl: CflReport,
    lvl: Level,
    /// Largest `|exterior|` value consumed while assembling this level,
    /// folded into the growth monitor.
    ext_seen: Cell<f64>,
    // Per-call scratch, reused to keep the residual path allocation-free.
    st: LocalStencil,
    sig: Vec<f64>,
    dri: Vec<f64>,
    eta: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(problem: &'a Problem, config: &SchemeConfig) -> Result<Self> {
        let grid = &problem.grid;
        let d = grid.dim();
        let n = grid.num_nodes();
        if d > 16 {
            return Err(SolverError::Unsupported(format!(
                "state dimension {d} exceeds the supported 16"
            )));
        }
        let h = grid.spacing()[0];
        for &s in grid.spacing() {
            if (s - h).abs() > 1e-12 * h {
                return Err(SolverError::InvalidConfig(
                    "the scheme needs the same spacing on every axis".into(),
                ));
            }
        }
        problem.bc.validate(grid)?;
        problem.obstacle.validate_on(grid)?;
        if problem.node_class.len() != n {
            return Err(SolverError::InvalidConfig(format!(
                "node classes cover {} nodes but the grid has {}",
                problem.node_class.len(),
                n
            )));
        }
        let any_dirichlet = problem
            .node_class
            .iter()
            .any(|c| *c == NodeClass::Dirichlet);
        if any_dirichlet && problem.bc.exterior.is_none() {
            return Err(SolverError::InvalidConfig(
                "pinned boundary nodes need an exterior extension to supply their values".into(),
            ));
        }
        if !(config.rho >= 0.0) || !config.rho.is_finite() {
            return Err(SolverError::InvalidConfig(format!(
                "penalty rate must be finite and nonnegative, got {}",
                config.rho
            )));
        }
        if !(config.policy_tol > 0.0) {
            return Err(SolverError::InvalidConfig(
                "policy tolerance must be positive".into(),
            ));
        }
        let time = match config.dt {
            DtRule::Lambda(l) => {
                if !(l > 0.0) || !l.is_finite() {
                    return Err(SolverError::InvalidConfig(format!(
                        "time-step factor must be positive, got {l}"
                    )));
                }
                TimePartition::from_target_dt(problem.horizon, l * h)?
            }
            DtRule::Steps(k) => TimePartition::new(problem.horizon, k)?,
        };
        let dtv = time.dt();
        let fp = FluxParams {
            theta: config.theta,
            dt: dtv,
            h,
        };
        fp.validate(problem.driver.gradient_lipschitz())?;
        let mu = problem.driver.monotonicity_bound();
        if dtv * mu.max(0.0) >= 1.0 - 1e-9 {
            return Err(SolverError::CflViolation {
                detail: format!(
                    "dt {dtv} times the monotonicity bound {mu} reaches 1; the implicit node \
                     equation loses diagonal dominance"
                ),
            });
        }
        let nc = problem.controls.len();
        let mut coords = vec![0.0; n * d];
        for i in 0..n {
            grid.coords_into(i, &mut coords[i * d..(i + 1) * d]);
        }
        let uses_gradient = problem.driver.uses_gradient();
        let needs_diffs = uses_gradient || config.theta > 0.0;
        let jump = match &problem.jumps {
            Some(jp) => Some(build_jump_data(problem, config, jp, h, 0.0)?),
            None => None,
        };
        let sigma_r_cache = match &jump {
            Some(jd) if problem.time_invariant => {
                Some(build_sigma_cache(problem, jd, &coords, d, n, nc))
            }
            _ => None,
        };
        let two_d_theta = 2.0 * d as f64 * config.theta;
        let (radius, gamma1, gamma2) = jump
            .as_ref()
            .map(|j| (j.r, j.gamma1, j.gamma2))
            .unwrap_or((0.0, 0.0, 0.0));
        let global_margin = 1.0 - dtv * gamma1 - two_d_theta;
        let mut jump_growth_env = 0.0f64;
        let node_margin = match &jump {
            Some(jd) => {
                let klip = problem.driver.jump_lipschitz();
                let mlip = problem.jumps.as_ref().expect("jump data exists").kernel.m_lipschitz;
                let mut worst = f64::INFINITY;
                for per in &jd.flats {
                    for fs in per {
                        let load = fs.k_sum + klip * mlip * fs.b_sum;
                        jump_growth_env = jump_growth_env.max(load);
                        worst = worst.min(1.0 - dtv * load - two_d_theta);
                    }
                }
                worst
            }
            None => 1.0 - two_d_theta,
        };
        let certified = global_margin >= -1e-12 && node_margin >= -1e-12;
        let cfl = CflReport {
            dt: dtv,
            radius,
            gamma1,
            gamma2,
            global_margin,
            node_margin,
            certified,
        };
        if !certified && !config.cfl_override {
            return Err(SolverError::CflViolation {
                detail: format!(
                    "explicit-part monotonicity margins are negative (global {global_margin:.6}, \
                     worst node {node_margin:.6}); shrink dt or theta, or set the override to \
                     run uncertified"
                ),
            });
        }
        Ok(Self {
            problem,
            config: config.clone(),
            time,
            dtv,
            h,
            d,
            n,
            nc,
            coords,
            uses_gradient,
            needs_diffs,
            any_dirichlet,
            jump,
            sigma_r_cache,
            jump_growth_env,
            cfl,
            lvl: Level::empty(),
            ext_seen: Cell::new(f64::NEG_INFINITY),
            st: LocalStencil::new(),
            sig: vec![0.0; d * d],
            dri: vec![0.0; d],
            eta: vec![0.0; d],
        })
    }

    /// Freeze everything explicit for the step from level `index`.
    fn prepare_level(&mut self, index: usize, u_prev: &Field) -> Result<()> {
        let d = self.d;
        let n = self.n;
        let t = self.time.t(index);
        let t_next = self.time.t(index + 1);
        self.lvl.t = t;
        self.lvl.t_next = t_next;
        self.lvl.u_prev.clear();
        self.lvl.u_prev.extend_from_slice(u_prev.values());
        self.lvl.sup_prev = u_prev.sup_norm();
        self.ext_seen.set(f64::NEG_INFINITY);

        self.lvl.pinned_sup = 0.0;
        if self.any_dirichlet {
            let ext = self
                .problem
                .bc
                .exterior
                .as_ref()
                .expect("checked at construction");
            self.lvl.pinned.resize(n, 0.0);
            for i in 0..n {
                if self.problem.node_class[i] == NodeClass::Dirichlet {
                    let x = &self.coords[i * d..(i + 1) * d];
                    let v = ext(t_next, x);
                    if !v.is_finite() {
                        return Err(SolverError::InvalidConfig(format!(
                            "exterior extension returned {v} at t={t_next}, x={x:?}"
                        )));
                    }
                    self.lvl.pinned[i] = v;
                    self.lvl.pinned_sup = self.lvl.pinned_sup.max(v.abs());
                }
            }
        }

        self.lvl.zeta_plus_sup = f64::NEG_INFINITY;
        if self.config.rho > 0.0 {
            self.lvl.zeta.resize(n, 0.0);
            let zf = &self.problem.obstacle.zeta;
            let mut top = f64::NEG_INFINITY;
            for i in 0..n {
                let z = zf(t, &self.coords[i * d..(i + 1) * d]);
                self.lvl.zeta[i] = z;
                top = top.max(z);
            }
            self.lvl.zeta_plus_sup = top.max(0.0);
        }

        if self.problem.jumps.is_some() && !self.problem.time_invariant && index > 0 {
            let jp = self.problem.jumps.as_ref().expect("just checked");
            self.jump = Some(build_jump_data(self.problem, &self.config, jp, self.h, t)?);
        }
        if let Some(jd) = &self.jump {
            let jp = self.problem.jumps.as_ref().expect("jump data exists");
            let extf = ExtendedField::build(u_prev, &self.problem.bc, t, &jd.pad_lo, &jd.pad_hi)?;
            debug_assert_eq!(extf.ext_strides(), &jd.ext_strides[..]);
            debug_assert_eq!(extf.base(0), jd.bases[0]);
            let data = extf.data();
            let mut env = 0.0f64;
            for &v in data {
                env = env.max(v.abs());
            }
            self.ext_seen.set(self.ext_seen.get().max(env));
            let m = &jp.kernel.m;
            self.lvl.kval.resize(self.nc * n, 0.0);
            self.lvl.bval.resize(self.nc * n, 0.0);
            for c in 0..self.nc {
                let per = &jd.flats[c];
                for i in 0..n {
                    if self.problem.node_class[i] == NodeClass::Dirichlet {
                        self.lvl.kval[c * n + i] = 0.0;
                        self.lvl.bval[c * n + i] = 0.0;
                        continue;
                    }
                    let fs = &per[i];
                    let base = jd.bases[i] as isize;
                    let u0 = data[base as usize];
                    let mut acc = 0.0;
                    for (o, w) in fs.k_off.iter().zip(&fs.k_w) {
                        acc += w * (data[(base + *o as isize) as usize] - u0);
                    }
                    self.lvl.kval[c * n + i] = acc;
                    let mut b = 0.0;
                    for q in 0..fs.rec_w.len() {
                        let lo = fs.rec_ptr[q] as usize;
                        let hi = fs.rec_ptr[q + 1] as usize;
                        let mut delta = 0.0;
                        for j in lo..hi {
                            delta += fs.c_w[j]
                                * (data[(base + fs.c_off[j] as isize) as usize] - u0);
                        }
                        b += fs.rec_w[q] * m(delta);
                    }
                    self.lvl.bval[c * n + i] = b;
                }
            }
        }

        self.lvl.slope.resize(n * d, 0.0);
        self.lvl.visc.resize(n, 0.0);
        if self.needs_diffs {
            let u = u_prev.values();
            let grid = &self.problem.grid;
            let bc = &self.problem.bc;
            let ext = bc.exterior.as_ref();
            let theta_dt = self.config.theta / self.dtv;
            let counts = grid.counts();
            let strides = grid.strides();
            let mut mi = vec![0usize; d];
            let mut px = vec![0.0; d];
            let mut env = f64::NEG_INFINITY;
            for i in 0..n {
                grid.multi_into(i, &mut mi);
                let x = &self.coords[i * d..(i + 1) * d];
                let u0 = u[i];
                let mut vsum = 0.0;
                for l in 0..d {
                    let up: Option<f64> = if mi[l] + 1 < counts[l] {
                        Some(u[i + strides[l]])
                    } else {
                        match bc.rule(l, 1) {
                            FaceRule::HomogeneousNeumann => Some(u[i - strides[l]]),
                            FaceRule::ExteriorExtension => {
                                px.copy_from_slice(x);
                                px[l] += self.h;
                                let v = (ext.expect("validated"))(t, &px);
                                env = env.max(v.abs());
                                Some(v)
                            }
                            FaceRule::EquationOnBoundary => None,
                        }
                    };
                    let dn: Option<f64> = if mi[l] >= 1 {
                        Some(u[i - strides[l]])
                    } else {
                        match bc.rule(l, 0) {
                            FaceRule::HomogeneousNeumann => Some(u[i + strides[l]]),
                            FaceRule::ExteriorExtension => {
                                px.copy_from_slice(x);
                                px[l] -= self.h;
                                let v = (ext.expect("validated"))(t, &px);
                                env = env.max(v.abs());
                                Some(v)
                            }
                            FaceRule::EquationOnBoundary => None,
                        }
                    };
                    let (dp, dm) = match (up, dn) {
                        (Some(a), Some(b)) => (a - u0, u0 - b),
                        (Some(a), None) => (a - u0, a - u0),
                        (None, Some(b)) => (u0 - b, u0 - b),
                        (None, None) => (0.0, 0.0),
                    };
                    self.lvl.slope[i * d + l] = (dp + dm) / (2.0 * self.h);
                    vsum += dp - dm;
                }
                self.lvl.visc[i] = theta_dt * vsum;
            }
            self.ext_seen.set(self.ext_seen.get().max(env));
        }
        Ok(())
    }

    /// Rebuild the per-node local stencil (and the compensated coefficients
    /// feeding it) into the scratch slots.
    fn rebuild_local(&mut self, i: usize, c: u32) -> Result<()> {
        let d = self.d;
        let ctrl = self.problem.controls.get(c);
        let x = &self.coords[i * d..(i + 1) * d];
        let t = self.lvl.t;
        if let Some(cache) = &self.sigma_r_cache {
            let at = (c as usize * self.n + i) * d * d;
            self.sig.copy_from_slice(&cache[at..at + d * d]);
        } else {
            (self.problem.sigma)(ctrl, t, x, &mut self.sig);
            if let Some(jd) = &self.jump {
                let jp = self.problem.jumps.as_ref().expect("jump data exists");
                let mut acc = [0.0f64; 16];
                for &(e, w) in jd.small.nodes() {
                    (jp.kernel.eta)(ctrl, t, x, e, &mut self.eta);
                    for a in 0..d {
                        acc[a] += w * self.eta[a] * self.eta[a];
                    }
                }
                for a in 0..d {
                    let s = self.sig[a * d + a];
                    self.sig[a * d + a] = (s * s + acc[a]).sqrt();
                }
            }
        }
        (self.problem.drift)(ctrl, t, x, &mut self.dri);
        if let Some(jd) = &self.jump {
            let fs = &jd.flats[c as usize][i];
            for a in 0..d {
                self.dri[a] -= fs.drift[a];
            }
        }
        match self.problem.local_kind {
            LocalKind::Upwind => local_op::build_upwind_into(
                &mut self.st,
                &self.problem.grid,
                &self.problem.bc,
                i,
                &self.sig,
                &self.dri,
            ),
            LocalKind::SemiLagrangian => local_op::build_semilagrangian_into(
                &mut self.st,
                &self.problem.grid,
                &self.problem.bc,
                i,
                &self.sig,
                &self.dri,
                self.dtv,
            ),
        }
    }

    /// `z = sigma_r^T slope` into a stack buffer; zeros when the driver
    /// ignores gradients.
    fn z_into(&self, slope: &[f64], zl: &mut [f64; 16]) {
        let d = self.d;
        if self.uses_gradient {
            for (j, slot) in zl.iter_mut().enumerate().take(d) {
                let mut acc = 0.0;
                for (l, s) in slope.iter().enumerate() {
                    acc += self.sig[l * d + j] * s;
                }
                *slot = acc;
            }
        }
    }
}

impl<'a> PolicyProblem for Engine<'a> {
    fn num_nodes(&self) -> usize {
        self.n
    }

    fn num_controls(&self) -> usize {
        self.nc
    }

    fn residual_at(&mut self, i: usize, c: u32, u: &[f64]) -> Result<f64> {
        let d = self.d;
        let y = u[i];
        if self.problem.node_class[i] == NodeClass::Dirichlet {
            return Ok(y - self.lvl.pinned[i]);
        }
        self.rebuild_local(i, c)?;
        let a = if self.st.outside().is_empty() {
            self.st.apply_interior(u, y)
        } else {
            let ext = self.problem.bc.exterior.as_ref().ok_or_else(|| {
                SolverError::InvalidConfig(
                    "a local stencil reaches outside the grid but no exterior extension is set"
                        .into(),
                )
            })?;
            let t_next = self.lvl.t_next;
            let seen = &self.ext_seen;
            self.st.apply(u, y, |p| {
                let v = ext(t_next, p);
                seen.set(seen.get().max(v.abs()));
                v
            })
        };
        let (kv, bv) = if self.jump.is_some() {
            let at = c as usize * self.n + i;
            (self.lvl.kval[at], self.lvl.bval[at])
        } else {
            (0.0, 0.0)
        };
        let ctrl = self.problem.controls.get(c);
        let x = &self.coords[i * d..(i + 1) * d];
        let slope = &self.lvl.slope[i * d..(i + 1) * d];
        let mut zl = [0.0f64; 16];
        self.z_into(slope, &mut zl);
        let mut f = self
            .problem
            .driver
            .eval(ctrl, self.lvl.t, x, y, &zl[..d], slope, bv)?
            + self.lvl.visc[i];
        if self.config.rho > 0.0 {
            f += self.config.rho * (self.lvl.zeta[i] - y).max(0.0);
        }
        Ok((y - self.lvl.u_prev[i]) - self.dtv * (a + kv + f))
    }

    fn slant_rows(&mut self, policy: &[u32], u: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
        let d = self.d;
        let mut rows = Vec::with_capacity(self.n);
        for i in 0..self.n {
            if self.problem.node_class[i] == NodeClass::Dirichlet {
                rows.push(vec![(i, 1.0)]);
                continue;
            }
            let c = policy[i];
            self.rebuild_local(i, c)?;
            let y = u[i];
            let bv = if self.jump.is_some() {
                self.lvl.bval[c as usize * self.n + i]
            } else {
                0.0
            };
            let ctrl = self.problem.controls.get(c);
            let x = &self.coords[i * d..(i + 1) * d];
            let slope = &self.lvl.slope[i * d..(i + 1) * d];
            let mut zl = [0.0f64; 16];
            self.z_into(slope, &mut zl);
            let mut s = self
                .problem
                .driver
                .slant_y(ctrl, self.lvl.t, x, y, &zl[..d], slope, bv)?;
            if self.config.rho > 0.0 && self.lvl.zeta[i] - y > 0.0 {
                s -= self.config.rho;
            }
            let legs = self.st.nodes();
            let mut row = Vec::with_capacity(legs.len() + 1);
            row.push((i, 1.0 + self.dtv * self.st.coeff_sum() - self.dtv * s));
            for &(j, w) in legs {
                row.push((j, -self.dtv * w));
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::lf_flux;
    use crate::grid::BoundaryConditions;
    use crate::levy::{LevyMeasure, QuadratureSpec};
    use crate::linalg::CsrMatrix;

    struct SimpleDriver {
        value_coeff: f64,
        z_coeff: f64,
        slope_coeff: f64,
        k_coeff: f64,
        source: f64,
        claimed_zero_bound: f64,
        grad_lip: f64,
        uses_grad: bool,
    }

    impl SimpleDriver {
        fn constant(source: f64) -> Self {
            Self {
                value_coeff: 0.0,
                z_coeff: 0.0,
                slope_coeff: 0.0,
                k_coeff: 0.0,
                source,
                claimed_zero_bound: source.abs(),
                grad_lip: 0.0,
                uses_grad: false,
            }
        }
    }

    impl Driver for SimpleDriver {
        fn eval(
            &self,
            _ctrl: &[f64],
            _t: f64,
            _x: &[f64],
            y: f64,
            z: &[f64],
            slope: &[f64],
            k: f64,
        ) -> Result<f64> {
            Ok(self.source
                + self.value_coeff * y
                + self.z_coeff * z[0]
                + self.slope_coeff * slope[0]
                + self.k_coeff * k)
        }
        fn slant_y(
            &self,
            _ctrl: &[f64],
            _t: f64,
            _x: &[f64],
            _y: f64,
            _z: &[f64],
            _slope: &[f64],
            _k: f64,
        ) -> Result<f64> {
            Ok(self.value_coeff)
        }
        fn monotonicity_bound(&self) -> f64 {
            self.value_coeff
        }
        fn gradient_lipschitz(&self) -> f64 {
            self.grad_lip
        }
        fn jump_lipschitz(&self) -> f64 {
            self.k_coeff.abs()
        }
        fn zero_bound(&self) -> f64 {
            self.claimed_zero_bound
        }
        fn growth(&self, y_abs: f64) -> f64 {
            self.value_coeff.abs() * y_abs
        }
        fn uses_gradient(&self) -> bool {
            self.uses_grad
        }
    }

    /// Source `amp * ctrl[0]`, no other dependence.
    struct ControlSource {
        amp: f64,
    }

    impl Driver for ControlSource {
        fn eval(
            &self,
            ctrl: &[f64],
            _t: f64,
            _x: &[f64],
            _y: f64,
            _z: &[f64],
            _slope: &[f64],
            _k: f64,
        ) -> Result<f64> {
            Ok(self.amp * ctrl[0])
        }
        fn slant_y(
            &self,
            _ctrl: &[f64],
            _t: f64,
            _x: &[f64],
            _y: f64,
            _z: &[f64],
            _slope: &[f64],
            _k: f64,
        ) -> Result<f64> {
            Ok(0.0)
        }
        fn monotonicity_bound(&self) -> f64 {
            0.0
        }
        fn gradient_lipschitz(&self) -> f64 {
            0.0
        }
        fn jump_lipschitz(&self) -> f64 {
            0.0
        }
        fn zero_bound(&self) -> f64 {
            self.amp.abs()
        }
        fn growth(&self, _y_abs: f64) -> f64 {
            0.0
        }
        fn uses_gradient(&self) -> bool {
            false
        }
    }

    fn exterior_of(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> crate::grid::ExteriorFn {
        Arc::new(f)
    }

    fn coeff_const(values: Vec<f64>) -> CoeffFn {
        Arc::new(move |_ctrl, _t, _x, out: &mut [f64]| out.copy_from_slice(&values))
    }

    fn line_problem(
        h: f64,
        horizon: f64,
        driver: Arc<dyn Driver>,
        obstacle: ObstacleSpec,
        bc: BoundaryConditions,
        sigma: f64,
        drift: f64,
    ) -> Problem {
        let grid = Arc::new(UniformGrid::from_spacing(&[0.0], &[1.0], h).unwrap());
        let n = grid.num_nodes();
        Problem {
            grid,
            bc,
            horizon,
            driver,
            obstacle,
            controls: ControlGrid::single(vec![0.0]),
            sigma: coeff_const(vec![sigma]),
            drift: coeff_const(vec![drift]),
            jumps: None,
            local_kind: LocalKind::Upwind,
            node_class: vec![NodeClass::Pde; n],
            time_invariant: true,
            model_hash: 0,
        }
    }

    #[test]
    fn transport_of_affine_data_is_exact_and_deterministic() {
        let b = 0.5;
        let bc = BoundaryConditions {
            faces: vec![[FaceRule::ExteriorExtension; 2]],
            exterior: Some(exterior_of(move |t, x| x[0] + b * t)),
        };
        let obstacle = ObstacleSpec::unconstrained(Arc::new(|x: &[f64]| x[0]));
        let problem = line_problem(
            0.1,
            1.0,
            Arc::new(SimpleDriver::constant(0.0)),
            obstacle,
            bc,
            0.0,
            b,
        );
        let config = SchemeConfig::new(DtRule::Steps(10));
        let out = run(&problem, &config).unwrap();
        let mut x = [0.0];
        for i in 0..problem.grid.num_nodes() {
            problem.grid.coords_into(i, &mut x);
            let exact = x[0] + b * 1.0;
            assert!(
                (out.final_field.values()[i] - exact).abs() < 1e-10,
                "node {i}: got {}, want {exact}",
                out.final_field.values()[i]
            );
        }
        assert!(out.cfl.certified);
        // Bitwise determinism across reruns.
        let again = run(&problem, &config).unwrap();
        assert_eq!(out.final_field.values(), again.final_field.values());
    }

    #[test]
    fn heat_equation_converges_to_the_exact_solution() {
        let exact = |t: f64, x: f64| (-std::f64::consts::PI.powi(2) * t).exp()
            * (std::f64::consts::PI * x).sin();
        let run_at = |h: f64, steps: usize| -> f64 {
            let bc = BoundaryConditions {
                faces: vec![[FaceRule::ExteriorExtension; 2]],
                exterior: Some(exterior_of(move |t, x| exact(t, x[0]))),
            };
            let obstacle = ObstacleSpec::unconstrained(Arc::new(move |x: &[f64]| exact(0.0, x[0])));
            let problem = line_problem(
                h,
                0.1,
                Arc::new(SimpleDriver::constant(0.0)),
                obstacle,
                bc,
                std::f64::consts::SQRT_2,
                0.0,
            );
            let out = run(&problem, &SchemeConfig::new(DtRule::Steps(steps))).unwrap();
            let mut worst = 0.0f64;
            let mut x = [0.0];
            for i in 0..problem.grid.num_nodes() {
                problem.grid.coords_into(i, &mut x);
                worst = worst.max((out.final_field.values()[i] - exact(0.1, x[0])).abs());
            }
            worst
        };
        let coarse = run_at(0.1, 10);
        let fine = run_at(0.05, 40);
        assert!(coarse < 0.03, "coarse error {coarse}");
        assert!(fine < coarse / 3.0, "no convergence: {coarse} -> {fine}");
    }

    #[test]
    fn decay_parks_at_the_penalized_obstacle_level() {
        let rho = 200.0;
        let bc = BoundaryConditions::uniform(1, FaceRule::HomogeneousNeumann);
        let obstacle = ObstacleSpec {
            zeta: Arc::new(|_t, _x| -0.1),
            initial: Arc::new(|_x| 0.0),
        };
        let problem = line_problem(
            0.1,
            5.0,
            Arc::new(SimpleDriver::constant(-5.0)),
            obstacle,
            bc,
            0.0,
            0.0,
        );
        let mut config = SchemeConfig::new(DtRule::Steps(50));
        config.rho = rho;
        let out = run(&problem, &config).unwrap();
        let parked = -0.1 - 5.0 / rho;
        for &v in out.final_field.values() {
            assert!((v - parked).abs() < 1e-12, "got {v}, want {parked}");
        }
        // The contact switch costs at most a couple of extra Newton steps.
        for s in &out.steps {
            assert!(s.iterations <= 3, "step {} took {} iterations", s.index, s.iterations);
        }
    }

    #[test]
    fn pinned_nodes_track_the_exterior_and_the_interior_follows() {
        let bc = BoundaryConditions {
            faces: vec![[FaceRule::ExteriorExtension; 2]],
            exterior: Some(exterior_of(|t, _x| 1.0 + t)),
        };
        let obstacle = ObstacleSpec::unconstrained(Arc::new(|_x: &[f64]| 1.0));
        let mut problem = line_problem(
            0.1,
            0.5,
            Arc::new(SimpleDriver::constant(1.0)),
            obstacle,
            bc,
            1.0,
            0.0,
        );
        let n = problem.grid.num_nodes();
        problem.node_class[0] = NodeClass::Dirichlet;
        problem.node_class[n - 1] = NodeClass::Dirichlet;
        let out = run(&problem, &SchemeConfig::new(DtRule::Steps(20))).unwrap();
        for (i, &v) in out.final_field.values().iter().enumerate() {
            assert!((v - 1.5).abs() < 1e-9, "node {i}: got {v}, want 1.5");
        }
        // Pinned rows are exact, not merely converged.
        assert_eq!(out.final_field.values()[0], 1.5);
        assert_eq!(out.final_field.values()[n - 1], 1.5);
    }

    #[test]
    fn one_step_matches_the_reference_flux_composition() {
        let h = 0.1;
        let dt = 0.05;
        let sigma = 0.5;
        let drift = 0.2;
        let theta = 0.3;
        let ext_fn = |t: f64, x: &[f64]| (2.0 * x[0]).sin() + 0.3 * t;
        let bc = BoundaryConditions {
            faces: vec![[FaceRule::ExteriorExtension; 2]],
            exterior: Some(exterior_of(move |t, x| ext_fn(t, x))),
        };
        let driver = SimpleDriver {
            value_coeff: -0.2,
            z_coeff: 0.4,
            slope_coeff: 0.3,
            k_coeff: 0.0,
            source: 0.1,
            claimed_zero_bound: 0.1,
            grad_lip: 0.4 * sigma + 0.3,
            uses_grad: true,
        };
        let obstacle = ObstacleSpec::unconstrained(Arc::new(move |x: &[f64]| ext_fn(0.0, x)));
        let problem = line_problem(h, dt, Arc::new(driver), obstacle, bc, sigma, drift);
        let mut config = SchemeConfig::new(DtRule::Steps(1));
        config.theta = theta;
        config.policy_tol = 1e-12;
        let out = run(&problem, &config).unwrap();

        let grid = &problem.grid;
        let n = grid.num_nodes();
        let u0 = Field::from_fn(grid.clone(), |x| ext_fn(0.0, x)).unwrap();
        let u1 = out.final_field.values();
        let fp = FluxParams { theta, dt, h };
        let check = SimpleDriver {
            value_coeff: -0.2,
            z_coeff: 0.4,
            slope_coeff: 0.3,
            k_coeff: 0.0,
            source: 0.1,
            claimed_zero_bound: 0.1,
            grad_lip: 0.4 * sigma + 0.3,
            uses_grad: true,
        };
        let mut st = LocalStencil::new();
        for i in 0..n {
            let x = grid.coords(i);
            // Implicit local part at the new level.
            local_op::build_upwind_into(&mut st, grid, &problem.bc, i, &[sigma], &[drift])
                .unwrap();
            let a = st.apply(u1, u1[i], |p| ext_fn(dt, p));
            // Explicit differences at the old level.
            let up = if i + 1 < n { u0.values()[i + 1] } else { ext_fn(0.0, &[x[0] + h]) };
            let dn = if i >= 1 { u0.values()[i - 1] } else { ext_fn(0.0, &[x[0] - h]) };
            let dplus = [up - u0.values()[i]];
            let dminus = [u0.values()[i] - dn];
            let flux = lf_flux(
                &check, &[0.0], 0.0, &x, u1[i], &dplus, &dminus, 0.0, &[sigma], &fp,
            )
            .unwrap();
            let res = (u1[i] - u0.values()[i]) - dt * (a + flux);
            assert!(res.abs() < 1e-9, "node {i}: defect {res}");
        }
    }

    #[test]
    fn one_step_with_jumps_matches_a_hand_assembled_system() {
        let h = 0.05;
        let dt = 0.05;
        let grid = Arc::new(UniformGrid::from_spacing(&[0.0], &[2.0], h).unwrap());
        let n = grid.num_nodes();
        let bump = |x: f64| (-4.0 * (x - 1.0) * (x - 1.0)).exp();
        let bc = BoundaryConditions {
            faces: vec![[FaceRule::ExteriorExtension; 2]],
            exterior: Some(exterior_of(move |_t, x| bump(x[0]))),
        };
        let measure = LevyMeasure::new(
            1,
            Arc::new(|e: f64| (-4.0 * e.abs()).exp()),
            0.0,
            1.0,
            QuadratureSpec::default(),
        )
        .unwrap();
        let kernel = NonlocalKernelSpec {
            eta: Arc::new(|_ctrl: &[f64], _t: f64, _x: &[f64], e: f64, out: &mut [f64]| {
                out[0] = 0.3 * e.clamp(-1.0, 1.0);
            }),
            gamma: Arc::new(|_ctrl: &[f64], _t: f64, _x: &[f64], e: f64| e.abs().min(1.0)),
            m: Arc::new(|s| s),
            m_lipschitz: 1.0,
            bound_const: 1.3,
        };
        let driver = SimpleDriver {
            value_coeff: 0.0,
            z_coeff: 0.0,
            slope_coeff: 0.0,
            k_coeff: 0.5,
            source: 0.0,
            claimed_zero_bound: 0.0,
            grad_lip: 0.0,
            uses_grad: false,
        };
        let obstacle = ObstacleSpec::unconstrained(Arc::new(move |x: &[f64]| bump(x[0])));
        let problem = Problem {
            grid: grid.clone(),
            bc: bc.clone(),
            horizon: dt,
            driver: Arc::new(driver),
            obstacle,
            controls: ControlGrid::single(vec![0.0]),
            sigma: coeff_const(vec![0.0]),
            drift: coeff_const(vec![0.0]),
            jumps: Some(JumpPart {
                measure: measure.clone(),
                kernel: NonlocalKernelSpec {
                    eta: kernel.eta.clone(),
                    gamma: kernel.gamma.clone(),
                    m: kernel.m.clone(),
                    m_lipschitz: 1.0,
                    bound_const: 1.3,
                },
            }),
            local_kind: LocalKind::Upwind,
            node_class: vec![NodeClass::Pde; n],
            time_invariant: true,
            model_hash: 1,
        };
        let mut config = SchemeConfig::new(DtRule::Steps(1));
        config.policy_tol = 1e-13;
        let out = run(&problem, &config).unwrap();
        assert!(out.cfl.certified, "margins: {:?}", out.cfl);

        // Hand assembly of the same step: compensated coefficients, explicit
        // jump terms through the reference appliers, implicit local solve.
        let r = measure.choose_r(h);
        let quad = measure.tail_quadrature(r).unwrap();
        let small = measure.small_jump_quadrature(r).unwrap();
        let u0 = Field::from_fn(grid.clone(), |x| bump(x[0])).unwrap();
        let mut stencils = Vec::with_capacity(n);
        for i in 0..n {
            stencils.push(levy::build_stencil(&quad, &kernel, &grid, i, &[0.0], 0.0).unwrap());
        }
        let mut pad = [0usize, 0];
        for st in &stencils {
            let (lo, hi) = st.reach();
            pad[0] = pad[0].max((-lo[0]).max(0) as usize);
            pad[1] = pad[1].max(hi[0].max(0) as usize);
        }
        let ext = ExtendedField::build(&u0, &bc, 0.0, &pad[..1], &pad[1..]).unwrap();
        let mut eta_at = |e: f64, out: &mut [f64]| (kernel.eta)(&[0.0], 0.0, &[0.0], e, out);
        let sigma_r = levy::compensated_sigma(&[0.0], 1, &small, &mut eta_at);
        let mut rows_in = Vec::with_capacity(n);
        let mut rhs = Vec::with_capacity(n);
        let mut local = Vec::with_capacity(n);
        for (i, st) in stencils.iter().enumerate() {
            let drift = [-st.drift_comp()[0]];
            let mut ls = LocalStencil::new();
            local_op::build_upwind_into(&mut ls, &grid, &bc, i, &sigma_r, &drift).unwrap();
            local.push(ls);
            let base = ext.base(i);
            let k = st.apply_k(&ext, base);
            let b = st.apply_b(&ext, base, &|s| s);
            rhs.push(u0.values()[i] + dt * (k + 0.5 * b));
            rows_in.push(i);
        }
        let (rows, extra) = local_op::assemble_implicit(&local, dt, dt, &bc).unwrap();
        let mat = CsrMatrix::from_rows(rows).unwrap();
        let full_rhs: Vec<f64> = rhs.iter().zip(&extra).map(|(a, b)| a + b).collect();
        let manual = mat.to_tridiag().unwrap().solve(&full_rhs).unwrap();
        for i in 0..n {
            let diff = (out.final_field.values()[i] - manual[i]).abs();
            assert!(diff < 1e-10, "node {i}: engine vs manual differ by {diff}");
        }
    }

    #[test]
    fn cfl_gate_is_loud_and_overridable() {
        let make = || {
            let bc = BoundaryConditions::uniform(1, FaceRule::HomogeneousNeumann);
            let obstacle = ObstacleSpec::unconstrained(Arc::new(|_x: &[f64]| 1.0));
            line_problem(
                0.1,
                0.3,
                Arc::new(SimpleDriver::constant(0.0)),
                obstacle,
                bc,
                0.3,
                0.0,
            )
        };
        let mut config = SchemeConfig::new(DtRule::Steps(3));
        config.theta = 0.6; // 2 d theta = 1.2 > 1
        let err = run(&make(), &config).unwrap_err();
        assert!(matches!(err, SolverError::CflViolation { .. }), "got {err:?}");
        config.cfl_override = true;
        let out = run(&make(), &config).unwrap();
        assert!(!out.cfl.certified);
        assert!(out.cfl.global_margin < 0.0);
        for &v in out.final_field.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn growth_monitor_catches_a_driver_that_understates_its_source() {
        let bc = BoundaryConditions::uniform(1, FaceRule::HomogeneousNeumann);
        let obstacle = ObstacleSpec::unconstrained(Arc::new(|_x: &[f64]| 1.0));
        let mut lying = SimpleDriver::constant(5.0);
        lying.claimed_zero_bound = 0.0;
        let problem = line_problem(0.1, 1.0, Arc::new(lying), obstacle, bc, 0.0, 0.0);
        let err = run(&problem, &SchemeConfig::new(DtRule::Steps(10))).unwrap_err();
        match err {
            SolverError::CflViolation { detail } => {
                assert!(detail.contains("a priori"), "unexpected detail: {detail}")
            }
            other => panic!("expected the growth monitor to fire, got {other:?}"),
        }
    }

    #[test]
    fn policy_picks_the_control_with_the_larger_source() {
        let bc = BoundaryConditions::uniform(1, FaceRule::HomogeneousNeumann);
        let obstacle = ObstacleSpec::unconstrained(Arc::new(|_x: &[f64]| 1.0));
        let mut problem = line_problem(
            0.1,
            0.3,
            Arc::new(ControlSource { amp: 2.0 }),
            obstacle,
            bc,
            0.1,
            0.0,
        );
        problem.controls = ControlGrid::box1d(0.0, 1.0, 2).unwrap();
        let out = run(&problem, &SchemeConfig::new(DtRule::Steps(3))).unwrap();
        // Minimizing the residual selects the largest source, so the field
        // grows at rate 2 exactly.
        for &v in out.final_field.values() {
            assert!((v - 1.6).abs() < 1e-12, "got {v}, want 1.6");
        }
        for s in &out.steps {
            assert!(s.iterations <= 3);
        }
    }

    #[test]
    fn snapshots_and_stats_are_bookkept() {
        let bc = BoundaryConditions::uniform(1, FaceRule::HomogeneousNeumann);
        let obstacle = ObstacleSpec::unconstrained(Arc::new(|_x: &[f64]| 0.0));
        let problem = line_problem(
            0.1,
            0.5,
            Arc::new(SimpleDriver::constant(1.0)),
            obstacle,
            bc,
            0.0,
            0.0,
        );
        let mut config = SchemeConfig::new(DtRule::Steps(5));
        config.snapshot_stride = 2;
        let out = run(&problem, &config).unwrap();
        let marks: Vec<usize> = out.snapshots.iter().map(|(k, _)| *k).collect();
        assert_eq!(marks, vec![2, 4]);
        assert_eq!(out.steps.len(), 5);
        for (k, s) in out.steps.iter().enumerate() {
            assert_eq!(s.index, k + 1);
            assert!((s.t - 0.1 * (k + 1) as f64).abs() < 1e-12);
            assert!(s.final_residual <= 1e-9);
        }
        // Snapshot contents match the marched field: u(t) = t for f = 1.
        for (k, f) in &out.snapshots {
            let want = 0.1 * *k as f64;
            for &v in f.values() {
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_residual_of_consecutive_levels_is_small() {
        let ext_fn = |t: f64, x: &[f64]| (2.0 * x[0]).sin() + 0.3 * t;
        let bc = BoundaryConditions {
            faces: vec![[FaceRule::ExteriorExtension; 2]],
            exterior: Some(exterior_of(move |t, x| ext_fn(t, x))),
        };
        let driver = SimpleDriver {
            value_coeff: -0.2,
            z_coeff: 0.4,
            slope_coeff: 0.3,
            k_coeff: 0.0,
            source: 0.1,
            claimed_zero_bound: 0.1,
            grad_lip: 0.5,
            uses_grad: true,
        };
        let obstacle = ObstacleSpec::unconstrained(Arc::new(move |x: &[f64]| ext_fn(0.0, x)));
        let problem = line_problem(0.1, 0.15, Arc::new(driver), obstacle, bc, 0.5, 0.2);
        let mut config = SchemeConfig::new(DtRule::Steps(3));
        config.theta = 0.3;
        config.policy_tol = 1e-12;
        config.snapshot_stride = 1;
        let out = run(&problem, &config).unwrap();
        let dt = 0.05;
        let u1 = &out.snapshots[0].1;
        let u2 = &out.snapshots[1].1;
        let res = step_residual(&problem, &config, 1, u1, u2).unwrap();
        let worst = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        assert!(worst <= 10.0 * config.policy_tol / dt + 1e-12, "residual {worst}");
    }

    #[test]
    fn invalid_setups_are_rejected_before_any_stepping() {
        let bc = || BoundaryConditions::uniform(1, FaceRule::HomogeneousNeumann);
        let obstacle = || ObstacleSpec::unconstrained(Arc::new(|_x: &[f64]| 0.0));
        let base = line_problem(
            0.1,
            1.0,
            Arc::new(SimpleDriver::constant(0.0)),
            obstacle(),
            bc(),
            0.0,
            0.0,
        );

        let err = run(&base, &SchemeConfig::new(DtRule::Lambda(0.0))).unwrap_err();
        assert!(matches!(err, SolverError::InvalidConfig(_)));

        let grid =
            Arc::new(UniformGrid::from_spacings(&[0.0, 0.0], &[1.0, 1.0], &[0.1, 0.05]).unwrap());
        let n = grid.num_nodes();
        let uneven = Problem {
            grid,
            bc: BoundaryConditions::uniform(2, FaceRule::HomogeneousNeumann),
            horizon: 1.0,
            driver: Arc::new(SimpleDriver::constant(0.0)),
            obstacle: obstacle(),
            controls: ControlGrid::single(vec![0.0]),
            sigma: coeff_const(vec![0.0, 0.0, 0.0, 0.0]),
            drift: coeff_const(vec![0.0, 0.0]),
            jumps: None,
            local_kind: LocalKind::Upwind,
            node_class: vec![NodeClass::Pde; n],
            time_invariant: true,
            model_hash: 0,
        };
        let err = run(&uneven, &SchemeConfig::new(DtRule::Steps(5))).unwrap_err();
        assert!(matches!(err, SolverError::InvalidConfig(_)));

        let mut pinned_without_exterior = line_problem(
            0.1,
            1.0,
            Arc::new(SimpleDriver::constant(0.0)),
            obstacle(),
            bc(),
            0.0,
            0.0,
        );
        pinned_without_exterior.node_class[0] = NodeClass::Dirichlet;
        let err = run(&pinned_without_exterior, &SchemeConfig::new(DtRule::Steps(5))).unwrap_err();
        assert!(matches!(err, SolverError::InvalidConfig(_)));
    }

    #[test]
    fn check_cfl_reports_the_rounded_step_without_running() {
        let bc = BoundaryConditions::uniform(1, FaceRule::HomogeneousNeumann);
        let obstacle = ObstacleSpec::unconstrained(Arc::new(|_x: &[f64]| 0.0));
        let problem = line_problem(
            0.1,
            1.0,
            Arc::new(SimpleDriver::constant(0.0)),
            obstacle,
            bc,
            0.2,
            0.0,
        );
        let report = check_cfl(&problem, &SchemeConfig::new(DtRule::Lambda(2.0))).unwrap();
        assert!((report.dt - 0.2).abs() < 1e-12, "dt {}", report.dt);
        assert!(report.certified);
        assert!((report.global_margin - 1.0).abs() < 1e-12);
        assert_eq!(report.radius, 0.0);

        let report = check_cfl(&problem, &SchemeConfig::new(DtRule::Steps(7))).unwrap();
        assert!((report.dt - 1.0 / 7.0).abs() < 1e-15);
    }
}
