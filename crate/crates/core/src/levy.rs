//! Jump-measure handling: truncation radius, tail quadratures, diffusion and
//! drift compensation, and interpolation-quadrature stencils for the two
//! nonlocal operators.
//!
//! Jumps smaller than a truncation radius `r` are folded into the diffusion
//! matrix (second moment) and the drift (first moment is part of the tail
//! compensation). Jumps larger than `r` are discretized by a panel quadrature
//! in the jump variable combined with monotone multilinear interpolation of
//! the state displacement onto grid nodes, yielding
//!
//! * a linear difference operator `K U (x_i) = sum_j k_j (U_{i+j} - U_i)` and
//! * a nonlinear one `B U (x_i) = sum_q w_q gamma_q m(delta_q)` with
//!   `delta_q = sum_j omega_{j,q} (U_{i+j} - U_i)`,
//!
//! both with nonnegative coefficients so the overall scheme stays monotone.
//!
//! Panels are log-spaced in `|e|` and anchored at `|e| = 1`: panel edges sit
//! at `exp(k w)` for integer `k`, so refining the truncation radius only adds
//! panels at the inner end and every shared panel is reused bit for bit.
//! Both half-lines are integrated explicitly (no symmetry shortcut).

use crate::error::{Result, SolverError};
use crate::grid::{ExtendedField, UniformGrid};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// Density of the jump measure with respect to Lebesgue measure on `R \ {0}`.
pub type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// State displacement of a jump: `(control, t, x, e, out)` fills `out` with
/// the d-vector `eta(control, t, x, e)`.
pub type JumpMapFn = Arc<dyn Fn(&[f64], f64, &[f64], f64, &mut [f64]) + Send + Sync>;
/// Nonnegative jump weight `gamma(control, t, x, e)` entering the nonlinear
/// jump functional.
pub type JumpWeightFn = Arc<dyn Fn(&[f64], f64, &[f64], f64) -> f64 + Send + Sync>;
/// Scalar nonlinearity applied to interpolated jump differences.
pub type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Truncation radius as a function of the mesh size and the singularity
/// order: `max(h^{1/kappa}, h)` for `kappa > 0` and `h` in the limit
/// `kappa = 0`.
pub fn truncation_radius(h: f64, kappa: f64) -> f64 {
    if kappa > 0.0 {
        h.powf(1.0 / kappa).max(h)
    } else {
        h
    }
}

/// Per-panel quadrature rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuadRule {
    /// One node per panel, first order in the panel width.
    Midpoint,
    /// Three-node Gauss-Legendre, exact through quintic panel integrands.
    GaussLegendre3,
}

/// How panels are laid out between the truncation radius and the cutoff.
#[derive(Clone, Copy, Debug)]
pub enum PanelRule {
    /// Log-spaced panels of the given width in `log |e|`, anchored at
    /// `|e| = 1` so panel edges are shared across truncation radii.
    LogWidth(f64),
    /// A fixed number of geometrically spaced panels; requires an explicit
    /// cutoff radius.
    Count(usize),
}

/// How the unbounded tail is cut off.
#[derive(Clone, Copy, Debug)]
pub enum CutoffRule {
    /// March panels outward until the geometric tail estimate drops below
    /// `tail_fraction` of the mass integrated so far.
    Auto { tail_fraction: f64 },
    /// Integrate up to a fixed radius.
    Radius(f64),
}

/// Quadrature configuration for one measure.
#[derive(Clone, Copy, Debug)]
pub struct QuadratureSpec {
    pub rule: QuadRule,
    pub panels: PanelRule,
    pub cutoff: CutoffRule,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            rule: QuadRule::GaussLegendre3,
            panels: PanelRule::LogWidth(0.1),
            cutoff: CutoffRule::Auto {
                tail_fraction: 1e-10,
            },
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        match self.panels {
            PanelRule::LogWidth(w) if !(w > 0.0 && w < 5.0) => {
                return Err(SolverError::InvalidConfig(format!(
                    "log panel width must lie in (0, 5), got {w}"
                )));
            }
            PanelRule::Count(0) => {
                return Err(SolverError::InvalidConfig(
                    "panel count must be positive".into(),
                ));
            }
            PanelRule::Count(_) => {
                if matches!(self.cutoff, CutoffRule::Auto { .. }) {
                    return Err(SolverError::InvalidConfig(
                        "a fixed panel count requires an explicit cutoff radius".into(),
                    ));
                }
            }
            _ => {}
        }
        match self.cutoff {
            CutoffRule::Auto { tail_fraction } if !(tail_fraction > 0.0 && tail_fraction <= 0.1) => {
                Err(SolverError::InvalidConfig(format!(
                    "tail fraction must lie in (0, 0.1], got {tail_fraction}"
                )))
            }
            CutoffRule::Radius(rad) if !(rad > 0.0) => Err(SolverError::InvalidConfig(
                "cutoff radius must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// A jump measure with a density, its singularity order `kappa` (the density
/// is bounded by `density_bound * |e|^{-1-kappa}` near the origin) and the
/// quadrature used for all of its integrals.
#[derive(Clone)]
pub struct LevyMeasure {
    density: DensityFn,
    kappa: f64,
    density_bound: f64,
    quad: QuadratureSpec,
}

impl LevyMeasure {
    /// Only one-dimensional jump spaces are supported; higher-dimensional
    /// measures are rejected with `Unsupported`.
    pub fn new(
        jump_dim: usize,
        density: DensityFn,
        kappa: f64,
        density_bound: f64,
        quad: QuadratureSpec,
    ) -> Result<Self> {
        if jump_dim != 1 {
            return Err(SolverError::Unsupported(format!(
                "only one-dimensional jump spaces are supported, got dimension {jump_dim}"
            )));
        }
        if !(0.0..2.0).contains(&kappa) {
            return Err(SolverError::InvalidConfig(format!(
                "singularity order must lie in [0, 2), got {kappa}"
            )));
        }
        if !(density_bound > 0.0) {
            return Err(SolverError::InvalidConfig(
                "density bound must be positive".into(),
            ));
        }
        quad.validate()?;
        // Spot-check the density bound near the origin.
        for &a in &[1e-3_f64, 1e-2, 0.1, 0.5, 0.99] {
            for e in [a, -a] {
                let v = density(e);
                if v < 0.0 {
                    return Err(SolverError::InvalidConfig(format!(
                        "density is negative at e = {e}"
                    )));
                }
                let cap = density_bound * a.powf(-1.0 - kappa);
                if v > cap * (1.0 + 1e-9) {
                    return Err(SolverError::InvalidConfig(format!(
                        "density {v} at e = {e} exceeds the declared bound {cap}"
                    )));
                }
            }
        }
        Ok(Self {
            density,
            kappa,
            density_bound,
            quad,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn density_bound(&self) -> f64 {
        self.density_bound
    }

    pub fn quad_spec(&self) -> &QuadratureSpec {
        &self.quad
    }

    pub fn density(&self, e: f64) -> f64 {
        (self.density)(e)
    }

    /// Truncation radius for mesh size `h` under this measure's singularity
    /// order.
    pub fn choose_r(&self, h: f64) -> f64 {
        truncation_radius(h, self.kappa)
    }

    fn rule_nodes(&self, lo: f64, hi: f64, out: &mut Vec<(f64, f64)>) {
        let c = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        match self.quad.rule {
            QuadRule::Midpoint => out.push((c, hi - lo)),
            QuadRule::GaussLegendre3 => {
                let s = (0.6_f64).sqrt();
                out.push((c - half * s, half * 5.0 / 9.0));
                out.push((c, half * 8.0 / 9.0));
                out.push((c + half * s, half * 5.0 / 9.0));
            }
        }
    }

    /// Measure mass of one panel `[lo, hi]` in `|e|`, both signs, with an
    /// extra scalar factor `scale(|e|)` on the integrand.
    fn panel_mass(&self, lo: f64, hi: f64, scale: &dyn Fn(f64) -> f64, buf: &mut Vec<(f64, f64)>) -> Result<f64> {
        buf.clear();
        self.rule_nodes(lo, hi, buf);
        let mut m = 0.0;
        for &(a, w) in buf.iter() {
            for e in [a, -a] {
                let v = (self.density)(e);
                if v < 0.0 {
                    return Err(SolverError::InvalidConfig(format!(
                        "density is negative at e = {e}"
                    )));
                }
                m += w * v * scale(a);
            }
        }
        Ok(m)
    }

    fn log_width(&self) -> f64 {
        match self.quad.panels {
            PanelRule::LogWidth(w) => w,
            // Auto marches use the default width even under a fixed count.
            PanelRule::Count(_) => 0.1,
        }
    }

    /// Quadrature over the jump tail `{|e| > r}` with the density folded into
    /// the node weights (nodes carry signed positions).
    pub fn tail_quadrature(&self, r: f64) -> Result<TailQuadrature> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(SolverError::InvalidConfig(format!(
                "truncation radius must be positive and finite, got {r}"
            )));
        }
        self.quad.validate()?;
        let edges = match (self.quad.panels, self.quad.cutoff) {
            (PanelRule::Count(n), CutoffRule::Radius(rad)) => {
                if rad <= r {
                    return Err(SolverError::InvalidConfig(
                        "cutoff radius must exceed the truncation radius".into(),
                    ));
                }
                let ratio = (rad / r).powf(1.0 / n as f64);
                let mut e = Vec::with_capacity(n + 1);
                for i in 0..=n {
                    e.push(r * ratio.powi(i as i32));
                }
                *e.last_mut().unwrap() = rad;
                e
            }
            (PanelRule::LogWidth(w), CutoffRule::Radius(rad)) => {
                if rad <= r {
                    return Err(SolverError::InvalidConfig(
                        "cutoff radius must exceed the truncation radius".into(),
                    ));
                }
                anchored_edges(r, rad, w)
            }
            (PanelRule::LogWidth(_), CutoffRule::Auto { tail_fraction }) => {
                self.march_outer_edges(r, tail_fraction)?
            }
            (PanelRule::Count(_), CutoffRule::Auto { .. }) => {
                unreachable!("validate() rejects fixed panel counts without a cutoff radius")
            }
        };
        self.quadrature_from_edges(&edges, r)
    }

    /// Quadrature over the small-jump region `{0 < |e| < r}`, marching panels
    /// toward the origin until the second-moment-weighted mass of the next
    /// panels is negligible. Integrands must vanish at least quadratically at
    /// the origin (jump maps do, by the linear-growth bound).
    pub fn small_jump_quadrature(&self, r: f64) -> Result<TailQuadrature> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(SolverError::InvalidConfig(format!(
                "truncation radius must be positive and finite, got {r}"
            )));
        }
        let w = self.log_width();
        let tail_fraction = match self.quad.cutoff {
            CutoffRule::Auto { tail_fraction } => tail_fraction,
            CutoffRule::Radius(_) => 1e-10,
        };
        let scale = |a: f64| a * a;
        let mut buf = Vec::with_capacity(3);
        let mut edges = vec![r];
        let mut hi = r;
        let mut total = 0.0_f64;
        let mut prev: Option<f64> = None;
        // First edge strictly below r on the anchored ladder.
        let mut k = (r.ln() / w).ceil() as i64 - 1;
        if ((k + 1) as f64 * w).exp() < r * (1.0 - 1e-12) {
            k += 1;
        }
        for step in 0.. {
            let lo = ((k - step) as f64 * w).exp().min(hi * (1.0 - 1e-15));
            if lo <= 0.0 {
                break;
            }
            let m = self.panel_mass(lo, hi, &scale, &mut buf)?;
            edges.push(lo);
            total += m;
            if let Some(pm) = prev {
                if m > 0.0 && m < pm {
                    let q = m / pm;
                    if m * q / (1.0 - q) <= tail_fraction * total.max(f64::MIN_POSITIVE) {
                        break;
                    }
                }
                if m == 0.0 && pm == 0.0 && lo < r * 1e-9 {
                    break;
                }
            }
            if step > 400_000 {
                return Err(SolverError::DivergentIntegral(format!(
                    "small-jump second moment does not settle below r = {r}"
                )));
            }
            prev = Some(m);
            hi = lo;
        }
        edges.reverse();
        self.quadrature_from_edges(&edges, r)
    }

    fn march_outer_edges(&self, r: f64, tail_fraction: f64) -> Result<Vec<f64>> {
        let w = self.log_width();
        let one = |_: f64| 1.0;
        let mut buf = Vec::with_capacity(3);
        let mut edges = vec![r];
        let mut lo = r;
        let mut total = 0.0_f64;
        let mut prev: Option<f64> = None;
        // First anchored edge strictly above r.
        let mut k = (r.ln() / w).floor() as i64 + 1;
        if ((k - 1) as f64 * w).exp() > r * (1.0 + 1e-12) {
            k -= 1;
        }
        loop {
            let hi = (k as f64 * w).exp().max(lo * (1.0 + 1e-15));
            let m = self.panel_mass(lo, hi, &one, &mut buf)?;
            edges.push(hi);
            total += m;
            if hi > 1.0 {
                if let Some(pm) = prev {
                    if m > 0.0 && m < pm {
                        let q = m / pm;
                        if m * q / (1.0 - q) <= tail_fraction * total.max(f64::MIN_POSITIVE) {
                            break;
                        }
                    }
                    if m == 0.0 && pm == 0.0 && hi > 64.0 * r.max(1.0) {
                        break;
                    }
                }
            }
            if edges.len() > 200_000 {
                return Err(SolverError::DivergentIntegral(format!(
                    "tail mass beyond r = {r} does not converge (density tail too heavy)"
                )));
            }
            prev = Some(m);
            lo = hi;
            k += 1;
        }
        Ok(edges)
    }

    fn quadrature_from_edges(&self, edges: &[f64], r: f64) -> Result<TailQuadrature> {
        let mut nodes = Vec::new();
        let mut buf = Vec::with_capacity(3);
        for pair in edges.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            if !(hi > lo) {
                continue;
            }
            buf.clear();
            self.rule_nodes(lo, hi, &mut buf);
            for &(a, w) in buf.iter() {
                for e in [a, -a] {
                    let v = (self.density)(e);
                    if v < 0.0 {
                        return Err(SolverError::InvalidConfig(format!(
                            "density is negative at e = {e}"
                        )));
                    }
                    if v * w > 0.0 {
                        nodes.push((e, v * w));
                    }
                }
            }
        }
        Ok(TailQuadrature {
            nodes,
            r,
            cutoff: *edges.last().unwrap_or(&r),
        })
    }

    /// Tail mass `integral over {|e| > r} of the measure` (rebuilds the
    /// quadrature; hold a `TailQuadrature` to amortize).
    pub fn gamma1(&self, r: f64) -> Result<f64> {
        Ok(self.tail_quadrature(r)?.integrate(|_| 1.0))
    }

    /// Tail small moment `integral over {|e| > r} of (1 and |e|) d(measure)`.
    pub fn gamma2(&self, r: f64) -> Result<f64> {
        Ok(self.tail_quadrature(r)?.integrate(|e| e.abs().min(1.0)))
    }
}

/// Flattened quadrature nodes over a jump region, density already folded into
/// the weights: `integrate(f) = sum_q w_q f(e_q)` approximates
/// `integral f(e) d(measure)` over the region.
#[derive(Clone, Debug)]
pub struct TailQuadrature {
    nodes: Vec<(f64, f64)>,
    r: f64,
    cutoff: f64,
}

impl TailQuadrature {
    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().map(|&(e, w)| w * f(e)).sum()
    }
}

/// Jump kernel of one model: displacement map, weight, and the scalar
/// nonlinearity with its Lipschitz data.
#[derive(Clone)]
pub struct NonlocalKernelSpec {
    pub eta: JumpMapFn,
    pub gamma: JumpWeightFn,
    pub m: ScalarMap,
    pub m_lipschitz: f64,
    /// Linear-growth constant: `|eta|_1 + gamma <= bound_const * (1 and |e|)`.
    pub bound_const: f64,
}

impl NonlocalKernelSpec {
    pub fn validate(&self) -> Result<()> {
        if (self.m)(0.0).abs() > 1e-14 {
            return Err(SolverError::InvalidConfig(
                "jump nonlinearity must vanish at zero".into(),
            ));
        }
        if !(self.m_lipschitz >= 0.0) || !(self.bound_const > 0.0) {
            return Err(SolverError::InvalidConfig(
                "jump kernel constants must be nonnegative (growth bound positive)".into(),
            ));
        }
        // Spot-check that m is nondecreasing and Lipschitz on a coarse ladder.
        let pts: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.25).collect();
        for p in pts.windows(2) {
            let (a, b) = ((self.m)(p[0]), (self.m)(p[1]));
            if b < a - 1e-12 {
                return Err(SolverError::InvalidConfig(
                    "jump nonlinearity must be nondecreasing".into(),
                ));
            }
            if (b - a).abs() > self.m_lipschitz * (p[1] - p[0]) + 1e-12 {
                return Err(SolverError::InvalidConfig(
                    "jump nonlinearity exceeds its declared Lipschitz constant".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Multilinear interpolation weights for a displacement measured from a grid
/// node, as signed node shifts with nonnegative weights summing to one.
/// Fractions within 1e-12 of a lattice point are snapped, so displacements
/// landing on nodes produce a single unit weight.
pub fn interp_weights(displacement: &[f64], spacing: &[f64]) -> Vec<(Vec<i32>, f64)> {
    let d = displacement.len();
    let mut axis_parts: Vec<Vec<(i32, f64)>> = Vec::with_capacity(d);
    for l in 0..d {
        let s = displacement[l] / spacing[l];
        let lo = s.floor();
        let frac = s - lo;
        let lo = lo as i32;
        if frac.abs() <= 1e-12 {
            axis_parts.push(vec![(lo, 1.0)]);
        } else if frac >= 1.0 - 1e-12 {
            axis_parts.push(vec![(lo + 1, 1.0)]);
        } else {
            axis_parts.push(vec![(lo, 1.0 - frac), (lo + 1, frac)]);
        }
    }
    let mut corners: Vec<(Vec<i32>, f64)> = vec![(Vec::new(), 1.0)];
    for part in axis_parts {
        let mut next = Vec::with_capacity(corners.len() * part.len());
        for (shift, w) in &corners {
            for &(i, wi) in &part {
                let mut s = shift.clone();
                s.push(i);
                next.push((s, w * wi));
            }
        }
        corners = next;
    }
    corners
}

/// Interpolation-quadrature stencil of the nonlocal operators at one
/// (node, control, time): merged quadrature records for the nonlinear
/// operator, collapsed coefficients for the linear one, the drift
/// compensation vector, and the coefficient sums that feed the stability
/// budget. The center shift never appears (its difference vanishes).
#[derive(Clone, Debug, Default)]
pub struct NonlocalStencil {
    dim: usize,
    rec_wgamma: Vec<f64>,
    rec_ptr: Vec<u32>,
    corner_shift: Vec<i32>,
    corner_weight: Vec<f64>,
    k_shift: Vec<i32>,
    k_weight: Vec<f64>,
    b_shift: Vec<i32>,
    b_weight: Vec<f64>,
    k_sum: f64,
    b_sum: f64,
    drift_comp: Vec<f64>,
    reach_lo: Vec<i32>,
    reach_hi: Vec<i32>,
}

impl NonlocalStencil {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_records(&self) -> usize {
        self.rec_wgamma.len()
    }

    pub fn k_coeffs(&self) -> impl Iterator<Item = (&[i32], f64)> {
        self.k_shift
            .chunks_exact(self.dim.max(1))
            .zip(self.k_weight.iter().copied())
    }

    pub fn b_coeffs(&self) -> impl Iterator<Item = (&[i32], f64)> {
        self.b_shift
            .chunks_exact(self.dim.max(1))
            .zip(self.b_weight.iter().copied())
    }

    /// Sum of the linear-operator coefficients (bounded by the tail mass).
    pub fn k_sum(&self) -> f64 {
        self.k_sum
    }

    /// Sum of the weight-operator coefficients (bounded by the growth
    /// constant times the tail small moment).
    pub fn b_sum(&self) -> f64 {
        self.b_sum
    }

    /// `integral over {|e| > r} of eta d(measure)`, subtracted from the drift
    /// of the compensated local generator.
    pub fn drift_comp(&self) -> &[f64] {
        &self.drift_comp
    }

    /// Farthest shifts referenced per axis (lower, upper); the extended field
    /// must be padded at least this far.
    pub fn reach(&self) -> (&[i32], &[i32]) {
        (&self.reach_lo, &self.reach_hi)
    }

    /// Raw record arrays `(weights, pointers, corner shifts, corner weights)`
    /// for callers that pre-resolve the shifts against a fixed extended
    /// layout and apply the stencil through flat offsets.
    pub fn record_parts(&self) -> (&[f64], &[u32], &[i32], &[f64]) {
        (
            &self.rec_wgamma,
            &self.rec_ptr,
            &self.corner_shift,
            &self.corner_weight,
        )
    }

    /// Linear jump operator `sum_j k_j (U_{i+j} - U_i)`.
    pub fn apply_k(&self, ext: &ExtendedField, base: usize) -> f64 {
        let u0 = ext.get(base);
        let mut acc = 0.0;
        for (shift, w) in self.k_coeffs() {
            acc += w * (ext.get_shifted(base, shift) - u0);
        }
        acc
    }

    /// Nonlinear jump functional
    /// `sum_q wgamma_q m(sum_c omega_c (U_{i+c} - U_i))`.
    pub fn apply_b(&self, ext: &ExtendedField, base: usize, m: &dyn Fn(f64) -> f64) -> f64 {
        let u0 = ext.get(base);
        let d = self.dim.max(1);
        let mut acc = 0.0;
        for q in 0..self.rec_wgamma.len() {
            let lo = self.rec_ptr[q] as usize;
            let hi = self.rec_ptr[q + 1] as usize;
            let mut delta = 0.0;
            for c in lo..hi {
                let shift = &self.corner_shift[c * d..(c + 1) * d];
                delta += self.corner_weight[c] * (ext.get_shifted(base, shift) - u0);
            }
            acc += self.rec_wgamma[q] * m(delta);
        }
        acc
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        dim: usize,
        rec_wgamma: Vec<f64>,
        rec_ptr: Vec<u32>,
        corner_shift: Vec<i32>,
        corner_weight: Vec<f64>,
        k_shift: Vec<i32>,
        k_weight: Vec<f64>,
        b_shift: Vec<i32>,
        b_weight: Vec<f64>,
        drift_comp: Vec<f64>,
    ) -> Self {
        let k_sum = k_weight.iter().sum();
        let b_sum = b_weight.iter().sum();
        let mut s = Self {
            dim,
            rec_wgamma,
            rec_ptr,
            corner_shift,
            corner_weight,
            k_shift,
            k_weight,
            b_shift,
            b_weight,
            k_sum,
            b_sum,
            drift_comp,
            reach_lo: vec![0; dim],
            reach_hi: vec![0; dim],
        };
        s.recompute_reach();
        s
    }

    fn recompute_reach(&mut self) {
        let d = self.dim.max(1);
        let mut lo = vec![0i32; self.dim];
        let mut hi = vec![0i32; self.dim];
        for chunk in self
            .k_shift
            .chunks_exact(d)
            .chain(self.b_shift.chunks_exact(d))
            .chain(self.corner_shift.chunks_exact(d))
        {
            for axis in 0..self.dim {
                lo[axis] = lo[axis].min(chunk[axis]);
                hi[axis] = hi[axis].max(chunk[axis]);
            }
        }
        self.reach_lo = lo;
        self.reach_hi = hi;
    }

    pub(crate) fn parts(
        &self,
    ) -> (
        usize,
        &[f64],
        &[u32],
        &[i32],
        &[f64],
        &[i32],
        &[f64],
        &[i32],
        &[f64],
        &[f64],
    ) {
        (
            self.dim,
            &self.rec_wgamma,
            &self.rec_ptr,
            &self.corner_shift,
            &self.corner_weight,
            &self.k_shift,
            &self.k_weight,
            &self.b_shift,
            &self.b_weight,
            &self.drift_comp,
        )
    }
}

/// Build the nonlocal stencil of one (node, control, time) from a tail
/// quadrature. Records with identical interpolation corners (saturated jump
/// maps) are merged; corners at the center shift are dropped because their
/// differences vanish.
pub fn build_stencil(
    quad: &TailQuadrature,
    kernel: &NonlocalKernelSpec,
    grid: &UniformGrid,
    node: usize,
    ctrl: &[f64],
    t: f64,
) -> Result<NonlocalStencil> {
    let d = grid.dim();
    let x = grid.coords(node);
    let mut eta = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut k_map: BTreeMap<Vec<i32>, f64> = BTreeMap::new();
    let mut b_map: BTreeMap<Vec<i32>, f64> = BTreeMap::new();
    let mut rec_index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut records: Vec<(f64, Vec<(Vec<i32>, f64)>)> = Vec::new();

    for &(e, nu_w) in quad.nodes() {
        (kernel.eta)(ctrl, t, &x, e, &mut eta);
        let g = (kernel.gamma)(ctrl, t, &x, e);
        if g < 0.0 {
            return Err(SolverError::InvalidConfig(format!(
                "jump weight is negative at e = {e}"
            )));
        }
        for axis in 0..d {
            drift[axis] += nu_w * eta[axis];
        }
        let mut corners: Vec<(Vec<i32>, f64)> = interp_weights(&eta, grid.spacing())
            .into_iter()
            .filter(|(s, w)| *w > 0.0 && s.iter().any(|&i| i != 0))
            .collect();
        corners.sort_by(|a, b| a.0.cmp(&b.0));
        for (shift, w) in &corners {
            *k_map.entry(shift.clone()).or_insert(0.0) += nu_w * w;
            if g > 0.0 {
                *b_map.entry(shift.clone()).or_insert(0.0) += nu_w * g * w;
            }
        }
        if g > 0.0 && !corners.is_empty() {
            let mut key = Vec::with_capacity(corners.len() * (d + 1));
            for (shift, w) in &corners {
                for &s in shift {
                    key.push(s as u32 as u64);
                }
                key.push(w.to_bits());
            }
            match rec_index.get(&key) {
                Some(&i) => records[i].0 += nu_w * g,
                None => {
                    rec_index.insert(key, records.len());
                    records.push((nu_w * g, corners));
                }
            }
        }
    }

    let mut rec_wgamma = Vec::with_capacity(records.len());
    let mut rec_ptr = Vec::with_capacity(records.len() + 1);
    let mut corner_shift = Vec::new();
    let mut corner_weight = Vec::new();
    rec_ptr.push(0u32);
    for (wg, corners) in records {
        rec_wgamma.push(wg);
        for (shift, w) in corners {
            corner_shift.extend_from_slice(&shift);
            corner_weight.push(w);
        }
        rec_ptr.push(corner_weight.len() as u32);
    }
    let mut k_shift = Vec::with_capacity(k_map.len() * d);
    let mut k_weight = Vec::with_capacity(k_map.len());
    for (shift, w) in k_map {
        if w > 0.0 {
            k_shift.extend_from_slice(&shift);
            k_weight.push(w);
        }
    }
    let mut b_shift = Vec::with_capacity(b_map.len() * d);
    let mut b_weight = Vec::with_capacity(b_map.len());
    for (shift, w) in b_map {
        if w > 0.0 {
            b_shift.extend_from_slice(&shift);
            b_weight.push(w);
        }
    }
    Ok(NonlocalStencil::from_parts(
        d,
        rec_wgamma,
        rec_ptr,
        corner_shift,
        corner_weight,
        k_shift,
        k_weight,
        b_shift,
        b_weight,
        drift,
    ))
}

/// Convenience wrapper building the tail quadrature for `r` internally.
#[allow(clippy::too_many_arguments)]
pub fn build_stencil_at(
    measure: &LevyMeasure,
    kernel: &NonlocalKernelSpec,
    grid: &UniformGrid,
    node: usize,
    ctrl: &[f64],
    t: f64,
    r: f64,
) -> Result<NonlocalStencil> {
    let quad = measure.tail_quadrature(r)?;
    build_stencil(&quad, kernel, grid, node, ctrl, t)
}

/// Diffusion matrix compensated for small jumps: off-diagonals are copied,
/// diagonal `i` becomes `sqrt(sigma_ii^2 + integral over {|e| < r} of
/// eta_i^2 d(measure))`.
pub fn compensated_sigma(
    sigma: &[f64],
    d: usize,
    small_jumps: &TailQuadrature,
    eta: &mut dyn FnMut(f64, &mut [f64]),
) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut eta_buf = vec![0.0; d];
    for &(e, w) in small_jumps.nodes() {
        eta(e, &mut eta_buf);
        for axis in 0..d {
            acc[axis] += w * eta_buf[axis] * eta_buf[axis];
        }
    }
    let mut out = sigma.to_vec();
    for axis in 0..d {
        let s = sigma[axis * d + axis];
        out[axis * d + axis] = (s * s + acc[axis]).sqrt();
    }
    out
}

fn anchored_edges(r: f64, cutoff: f64, w: f64) -> Vec<f64> {
    let mut edges = vec![r];
    let mut k = (r.ln() / w).floor() as i64 + 1;
    if ((k - 1) as f64 * w).exp() > r * (1.0 + 1e-12) {
        k -= 1;
    }
    loop {
        let e = (k as f64 * w).exp();
        if e >= cutoff * (1.0 - 1e-12) {
            break;
        }
        if e > *edges.last().unwrap() * (1.0 + 1e-12) {
            edges.push(e);
        }
        k += 1;
    }
    edges.push(cutoff);
    edges
}
