//! Driver abstraction, Lax-Friedrichs numerical flux and the penalized
//! driver.
//!
//! A driver is the nonlinearity `f(control, t, x, y, z, slope, k)` where `y`
//! is the unknown's value, `z = sigma_r^T Du` the diffusion-weighted
//! gradient, `slope` the raw central gradient (some models consume it
//! directly), and `k` the nonlinear jump functional. Drivers must be
//! monotone in `y`: the slant derivative stays below the declared bound
//! everywhere (negative bounds give contraction; positive bounds are allowed
//! and tighten the admissible time step).
//!
//! The numerical flux adds an explicit artificial-viscosity term
//! `(theta / dt) * sum_l (delta_plus_l - delta_minus_l)` built from raw
//! one-step differences, which makes the explicit side of the scheme monotone
//! whenever `theta` dominates the gradient Lipschitz constant times
//! `lambda = dt / h`.

use crate::error::{Result, SolverError};
use std::sync::Arc;

/// Model nonlinearity with its monotonicity and Lipschitz data.
///
/// The slant derivative is the y-derivative where it exists, with the limit
/// from above at kinks (consistent with how the penalty indicator is
/// defined). Implementations must guarantee `slant_y <= monotonicity_bound`
/// everywhere and the slant identity
/// `[f(y + e) - f(y) - slant_y(y + e) * e] / e -> 0` as `e` decreases to 0.
pub trait Driver: Send + Sync {
    #[allow(clippy::too_many_arguments)]
    fn eval(
        &self,
        ctrl: &[f64],
        t: f64,
        x: &[f64],
        y: f64,
        z: &[f64],
        slope: &[f64],
        k: f64,
    ) -> Result<f64>;

    #[allow(clippy::too_many_arguments)]
    fn slant_y(
        &self,
        ctrl: &[f64],
        t: f64,
        x: &[f64],
        y: f64,
        z: &[f64],
        slope: &[f64],
        k: f64,
    ) -> Result<f64>;

    /// Upper bound on the slant derivative in `y`.
    fn monotonicity_bound(&self) -> f64;

    /// Lipschitz constant with respect to the gradient arguments (`z` and
    /// `slope` channels combined, measured against the raw gradient `Du`).
    fn gradient_lipschitz(&self) -> f64;

    /// Lipschitz constant with respect to the jump argument `k`.
    fn jump_lipschitz(&self) -> f64;

    /// Bound on `|f(control, t, x, 0, 0, 0)|` over the domain; feeds the
    /// a priori estimate.
    fn zero_bound(&self) -> f64;

    /// Growth envelope in `y`: `|f(..., y, z, k)| <= zero_bound + growth(|y|)
    /// + C (|z| + |k|)`.
    fn growth(&self, y_abs: f64) -> f64;

    /// False when the driver ignores `z` and `slope`; lets the scheme skip
    /// gradient precomputation and run with zero artificial viscosity.
    fn uses_gradient(&self) -> bool {
        true
    }

    /// Interval of `y` values the driver accepts; outside it `eval` fails
    /// with a domain error.
    fn admissible_y(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Obstacle and initial data of the variational inequality.
#[derive(Clone)]
pub struct ObstacleSpec {
    pub zeta: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    pub initial: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl ObstacleSpec {
    /// A problem with no early-exercise constraint: the obstacle is minus
    /// infinity everywhere, so the penalty term vanishes identically and the
    /// domination check below is vacuous.
    pub fn unconstrained(initial: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>) -> Self {
        Self {
            zeta: Arc::new(|_, _| f64::NEG_INFINITY),
            initial,
        }
    }

    /// The initial condition must dominate the obstacle at time zero.
    pub fn validate_on(&self, grid: &crate::grid::UniformGrid) -> Result<()> {
        let mut x = vec![0.0; grid.dim()];
        for i in 0..grid.num_nodes() {
            grid.coords_into(i, &mut x);
            let g = (self.initial)(&x);
            let z = (self.zeta)(0.0, &x);
            if g < z - 1e-12 {
                return Err(SolverError::InvalidConfig(format!(
                    "initial condition {g} lies below the obstacle {z} at {x:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Artificial-viscosity parameters of the numerical flux.
#[derive(Clone, Copy, Debug)]
pub struct FluxParams {
    pub theta: f64,
    pub dt: f64,
    pub h: f64,
}

impl FluxParams {
    pub fn lambda(&self) -> f64 {
        self.dt / self.h
    }

    /// The viscosity must dominate the flux's gradient sensitivity:
    /// `theta > gradient_lipschitz * lambda`, with `theta = 0` admissible
    /// only for gradient-free drivers.
    pub fn validate(&self, gradient_lipschitz: f64) -> Result<()> {
        if !(self.dt > 0.0) || !(self.h > 0.0) || !(self.theta >= 0.0) {
            return Err(SolverError::InvalidConfig(
                "flux parameters must be positive (theta nonnegative)".into(),
            ));
        }
        if gradient_lipschitz > 0.0 && self.theta <= gradient_lipschitz * self.lambda() {
            return Err(SolverError::CflViolation {
                detail: format!(
                    "viscosity theta = {} must exceed gradient Lipschitz {} times lambda = {}",
                    self.theta,
                    gradient_lipschitz,
                    self.lambda()
                ),
            });
        }
        Ok(())
    }
}

/// Lax-Friedrichs flux: the driver evaluated at the central gradient plus the
/// artificial viscosity built from the one-step differences.
///
/// `dplus[l] = U(x + h e_l) - U(x)` and `dminus[l] = U(x) - U(x - h e_l)` are
/// raw (undivided) differences; `sigma_r` is the compensated diffusion matrix
/// in row-major layout.
#[allow(clippy::too_many_arguments)]
pub fn lf_flux(
    driver: &dyn Driver,
    ctrl: &[f64],
    t: f64,
    x: &[f64],
    y: f64,
    dplus: &[f64],
    dminus: &[f64],
    k: f64,
    sigma_r: &[f64],
    fp: &FluxParams,
) -> Result<f64> {
    let d = x.len();
    let mut slope = vec![0.0; d];
    for l in 0..d {
        slope[l] = (dplus[l] + dminus[l]) / (2.0 * fp.h);
    }
    let mut z = vec![0.0; d];
    for j in 0..d {
        let mut s = 0.0;
        for l in 0..d {
            s += sigma_r[l * d + j] * slope[l];
        }
        z[j] = s;
    }
    let mut visc = 0.0;
    for l in 0..d {
        visc += dplus[l] - dminus[l];
    }
    Ok(driver.eval(ctrl, t, x, y, &z, &slope, k)? + (fp.theta / fp.dt) * visc)
}

/// Penalized driver: the flux plus `rho * (zeta - y)^+`.
#[allow(clippy::too_many_arguments)]
pub fn penalized_driver(
    driver: &dyn Driver,
    obstacle: &ObstacleSpec,
    rho: f64,
    ctrl: &[f64],
    t: f64,
    x: &[f64],
    y: f64,
    dplus: &[f64],
    dminus: &[f64],
    k: f64,
    sigma_r: &[f64],
    fp: &FluxParams,
) -> Result<f64> {
    let base = lf_flux(driver, ctrl, t, x, y, dplus, dminus, k, sigma_r, fp)?;
    let zeta = (obstacle.zeta)(t, x);
    Ok(base + rho * (zeta - y).max(0.0))
}

/// Slant derivative of the penalized driver in `y`: the driver's slant plus
/// `-rho` where the penalty is active (`zeta - y > 0`, indicator open at the
/// contact value itself).
#[allow(clippy::too_many_arguments)]
pub fn penalized_slant(
    driver: &dyn Driver,
    rho: f64,
    zeta: f64,
    ctrl: &[f64],
    t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    slope: &[f64],
    k: f64,
) -> Result<f64> {
    let s = driver.slant_y(ctrl, t, x, y, z, slope, k)?;
    Ok(if zeta - y > 0.0 { s - rho } else { s })
}
