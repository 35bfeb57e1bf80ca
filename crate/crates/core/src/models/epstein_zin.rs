//! Consumption-portfolio allocation under recursive utility on a
//! wealth-volatility rectangle.
//!
//! An agent splits wealth between a risk-free bond, a stock whose excess
//! return and volatility are driven by a mean-reverting variance factor, and
//! consumption. Preferences are recursive: running utility is aggregated
//! through a driver that is non-Lipschitz but monotone in the utility
//! argument, with separate risk aversion and elasticity of intertemporal
//! substitution. The terminal utility is `g(x) = -exp(-x/2)`, so utility
//! values live strictly below zero and the driver's domain guard is a hard
//! stop: any excursion of the iterates to nonnegative values surfaces as an
//! error instead of being clamped.
//!
//! The assembled problem runs the semi-Lagrangian local operator (the
//! diffusion is neither diagonal nor diagonally dominant), imposes the
//! equation itself on the `x = 0` and `v = 0` edges, reflects across the far
//! edges with homogeneous Neumann rules, has no jumps and no obstacle, and
//! needs no artificial viscosity because the driver ignores the gradient.

use std::sync::Arc;

use crate::driver::{Driver, ObstacleSpec};
use crate::error::{Result, SolverError};
use crate::grid::{BoundaryConditions, FaceRule, UniformGrid};
use crate::policy::ControlGrid;
use crate::scheme::{CoeffFn, DtRule, LocalKind, NodeClass, Problem, SchemeConfig};

use super::{node_index_at, param_hash};

/// Parameter set of the consumption-portfolio model. Fields are public for
/// per-run overrides; `build_problem` validates the combination and only
/// accepts the empirically relevant branch `risk_aversion > 1`, `eis > 1`
/// (there the driver is monotone with a finite one-sided bound).
#[derive(Clone, Debug)]
pub struct EpsteinZin {
    /// Relative risk aversion `gamma`; must exceed 1.
    pub risk_aversion: f64,
    /// Elasticity of intertemporal substitution `psi`; must exceed 1.
    pub eis: f64,
    /// Rate of time preference `delta`.
    pub time_preference: f64,
    /// Risk-free rate `r`.
    pub rate: f64,
    /// Correlation between the stock and variance-factor noises.
    pub rho_corr: f64,
    /// Excess-return loading `lambda`: the stock drifts at
    /// `rate + lambda * v`.
    pub excess_return: f64,
    /// Volatility-of-volatility `beta`.
    pub vol_of_vol: f64,
    /// Mean-reversion speed `kappa` of the variance factor.
    pub mean_reversion: f64,
    /// Reversion source `vartheta`: the variance drifts at
    /// `vartheta - kappa * v`.
    pub reversion_level: f64,
    /// Wealth coordinate the experiments report the value at.
    pub spot: f64,
    /// Variance coordinate the experiments report the value at.
    pub spot_vol: f64,
    /// Time horizon.
    pub horizon: f64,
    /// Right end of the wealth axis `[0, x_max]`.
    pub x_max: f64,
    /// Top of the variance axis `[0, v_max]`.
    pub v_max: f64,
    /// Mesh of the control simplex `{(pi, c): pi, c >= 0, pi + c <= 1}`;
    /// must divide 1.
    pub control_mesh: f64,
}

impl Default for EpsteinZin {
    /// The benchmark parameter set used throughout the experiments.
    fn default() -> Self {
        Self {
            risk_aversion: 2.0,
            eis: 1.5,
            time_preference: 0.08,
            rate: 0.05,
            rho_corr: -0.5,
            excess_return: 0.5,
            vol_of_vol: 0.25,
            mean_reversion: 5.0,
            reversion_level: 0.1125,
            spot: 1.0,
            spot_vol: 0.02,
            horizon: 0.5,
            x_max: 2.0,
            v_max: 0.05,
            control_mesh: 0.05,
        }
    }
}

impl EpsteinZin {
    /// Terminal utility and initial condition `g(x) = -exp(-x/2)`.
    pub fn utility(&self, x: f64) -> f64 {
        -(-0.5 * x).exp()
    }

    /// The recursive-utility aggregator for this parameter set.
    pub fn driver(&self) -> EpsteinZinDriver {
        let p = 1.0 - 1.0 / self.eis;
        let q = 1.0 / (1.0 - self.risk_aversion);
        EpsteinZinDriver {
            coef: self.time_preference / p,
            risk_factor: 1.0 - self.risk_aversion,
            consumption_power: p,
            utility_power: 1.0 - p * q,
            x_max: self.x_max,
        }
    }

    fn validate(&self) -> Result<()> {
        let all_finite = [
            self.risk_aversion,
            self.eis,
            self.time_preference,
            self.rate,
            self.rho_corr,
            self.excess_return,
            self.vol_of_vol,
            self.mean_reversion,
            self.reversion_level,
            self.spot,
            self.spot_vol,
            self.horizon,
            self.x_max,
            self.v_max,
            self.control_mesh,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(SolverError::InvalidConfig(
                "consumption-portfolio parameters must be finite".into(),
            ));
        }
        if !(self.risk_aversion > 1.0) || !(self.eis > 1.0) {
            return Err(SolverError::InvalidConfig(format!(
                "only the branch risk_aversion > 1 and eis > 1 is supported, \
                 got {} and {}",
                self.risk_aversion, self.eis
            )));
        }
        if !(self.time_preference > 0.0) || !(self.vol_of_vol > 0.0) {
            return Err(SolverError::InvalidConfig(
                "time preference and vol-of-vol must be positive".into(),
            ));
        }
        if self.rho_corr.abs() > 1.0 {
            return Err(SolverError::InvalidConfig(format!(
                "correlation {} must lie in [-1, 1]",
                self.rho_corr
            )));
        }
        if self.mean_reversion < 0.0 || self.reversion_level < 0.0 {
            return Err(SolverError::InvalidConfig(
                "variance-factor drift coefficients must be nonnegative".into(),
            ));
        }
        if !(self.horizon > 0.0) || !(self.x_max > 0.0) || !(self.v_max > 0.0) {
            return Err(SolverError::InvalidConfig(
                "horizon and domain sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Assemble the full problem bundle on a grid of spacing `h` (shared by
    /// both axes, so `h` must divide both `x_max` and `v_max`).
    pub fn build_problem(&self, h: f64) -> Result<Problem> {
        self.validate()?;
        let grid = Arc::new(UniformGrid::from_spacing(
            &[0.0, 0.0],
            &[self.x_max, self.v_max],
            h,
        )?);
        let bc = BoundaryConditions {
            faces: vec![
                [FaceRule::EquationOnBoundary, FaceRule::HomogeneousNeumann],
                [FaceRule::EquationOnBoundary, FaceRule::HomogeneousNeumann],
            ],
            exterior: None,
        };
        let me = self.clone();
        let obstacle = ObstacleSpec::unconstrained(Arc::new(move |x: &[f64]| me.utility(x[0])));
        let node_class = vec![NodeClass::Pde; grid.num_nodes()];
        let controls = ControlGrid::simplex2d(self.control_mesh)?;

        let beta = self.vol_of_vol;
        let rho = self.rho_corr;
        let orth = (1.0 - rho * rho).sqrt();
        let sigma: CoeffFn = Arc::new(move |ctrl, _t, x, out| {
            let vol = x[1].sqrt();
            out[0] = ctrl[0] * x[0] * vol;
            out[1] = 0.0;
            out[2] = beta * rho * vol;
            out[3] = beta * orth * vol;
        });
        let rate = self.rate;
        let excess = self.excess_return;
        let level = self.reversion_level;
        let speed = self.mean_reversion;
        let drift: CoeffFn = Arc::new(move |ctrl, _t, x, out| {
            out[0] = x[0] * (rate + ctrl[0] * excess * x[1] - (1.0 + rate) * ctrl[1]);
            out[1] = level - speed * x[1];
        });

        let model_hash = param_hash(
            "epstein-zin",
            &[
                self.risk_aversion,
                self.eis,
                self.time_preference,
                self.rate,
                self.rho_corr,
                self.excess_return,
                self.vol_of_vol,
                self.mean_reversion,
                self.reversion_level,
                self.horizon,
                self.x_max,
                self.v_max,
                self.control_mesh,
            ],
        );

        Ok(Problem {
            grid,
            bc,
            horizon: self.horizon,
            driver: Arc::new(self.driver()),
            obstacle,
            controls,
            sigma,
            drift,
            jumps: None,
            local_kind: LocalKind::SemiLagrangian,
            node_class,
            time_invariant: true,
            model_hash,
        })
    }

    /// Scheme settings the experiments run with: `dt = 4h`, no viscosity,
    /// no penalty, policy tolerance `1e-6`.
    pub fn scheme_config(&self) -> SchemeConfig {
        let mut cfg = SchemeConfig::new(DtRule::Lambda(4.0));
        cfg.theta = 0.0;
        cfg.rho = 0.0;
        cfg.policy_tol = 1e-6;
        cfg
    }

    /// Flat index of the reporting node `(spot, spot_vol)` on `grid`.
    pub fn spot_index(&self, grid: &UniformGrid) -> Result<usize> {
        node_index_at(grid, &[self.spot, self.spot_vol])
    }
}

/// Recursive-utility aggregator
/// `f(c, y) = coef * ((c)^p * w^(1-pq) - w)` with `w = (1-gamma) y`,
/// `p = 1 - 1/psi`, `q = 1/(1-gamma)`; the consumption argument is
/// `c x` (consumed fraction times wealth). On the supported branch
/// (`gamma > 1`, `psi > 1`) the exponents satisfy `p in (0,1)` and
/// `1 - pq > 1`, the admissible utilities are `y < 0`, and the slant
/// derivative is bounded above by `coef * (gamma - 1)` while being
/// unbounded below: the driver is monotone but not Lipschitz in `y`.
#[derive(Clone, Debug)]
pub struct EpsteinZinDriver {
    /// `delta / (1 - 1/psi)`.
    coef: f64,
    /// `1 - gamma`, negative on the supported branch.
    risk_factor: f64,
    /// `p = 1 - 1/psi`.
    consumption_power: f64,
    /// `1 - pq`.
    utility_power: f64,
    /// Largest wealth coordinate; bounds `c x` for the growth envelope.
    x_max: f64,
}

impl EpsteinZinDriver {
    /// `w = (1-gamma) y`, the positively-signed utility argument.
    fn utility_arg(&self, y: f64) -> Result<f64> {
        let w = self.risk_factor * y;
        if !(w > 0.0) {
            return Err(SolverError::DriverDomain(format!(
                "utility aggregator needs (1 - gamma) y > 0, got y = {y}"
            )));
        }
        Ok(w)
    }
}

impl Driver for EpsteinZinDriver {
    fn eval(
        &self,
        ctrl: &[f64],
        _t: f64,
        x: &[f64],
        y: f64,
        _z: &[f64],
        _slope: &[f64],
        _k: f64,
    ) -> Result<f64> {
        let w = self.utility_arg(y)?;
        let cx = ctrl[1] * x[0];
        Ok(self.coef * (cx.powf(self.consumption_power) * w.powf(self.utility_power) - w))
    }

    fn slant_y(
        &self,
        ctrl: &[f64],
        _t: f64,
        x: &[f64],
        y: f64,
        _z: &[f64],
        _slope: &[f64],
        _k: f64,
    ) -> Result<f64> {
        let w = self.utility_arg(y)?;
        let cx = ctrl[1] * x[0];
        let dw = self.utility_power * cx.powf(self.consumption_power)
            * w.powf(self.utility_power - 1.0)
            - 1.0;
        Ok(self.coef * self.risk_factor * dw)
    }

    fn monotonicity_bound(&self) -> f64 {
        // Attained in the limit cx -> 0 (or w -> 0): coef * (gamma - 1).
        -self.coef * self.risk_factor
    }

    fn gradient_lipschitz(&self) -> f64 {
        0.0
    }

    fn jump_lipschitz(&self) -> f64 {
        0.0
    }

    fn zero_bound(&self) -> f64 {
        0.0
    }

    fn growth(&self, y_abs: f64) -> f64 {
        let w = -self.risk_factor * y_abs;
        self.coef
            * (self.x_max.powf(self.consumption_power) * w.powf(self.utility_power) + w)
    }

    fn uses_gradient(&self) -> bool {
        false
    }

    fn admissible_y(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme;

    fn f(d: &EpsteinZinDriver, c: f64, x: f64, y: f64) -> Result<f64> {
        d.eval(&[0.0, c], 0.0, &[x, 0.02], y, &[], &[], 0.0)
    }

    fn slant(d: &EpsteinZinDriver, c: f64, x: f64, y: f64) -> f64 {
        d.slant_y(&[0.0, c], 0.0, &[x, 0.02], y, &[], &[], 0.0)
            .unwrap()
    }

    #[test]
    fn aggregator_matches_hand_values() {
        let d = EpsteinZin::default().driver();
        // cx = 1, y = -1: the bracket vanishes exactly.
        assert_eq!(f(&d, 1.0, 1.0, -1.0).unwrap(), 0.0);
        // cx = 0, y = -1: pure decay at the rate coef = 0.24.
        assert!((f(&d, 0.0, 1.0, -1.0).unwrap() + 0.24).abs() < 1e-15);
        // A generic point against the closed form 0.24(-y)((cx(-y))^{1/3}-1).
        let got = f(&d, 0.5, 1.5, -0.8).unwrap();
        let cx: f64 = 0.75;
        let want = 0.24 * 0.8 * ((cx * 0.8).powf(1.0 / 3.0) - 1.0);
        assert!((got - want).abs() < 1e-14, "got {got}, want {want}");
    }

    #[test]
    fn nonnegative_utilities_are_a_hard_stop() {
        let d = EpsteinZin::default().driver();
        for y in [0.0, 1e-12, 0.3] {
            let err = f(&d, 0.5, 1.0, y).unwrap_err();
            assert!(matches!(err, SolverError::DriverDomain(_)), "y = {y}: {err}");
            assert!(d
                .slant_y(&[0.0, 0.5], 0.0, &[1.0, 0.0], y, &[], &[], 0.0)
                .is_err());
        }
        assert_eq!(d.admissible_y(), (f64::NEG_INFINITY, 0.0));
    }

    #[test]
    fn slant_matches_finite_differences_and_keeps_the_bound() {
        let d = EpsteinZin::default().driver();
        let bound = d.monotonicity_bound();
        assert!((bound - 0.24).abs() < 1e-15);
        for ci in 0..=4 {
            let c = 0.25 * ci as f64;
            for yi in 1..=60 {
                let y = -3.0 + 0.049 * yi as f64;
                let s = slant(&d, c, 1.3, y);
                assert!(s <= bound + 1e-12, "slant {s} above bound at c={c}, y={y}");
                let e = 1e-6 * y.abs().max(1e-3);
                let fd =
                    (f(&d, c, 1.3, y + e).unwrap() - f(&d, c, 1.3, y - e).unwrap()) / (2.0 * e);
                assert!(
                    (s - fd).abs() < 1e-5 * (1.0 + s.abs()),
                    "slant {s} vs fd {fd} at c={c}, y={y}"
                );
            }
        }
        // Without consumption the bound is attained exactly.
        assert!((slant(&d, 0.0, 1.0, -0.4) - 0.24).abs() < 1e-15);
        // Far from zero the slant is unbounded below: monotone, not
        // Lipschitz.
        assert!(slant(&d, 1.0, 2.0, -1000.0) < -3.0);
    }

    #[test]
    fn chord_slopes_are_nonpositive_on_the_sample_interval() {
        let d = EpsteinZin::default().driver();
        let hi = f(&d, 1.0, 1.0, -0.5).unwrap();
        let lo = f(&d, 1.0, 1.0, -1.5).unwrap();
        let chord = (hi - lo) / (-0.5 - (-1.5));
        assert!(chord <= 0.0, "chord slope {chord}");
    }

    #[test]
    fn diffusion_factor_reproduces_the_generator_coefficients() {
        let m = EpsteinZin::default();
        let p = m.build_problem(0.01).unwrap();
        let (pi, x, v) = (0.6, 1.4, 0.03);
        let mut s = [0.0; 4];
        (p.sigma)(&[pi, 0.2], 0.0, &[x, v], &mut s);
        // sigma sigma^T against [[pi^2 x^2 v, pi beta rho x v],
        //                        [pi beta rho x v, beta^2 v]].
        let beta = m.vol_of_vol;
        let rho = m.rho_corr;
        let want = [
            pi * pi * x * x * v,
            pi * beta * rho * x * v,
            pi * beta * rho * x * v,
            beta * beta * v,
        ];
        for i in 0..2 {
            for j in 0..2 {
                let got: f64 = (0..2).map(|w| s[i * 2 + w] * s[j * 2 + w]).sum();
                assert!(
                    (got - want[i * 2 + j]).abs() < 1e-14,
                    "entry ({i},{j}): {got} vs {}",
                    want[i * 2 + j]
                );
            }
        }
        let mut b = [0.0; 2];
        (p.drift)(&[pi, 0.2], 0.0, &[x, v], &mut b);
        let want_bx = x * (m.rate + pi * m.excess_return * v - (1.0 + m.rate) * 0.2);
        assert!((b[0] - want_bx).abs() < 1e-15);
        assert!((b[1] - (m.reversion_level - m.mean_reversion * v)).abs() < 1e-15);
    }

    #[test]
    fn bundle_matches_the_documented_counts() {
        let m = EpsteinZin::default();
        let p = m.build_problem(0.01).unwrap();
        assert_eq!(p.grid.counts(), &[201, 6]);
        assert_eq!(p.controls.len(), 231);
        assert!(p.node_class.iter().all(|c| *c == NodeClass::Pde));
        assert_eq!(p.bc.rule(0, 0), FaceRule::EquationOnBoundary);
        assert_eq!(p.bc.rule(0, 1), FaceRule::HomogeneousNeumann);
        assert_eq!(p.bc.rule(1, 0), FaceRule::EquationOnBoundary);
        assert_eq!(p.bc.rule(1, 1), FaceRule::HomogeneousNeumann);
        assert!(p.jumps.is_none());
        assert_eq!(p.local_kind, LocalKind::SemiLagrangian);
        assert_eq!(m.spot_index(&p.grid).unwrap(), 100 * 6 + 2);

        // dt targets 4h, rounded so the horizon splits evenly.
        let report = scheme::check_cfl(&p, &m.scheme_config()).unwrap();
        assert!(report.certified, "margins {report:?}");
        assert!((report.dt - 0.5 / 13.0).abs() < 1e-12);
        let p2 = m.build_problem(0.005).unwrap();
        let report2 = scheme::check_cfl(&p2, &m.scheme_config()).unwrap();
        assert!((report2.dt - 0.02).abs() < 1e-12);
    }

    #[test]
    fn unsupported_preference_branches_are_rejected() {
        let mut m = EpsteinZin::default();
        m.risk_aversion = 0.5;
        assert!(m.build_problem(0.01).is_err());
        let mut m = EpsteinZin::default();
        m.eis = 0.8;
        assert!(m.build_problem(0.01).is_err());
        let mut m = EpsteinZin::default();
        m.rho_corr = -1.5;
        assert!(m.build_problem(0.01).is_err());
    }

    #[test]
    fn coarse_solve_stays_negative_and_bounded() {
        let mut m = EpsteinZin::default();
        m.x_max = 1.0;
        m.v_max = 0.04;
        m.spot = 0.5;
        m.spot_vol = 0.02;
        m.control_mesh = 0.2;
        let p = m.build_problem(0.02).unwrap();
        // Tight tolerance so the growth check below is not blurred by the
        // per-step iteration slack.
        let mut cfg = m.scheme_config();
        cfg.policy_tol = 1e-12;
        let out = scheme::run(&p, &cfg).unwrap();
        // One-sided growth at rate 0.24 from |g| <= 1; the semi-implicit
        // steps compound as (1 - 0.24 dt)^-n, slightly above exp(0.24 T).
        let cap = (1.0 - 0.24 * out.cfl.dt).powi(-(out.steps.len() as i32)) + 1e-9;
        for v in out.final_field.values() {
            assert!(*v < 0.0, "utility left the admissible range: {v}");
            assert!(*v > -cap, "utility {v} below the growth envelope");
        }
        for s in &out.steps {
            assert!(s.iterations <= 10, "step {} took {} iterations", s.index, s.iterations);
        }
        // Reruns are bitwise identical.
        let again = scheme::run(&p, &cfg).unwrap();
        assert_eq!(out.final_field.values(), again.final_field.values());
    }
}
