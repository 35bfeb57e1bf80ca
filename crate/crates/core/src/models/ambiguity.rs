//! Optimal investment with ambiguous market data on a one-dimensional
//! wealth domain.
//!
//! An investor allocates a fraction `alpha` of wealth to a risky asset with
//! jump-diffusion dynamics and may stop at any time to collect the utility
//! `g(x) = 1 - 2 exp(-2x)` of current wealth. The discount rate is only
//! known to lie in `[rate_lo, rate_hi]`, the market price of risk is
//! perturbed by at most `drift_ambiguity`, and the jump intensity by at most
//! `jump_ambiguity` times the jump size cap. Resolving the ambiguity against
//! the investor gives the worst-case value, resolving it in their favour the
//! best-case value; both solve an obstacle problem whose driver discounts
//! positive and negative values at different rates, adds a signed
//! `|x u_x|` term, and feeds the jump functional through a one-sided
//! clip so the driver stays non-decreasing in the jump argument.

use std::str::FromStr;
use std::sync::Arc;

use crate::driver::{Driver, ObstacleSpec};
use crate::error::{Result, SolverError};
use crate::grid::{BoundaryConditions, ExteriorFn, FaceRule, UniformGrid};
use crate::levy::{LevyMeasure, NonlocalKernelSpec, QuadratureSpec};
use crate::policy::ControlGrid;
use crate::scheme::{
    CoeffFn, DtRule, JumpPart, LocalKind, NodeClass, Problem, SchemeConfig,
};

use super::{node_index_at, param_hash};

/// Which side the ambiguity is resolved for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmbiguityScenario {
    /// Nature picks the least favourable discount rate, drift perturbation
    /// and jump intensity; the value is the robust lower envelope.
    Worst,
    /// Every ambiguous quantity is resolved in the investor's favour.
    Best,
}

impl AmbiguityScenario {
    fn tag(self) -> f64 {
        match self {
            AmbiguityScenario::Worst => 0.0,
            AmbiguityScenario::Best => 1.0,
        }
    }
}

impl FromStr for AmbiguityScenario {
    type Err = SolverError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "worst" => Ok(AmbiguityScenario::Worst),
            "best" => Ok(AmbiguityScenario::Best),
            other => Err(SolverError::InvalidConfig(format!(
                "unknown scenario {other:?}; expected \"worst\" or \"best\""
            ))),
        }
    }
}

/// Parameter set of the investment model. All fields are public so runs can
/// override individual entries; `build_problem` validates the combination.
#[derive(Clone, Debug)]
pub struct InvestmentAmbiguity {
    pub scenario: AmbiguityScenario,
    /// Risky-asset drift `b` (per unit of invested fraction).
    pub drift_rate: f64,
    /// Risky-asset volatility `sigma`.
    pub volatility: f64,
    /// Exponential decay rate of the jump measure density
    /// `exp(-jump_decay |e|) / |e|`.
    pub jump_decay: f64,
    /// Lower end of the ambiguous discount-rate interval.
    pub rate_lo: f64,
    /// Upper end of the ambiguous discount-rate interval.
    pub rate_hi: f64,
    /// Amplitude `kappa_1` of the drift ambiguity; enters as
    /// `alpha kappa_1 sigma |x u_x|`.
    pub drift_ambiguity: f64,
    /// Amplitude `kappa_2` of the jump-intensity ambiguity; multiplies the
    /// clipped jump functional.
    pub jump_ambiguity: f64,
    /// Time horizon.
    pub horizon: f64,
    /// Wealth level the experiments report the value at.
    pub spot: f64,
    /// Right end of the computational domain `(0, x_max)`; outside it the
    /// solution is pinned to the stopping utility.
    pub x_max: f64,
    /// Mesh of the control grid on `[0, 1]`; must divide 1.
    pub control_mesh: f64,
}

impl InvestmentAmbiguity {
    /// The benchmark parameter set used throughout the experiments.
    pub fn new(scenario: AmbiguityScenario) -> Self {
        Self {
            scenario,
            drift_rate: 0.1,
            volatility: 0.2,
            jump_decay: 6.0,
            rate_lo: 0.02,
            rate_hi: 0.04,
            drift_ambiguity: 0.2,
            jump_ambiguity: 0.5,
            horizon: 1.0,
            spot: 1.0,
            x_max: 2.0,
            control_mesh: 0.1,
        }
    }

    /// Stopping utility, initial condition and obstacle in one:
    /// `g(x) = 1 - 2 exp(-2x)`.
    pub fn utility(&self, x: f64) -> f64 {
        1.0 - 2.0 * (-2.0 * x).exp()
    }

    /// The model nonlinearity for this parameter set.
    pub fn driver(&self) -> AmbiguityDriver {
        AmbiguityDriver {
            scenario: self.scenario,
            rate_lo: self.rate_lo,
            rate_hi: self.rate_hi,
            slope_gain: self.drift_ambiguity * self.volatility,
            jump_gain: self.jump_ambiguity,
            x_max: self.x_max,
        }
    }

    fn validate(&self) -> Result<()> {
        let all_finite = [
            self.drift_rate,
            self.volatility,
            self.jump_decay,
            self.rate_lo,
            self.rate_hi,
            self.drift_ambiguity,
            self.jump_ambiguity,
            self.horizon,
            self.spot,
            self.x_max,
            self.control_mesh,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(SolverError::InvalidConfig(
                "investment model parameters must be finite".into(),
            ));
        }
        if !(self.rate_lo > 0.0) || self.rate_hi < self.rate_lo {
            return Err(SolverError::InvalidConfig(format!(
                "discount interval [{}, {}] must satisfy 0 < lo <= hi",
                self.rate_lo, self.rate_hi
            )));
        }
        if !(self.volatility > 0.0) || !(self.jump_decay > 0.0) {
            return Err(SolverError::InvalidConfig(
                "volatility and jump decay must be positive".into(),
            ));
        }
        if self.drift_ambiguity < 0.0 || self.jump_ambiguity < 0.0 {
            return Err(SolverError::InvalidConfig(
                "ambiguity amplitudes must be nonnegative".into(),
            ));
        }
        if !(self.horizon > 0.0) || !(self.x_max > 0.0) {
            return Err(SolverError::InvalidConfig(
                "horizon and domain size must be positive".into(),
            ));
        }
        Ok(())
    }

    fn control_count(&self) -> Result<usize> {
        let n = 1.0 / self.control_mesh;
        if !(self.control_mesh > 0.0) || (n - n.round()).abs() > 1e-9 {
            return Err(SolverError::InvalidConfig(format!(
                "control mesh {} must divide 1",
                self.control_mesh
            )));
        }
        Ok(n.round() as usize + 1)
    }

    /// Assemble the full problem bundle on a grid of spacing `h`. Both
    /// endpoints are pinned to the stopping utility, which also extends the
    /// solution wherever a jump leaves the domain.
    pub fn build_problem(&self, h: f64) -> Result<Problem> {
        self.validate()?;
        let grid = Arc::new(UniformGrid::from_spacing(&[0.0], &[self.x_max], h)?);
        let me = self.clone();
        let exterior: ExteriorFn = Arc::new(move |_t, x| me.utility(x[0]));
        let bc = BoundaryConditions {
            faces: vec![[FaceRule::ExteriorExtension, FaceRule::ExteriorExtension]],
            exterior: Some(exterior),
        };
        let me = self.clone();
        let initial = Arc::new(move |x: &[f64]| me.utility(x[0]));
        let me = self.clone();
        let obstacle = ObstacleSpec {
            zeta: Arc::new(move |_t, x| me.utility(x[0])),
            initial,
        };

        let n = grid.num_nodes();
        let mut node_class = vec![NodeClass::Pde; n];
        node_class[0] = NodeClass::Dirichlet;
        node_class[n - 1] = NodeClass::Dirichlet;

        let controls = ControlGrid::box1d(0.0, 1.0, self.control_count()?)?;

        let vol = self.volatility;
        let sigma: CoeffFn = Arc::new(move |ctrl, _t, x, out| {
            out[0] = ctrl[0] * vol * x[0];
        });
        let b = self.drift_rate;
        let drift: CoeffFn = Arc::new(move |ctrl, _t, x, out| {
            out[0] = ctrl[0] * b * x[0];
        });

        let decay = self.jump_decay;
        let measure = LevyMeasure::new(
            1,
            Arc::new(move |e: f64| (-decay * e.abs()).exp() / e.abs()),
            0.0,
            1.0,
            QuadratureSpec::default(),
        )?;
        let clip = match self.scenario {
            AmbiguityScenario::Best => Arc::new(|s: f64| s.max(0.0)) as Arc<_>,
            AmbiguityScenario::Worst => Arc::new(|s: f64| s.min(0.0)) as Arc<_>,
        };
        let kernel = NonlocalKernelSpec {
            eta: Arc::new(move |ctrl: &[f64], _t, x: &[f64], e: f64, out: &mut [f64]| {
                out[0] = ctrl[0] * x[0] * e.abs().min(1.0);
            }),
            gamma: Arc::new(|_ctrl: &[f64], _t, _x: &[f64], e: f64| e.abs().min(1.0)),
            m: clip,
            m_lipschitz: 1.0,
            // |eta| + gamma <= (alpha x + 1)(1 and |e|) with alpha <= 1.
            bound_const: 1.0 + self.x_max,
        };

        let model_hash = param_hash(
            "investment-ambiguity",
            &[
                self.scenario.tag(),
                self.drift_rate,
                self.volatility,
                self.jump_decay,
                self.rate_lo,
                self.rate_hi,
                self.drift_ambiguity,
                self.jump_ambiguity,
                self.horizon,
                self.x_max,
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
            jumps: Some(JumpPart { measure, kernel }),
            local_kind: LocalKind::Upwind,
            node_class,
            time_invariant: true,
            model_hash,
        })
    }

    /// Scheme settings the experiments run with: `dt = h/5`, viscosity
    /// `theta = 1/5`, policy tolerance `1e-10` and the given penalty weight.
    pub fn scheme_config(&self, rho: f64) -> SchemeConfig {
        let mut cfg = SchemeConfig::new(DtRule::Lambda(0.2));
        cfg.theta = 0.2;
        cfg.rho = rho;
        cfg.policy_tol = 1e-10;
        cfg
    }

    /// Flat index of the reporting node `spot` on `grid`.
    pub fn spot_index(&self, grid: &UniformGrid) -> Result<usize> {
        node_index_at(grid, &[self.spot])
    }
}

/// Driver of the investment model: discounting that distinguishes the sign
/// of the value, a signed `|x u_x|` ambiguity term and a linear jump term.
///
/// The diffusion-weighted gradient `z` is ignored; the raw central slope is
/// consumed instead because the ambiguity term needs the plain product
/// `x u_x` without the jump-compensated diffusion weight.
#[derive(Clone, Debug)]
pub struct AmbiguityDriver {
    scenario: AmbiguityScenario,
    rate_lo: f64,
    rate_hi: f64,
    /// `kappa_1 sigma`, the factor in front of `alpha |x u_x|`.
    slope_gain: f64,
    /// `kappa_2`, the factor in front of the jump functional.
    jump_gain: f64,
    /// Largest `|x|` the driver is evaluated at; fixes the gradient
    /// Lipschitz constant.
    x_max: f64,
}

impl Driver for AmbiguityDriver {
    fn eval(
        &self,
        ctrl: &[f64],
        _t: f64,
        x: &[f64],
        y: f64,
        _z: &[f64],
        slope: &[f64],
        k: f64,
    ) -> Result<f64> {
        let ambiguity = ctrl[0] * self.slope_gain * (x[0] * slope[0]).abs();
        Ok(match self.scenario {
            AmbiguityScenario::Best => {
                self.rate_hi * (-y).max(0.0) - self.rate_lo * y.max(0.0)
                    + ambiguity
                    + self.jump_gain * k
            }
            AmbiguityScenario::Worst => {
                self.rate_lo * (-y).max(0.0) - self.rate_hi * y.max(0.0)
                    - ambiguity
                    + self.jump_gain * k
            }
        })
    }

    fn slant_y(
        &self,
        _ctrl: &[f64],
        _t: f64,
        _x: &[f64],
        y: f64,
        _z: &[f64],
        _slope: &[f64],
        _k: f64,
    ) -> Result<f64> {
        // Limit from above at the kink y = 0.
        Ok(match self.scenario {
            AmbiguityScenario::Best => {
                if y < 0.0 {
                    -self.rate_hi
                } else {
                    -self.rate_lo
                }
            }
            AmbiguityScenario::Worst => {
                if y < 0.0 {
                    -self.rate_lo
                } else {
                    -self.rate_hi
                }
            }
        })
    }

    fn monotonicity_bound(&self) -> f64 {
        -self.rate_lo
    }

    fn gradient_lipschitz(&self) -> f64 {
        self.slope_gain * self.x_max
    }

    fn jump_lipschitz(&self) -> f64 {
        self.jump_gain
    }

    fn zero_bound(&self) -> f64 {
        0.0
    }

    fn growth(&self, y_abs: f64) -> f64 {
        self.rate_hi * y_abs
    }
}
