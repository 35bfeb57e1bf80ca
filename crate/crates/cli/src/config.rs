//! Flat key-value experiment configuration.
//!
//! The format is plain text, one `key = value` per line, `#` starting a
//! comment, keys namespaced with dots (`scheme.h = 1/320`). Numeric values
//! accept integer fractions (`1/320`) besides ordinary float syntax, and
//! list values are comma separated. Repeatable `--override key=value` flags
//! replace file entries after parsing. The full key list lives in the
//! project README.

use crate::CliError;
use hjbvi::models::{AmbiguityScenario, EpsteinZin, InvestmentAmbiguity};
use hjbvi::scheme::{DtRule, RadiusRule, SchemeConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Split raw text into ordered `(key, value)` pairs, rejecting duplicates
/// and malformed lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(bad(format!("line {}: empty key", lineno + 1)));
        }
        if let Some(first) = seen.insert(key.clone(), lineno + 1) {
            return Err(bad(format!(
                "line {}: key {key:?} already set on line {first}",
                lineno + 1
            )));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Parse a number, accepting `a/b` integer fractions and float syntax.
pub fn parse_number(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad fraction numerator in {s:?}")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad fraction denominator in {s:?}")))?;
        if d == 0.0 {
            return Err(bad(format!("zero denominator in {s:?}")));
        }
        return Ok(n / d);
    }
    s.parse()
        .map_err(|_| bad(format!("expected a number, got {s:?}")))
}

/// Parse a comma-separated list of numbers.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(parse_number).collect()
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| bad(format!("expected a nonnegative integer, got {s:?}")))
}

fn parse_u64(s: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|_| bad(format!("expected a nonnegative integer, got {s:?}")))
}

/// The model a run solves, with every parameter resolved.
#[derive(Clone, Debug)]
pub enum ModelSpec {
    Investment(InvestmentAmbiguity),
    Consumption(EpsteinZin),
}

impl ModelSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ModelSpec::Investment(m) => match m.scenario {
                AmbiguityScenario::Worst => "investment_worst",
                AmbiguityScenario::Best => "investment_best",
            },
            ModelSpec::Consumption(_) => "consumption",
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            ModelSpec::Investment(m) => m.horizon,
            ModelSpec::Consumption(m) => m.horizon,
        }
    }

    pub fn control_mesh(&self) -> f64 {
        match self {
            ModelSpec::Investment(m) => m.control_mesh,
            ModelSpec::Consumption(m) => m.control_mesh,
        }
    }

    /// Column names of the state coordinates.
    pub fn coord_names(&self) -> &'static [&'static str] {
        match self {
            ModelSpec::Investment(_) => &["x"],
            ModelSpec::Consumption(_) => &["x", "v"],
        }
    }

    /// Column names of the control components.
    pub fn control_names(&self) -> &'static [&'static str] {
        match self {
            ModelSpec::Investment(_) => &["alpha"],
            ModelSpec::Consumption(_) => &["pi", "c"],
        }
    }
}

/// A fully resolved experiment: model, scheme knobs, sweep ladders, probe
/// point and artifact settings.
#[derive(Debug)]
pub struct Experiment {
    pub model: ModelSpec,
    /// Spacing for single runs; sweeps may override per cell.
    pub h: Option<f64>,
    pub rho: f64,
    pub sweep_h: Vec<f64>,
    pub sweep_rho: Vec<f64>,
    pub sweep_mesh: Vec<f64>,
    /// Probe coordinates, one entry per state dimension.
    pub probe: Vec<f64>,
    pub dt_rule: DtRule,
    pub theta: f64,
    pub radius: RadiusRule,
    pub policy_tol: f64,
    pub policy_max_iters: usize,
    pub snapshot_stride: usize,
    pub cache_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub fb_c0: Option<f64>,
    pub fb_rate: f64,
    pub verify_trials: usize,
    pub verify_eps: f64,
}

/// Ordered key-value store with take-or-default access; leftovers are
/// unknown keys and rejected at the end.
struct KeyBag {
    map: BTreeMap<String, String>,
}

impl KeyBag {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn take_number(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key)
            .map(|v| parse_number(&v).map_err(|e| bad(format!("{key}: {e}"))))
            .transpose()
    }

    fn take_list(&mut self, key: &str) -> Result<Vec<f64>> {
        match self.take(key) {
            Some(v) => parse_list(&v).map_err(|e| bad(format!("{key}: {e}"))),
            None => Ok(Vec::new()),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(bad(format!("unknown key {key:?}")));
        }
        Ok(())
    }
}

/// Apply `--override key=value` entries on top of file pairs; overrides
/// replace existing keys and may add new ones, last occurrence winning.
pub fn apply_overrides(
    pairs: Vec<(String, String)>,
    overrides: &[String],
) -> Result<BTreeMap<String, String>> {
    let mut map: BTreeMap<String, String> = pairs.into_iter().collect();
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| bad(format!("override {item:?} is not of the form key=value")))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Resolve raw pairs into a typed experiment, filling model defaults and
/// validating the combination.
pub fn resolve(map: BTreeMap<String, String>, out_flag: Option<PathBuf>) -> Result<Experiment> {
    let mut bag = KeyBag { map };

    let model_id = bag
        .take("model")
        .ok_or_else(|| bad("missing required key `model`"))?;
    let mut model = match model_id.as_str() {
        "investment_worst" => ModelSpec::Investment(InvestmentAmbiguity::new(AmbiguityScenario::Worst)),
        "investment_best" => ModelSpec::Investment(InvestmentAmbiguity::new(AmbiguityScenario::Best)),
        "consumption" => ModelSpec::Consumption(EpsteinZin::default()),
        other => {
            return Err(bad(format!(
                "unknown model {other:?}; expected investment_worst, investment_best or consumption"
            )))
        }
    };

    apply_model_keys(&mut bag, &mut model)?;

    // Scheme defaults come from the model's benchmark settings.
    let base: SchemeConfig = match &model {
        ModelSpec::Investment(m) => m.scheme_config(0.0),
        ModelSpec::Consumption(m) => m.scheme_config(),
    };

    let h = bag.take_number("scheme.h")?;
    let rho = bag.take_number("scheme.rho")?.unwrap_or(0.0);
    if rho < 0.0 || !rho.is_finite() {
        return Err(bad(format!("scheme.rho must be finite and >= 0, got {rho}")));
    }
    let theta = bag.take_number("scheme.theta")?.unwrap_or(base.theta);
    let dt_lambda = bag.take_number("scheme.dt_lambda")?;
    let dt_steps = bag
        .take("scheme.dt_steps")
        .map(|v| parse_usize(&v))
        .transpose()?;
    let dt_rule = match (dt_lambda, dt_steps) {
        (Some(_), Some(_)) => {
            return Err(bad("scheme.dt_lambda and scheme.dt_steps are mutually exclusive"))
        }
        (Some(l), None) => DtRule::Lambda(l),
        (None, Some(s)) => DtRule::Steps(s),
        (None, None) => base.dt,
    };
    let radius = match bag.take("scheme.radius") {
        None => RadiusRule::Auto,
        Some(v) if v.trim() == "auto" => RadiusRule::Auto,
        Some(v) => RadiusRule::Explicit(parse_number(&v)?),
    };
    let policy_tol = bag.take_number("scheme.policy_tol")?.unwrap_or(base.policy_tol);
    let policy_max_iters = bag
        .take("scheme.policy_max_iters")
        .map(|v| parse_usize(&v))
        .transpose()?
        .unwrap_or(base.policy_max_iters);
    let snapshot_stride = bag
        .take("scheme.snapshot_stride")
        .map(|v| parse_usize(&v))
        .transpose()?
        .unwrap_or(0);
    let cache_dir = bag.take("scheme.cache_dir").map(PathBuf::from);

    let sweep_h = bag.take_list("sweep.h")?;
    let sweep_rho = bag.take_list("sweep.rho")?;
    let sweep_mesh = bag.take_list("sweep.control_mesh")?;
    for (name, ladder) in [
        ("sweep.h", &sweep_h),
        ("sweep.rho", &sweep_rho),
        ("sweep.control_mesh", &sweep_mesh),
    ] {
        check_monotone(name, ladder)?;
    }

    // Probe coordinates default to the model's reporting point; a probe
    // time, when given, must be the horizon: values are reported at the end
    // of the march, never interpolated in time.
    let horizon = model.horizon();
    if let Some(t) = bag.take_number("probe.t")? {
        if (t - horizon).abs() > 1e-9 * (1.0 + horizon.abs()) {
            return Err(bad(format!(
                "probe.t = {t} must equal the horizon {horizon}; probes are read at the final time"
            )));
        }
    }
    let probe = match &mut model {
        ModelSpec::Investment(m) => {
            if bag.take("probe.v").is_some() {
                return Err(bad("probe.v only applies to the consumption model"));
            }
            if let Some(x) = bag.take_number("probe.x")? {
                m.spot = x;
            }
            vec![m.spot]
        }
        ModelSpec::Consumption(m) => {
            if let Some(x) = bag.take_number("probe.x")? {
                m.spot = x;
            }
            if let Some(v) = bag.take_number("probe.v")? {
                m.spot_vol = v;
            }
            vec![m.spot, m.spot_vol]
        }
    };

    let out = out_flag
        .or_else(|| bag.take("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let seed = bag.take("seed").map(|v| parse_u64(&v)).transpose()?.unwrap_or(2024);

    let fb_c0 = bag.take_number("free_boundary.c0")?;
    if let Some(c0) = fb_c0 {
        if !(c0 > 0.0) || !c0.is_finite() {
            return Err(bad(format!("free_boundary.c0 must be positive, got {c0}")));
        }
    }
    let fb_rate = bag.take_number("free_boundary.rate")?.unwrap_or(1.0);
    if !(fb_rate > 0.0 && fb_rate <= 1.0) {
        return Err(bad(format!("free_boundary.rate must lie in (0, 1], got {fb_rate}")));
    }

    let verify_trials = bag
        .take("verify.trials")
        .map(|v| parse_usize(&v))
        .transpose()?
        .unwrap_or(2000);
    let verify_eps = bag.take_number("verify.eps")?.unwrap_or(1e-3);

    bag.finish()?;

    if let Some(hv) = h {
        if !(hv > 0.0) || !hv.is_finite() {
            return Err(bad(format!("scheme.h must be positive, got {hv}")));
        }
    }

    Ok(Experiment {
        model,
        h,
        rho,
        sweep_h,
        sweep_rho,
        sweep_mesh,
        probe,
        dt_rule,
        theta,
        radius,
        policy_tol,
        policy_max_iters,
        snapshot_stride,
        cache_dir,
        out,
        seed,
        fb_c0,
        fb_rate,
        verify_trials,
        verify_eps,
    })
}

fn check_monotone(name: &str, ladder: &[f64]) -> Result<()> {
    if ladder.len() < 2 {
        return Ok(());
    }
    let increasing = ladder.windows(2).all(|w| w[1] > w[0]);
    let decreasing = ladder.windows(2).all(|w| w[1] < w[0]);
    if !increasing && !decreasing {
        return Err(bad(format!("{name} ladder must be strictly monotone, got {ladder:?}")));
    }
    Ok(())
}

fn apply_model_keys(bag: &mut KeyBag, model: &mut ModelSpec) -> Result<()> {
    match model {
        ModelSpec::Investment(m) => {
            let fields: &mut [(&str, &mut f64)] = &mut [
                ("model.horizon", &mut m.horizon),
                ("model.x_max", &mut m.x_max),
                ("model.control_mesh", &mut m.control_mesh),
                ("model.drift_rate", &mut m.drift_rate),
                ("model.volatility", &mut m.volatility),
                ("model.jump_decay", &mut m.jump_decay),
                ("model.rate_lo", &mut m.rate_lo),
                ("model.rate_hi", &mut m.rate_hi),
                ("model.drift_ambiguity", &mut m.drift_ambiguity),
                ("model.jump_ambiguity", &mut m.jump_ambiguity),
            ];
            for (key, slot) in fields {
                if let Some(v) = bag.take_number(key)? {
                    **slot = v;
                }
            }
        }
        ModelSpec::Consumption(m) => {
            let fields: &mut [(&str, &mut f64)] = &mut [
                ("model.horizon", &mut m.horizon),
                ("model.x_max", &mut m.x_max),
                ("model.v_max", &mut m.v_max),
                ("model.control_mesh", &mut m.control_mesh),
                ("model.risk_aversion", &mut m.risk_aversion),
                ("model.eis", &mut m.eis),
                ("model.time_preference", &mut m.time_preference),
                ("model.rate", &mut m.rate),
                ("model.rho_corr", &mut m.rho_corr),
                ("model.excess_return", &mut m.excess_return),
                ("model.vol_of_vol", &mut m.vol_of_vol),
                ("model.mean_reversion", &mut m.mean_reversion),
                ("model.reversion_level", &mut m.reversion_level),
            ];
            for (key, slot) in fields {
                if let Some(v) = bag.take_number(key)? {
                    **slot = v;
                }
            }
        }
    }
    Ok(())
}

fn push_kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key} = {value}");
}

impl Experiment {
    /// Canonical dump of every effective setting, sorted by key; reruns of
    /// the same configuration produce byte-identical text.
    pub fn resolved_text(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        let mut add = |k: &str, v: String| rows.push((k.to_string(), v));

        add("model", self.model.id().to_string());
        match &self.model {
            ModelSpec::Investment(m) => {
                add("model.horizon", m.horizon.to_string());
                add("model.x_max", m.x_max.to_string());
                add("model.control_mesh", m.control_mesh.to_string());
                add("model.drift_rate", m.drift_rate.to_string());
                add("model.volatility", m.volatility.to_string());
                add("model.jump_decay", m.jump_decay.to_string());
                add("model.rate_lo", m.rate_lo.to_string());
                add("model.rate_hi", m.rate_hi.to_string());
                add("model.drift_ambiguity", m.drift_ambiguity.to_string());
                add("model.jump_ambiguity", m.jump_ambiguity.to_string());
            }
            ModelSpec::Consumption(m) => {
                add("model.horizon", m.horizon.to_string());
                add("model.x_max", m.x_max.to_string());
                add("model.v_max", m.v_max.to_string());
                add("model.control_mesh", m.control_mesh.to_string());
                add("model.risk_aversion", m.risk_aversion.to_string());
                add("model.eis", m.eis.to_string());
                add("model.time_preference", m.time_preference.to_string());
                add("model.rate", m.rate.to_string());
                add("model.rho_corr", m.rho_corr.to_string());
                add("model.excess_return", m.excess_return.to_string());
                add("model.vol_of_vol", m.vol_of_vol.to_string());
                add("model.mean_reversion", m.mean_reversion.to_string());
                add("model.reversion_level", m.reversion_level.to_string());
            }
        }
        if let Some(h) = self.h {
            add("scheme.h", h.to_string());
        }
        add("scheme.rho", self.rho.to_string());
        add("scheme.theta", self.theta.to_string());
        match self.dt_rule {
            DtRule::Lambda(l) => add("scheme.dt_lambda", l.to_string()),
            DtRule::Steps(s) => add("scheme.dt_steps", s.to_string()),
        }
        match self.radius {
            RadiusRule::Auto => add("scheme.radius", "auto".to_string()),
            RadiusRule::Explicit(r) => add("scheme.radius", r.to_string()),
        }
        add("scheme.policy_tol", self.policy_tol.to_string());
        add("scheme.policy_max_iters", self.policy_max_iters.to_string());
        add("scheme.snapshot_stride", self.snapshot_stride.to_string());
        if let Some(dir) = &self.cache_dir {
            add("scheme.cache_dir", dir.display().to_string());
        }
        for (key, ladder) in [
            ("sweep.h", &self.sweep_h),
            ("sweep.rho", &self.sweep_rho),
            ("sweep.control_mesh", &self.sweep_mesh),
        ] {
            if !ladder.is_empty() {
                let joined = ladder
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(", ");
                add(key, joined);
            }
        }
        add("probe.t", self.model.horizon().to_string());
        add("probe.x", self.probe[0].to_string());
        if self.probe.len() > 1 {
            add("probe.v", self.probe[1].to_string());
        }
        add("out", self.out.display().to_string());
        add("seed", self.seed.to_string());
        if let Some(c0) = self.fb_c0 {
            add("free_boundary.c0", c0.to_string());
        }
        add("free_boundary.rate", self.fb_rate.to_string());
        add("verify.trials", self.verify_trials.to_string());
        add("verify.eps", self.verify_eps.to_string());

        rows.sort();
        let mut text = String::new();
        for (k, v) in rows {
            push_kv(&mut text, &k, v);
        }
        text
    }

    /// Scheme settings for one cell of the sweep.
    pub fn scheme_config(&self, rho: f64) -> SchemeConfig {
        let mut cfg = SchemeConfig::new(self.dt_rule);
        cfg.theta = self.theta;
        cfg.rho = rho;
        cfg.radius = self.radius;
        cfg.policy_tol = self.policy_tol;
        cfg.policy_max_iters = self.policy_max_iters;
        cfg.snapshot_stride = self.snapshot_stride;
        cfg.stencil_cache_dir = self.cache_dir.clone();
        cfg
    }
}

/// Read a config file, apply overrides and resolve.
pub fn load(
    path: &std::path::Path,
    overrides: &[String],
    out_flag: Option<PathBuf>,
) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
    let pairs = parse_pairs(&text)?;
    let map = apply_overrides(pairs, overrides)?;
    resolve(map, out_flag)
}
