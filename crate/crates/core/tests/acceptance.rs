//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line with its measured quantities before asserting.
//!
//! The criteria pin reference probe values, convergence-ratio bands and
//! tolerances for the two bundled experiments (the ambiguity investment
//! model and the recursive-utility consumption model) plus structural
//! property suites. Runs are cached in-process, so criteria sharing an
//! instance pay for it once. The full gate is deliberately expensive
//! (roughly half to three quarters of an hour on one desktop core).

use hjbvi::free_boundary::{self, FreeBoundaryParams, SetMetric};
use hjbvi::grid::Field;
use hjbvi::models::{AmbiguityScenario, EpsteinZin, InvestmentAmbiguity};
use hjbvi::oracle;
use hjbvi::scheme::{self, StepStats};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

// Investment model: state-mesh ladder, probe reference at the finest mesh,
// admissible increment-ratio band for first-order convergence.
const STATE_LADDER: [u32; 4] = [40, 80, 160, 320];
const STATE_RATIO_BAND: (f64, f64) = (1.8, 2.2);
const STATE_PROBE_GOLD: f64 = 0.7293277;
const STATE_PROBE_TOL: f64 = 1e-3;

// Penalty ladder at the finest state mesh; reference values per scenario and
// the admissible increment-ratio band for first-order decay in 1/rho. The
// value tolerance is the relaxed one that goes with the 1/320 mesh.
const PENALTY_LADDER: [f64; 4] = [1e3, 4e3, 16e3, 64e3];
const PENALTY_RATIO_BAND: (f64, f64) = (3.7, 4.3);
const PENALTY_GOLD_WORST: [f64; 4] = [0.72930381, 0.72932303, 0.72932783, 0.72932903];
const PENALTY_GOLD_BEST: [f64; 4] = [0.75071151, 0.75071215, 0.75071231, 0.75071235];
const PENALTY_TOL: f64 = 2e-3;

const MAX_POLICY_ITERS: usize = 10;

// Consumption model: state-mesh ladder at fixed control mesh, reference
// probe value at the finest mesh, admissible ratio band for the finest
// increment pair.
const CONSUMPTION_LADDER: [u32; 3] = [100, 200, 400];
const CONSUMPTION_RATIO_BAND: (f64, f64) = (1.7, 2.4);
const CONSUMPTION_GOLD: f64 = -0.6580512;
const CONSUMPTION_TOL: f64 = 5e-3;

// Control-mesh ladder at the finest state mesh: increments must shrink
// strictly, the last one below this bound.
const CONTROL_LADDER: [u32; 4] = [5, 10, 20, 40];
const CONTROL_FINAL_TOL: f64 = 1e-3;

// Doubling the domain must leave the probe unchanged to this relative
// tolerance and the iteration count unchanged within one.
const DOMAIN_REL_TOL: f64 = 1e-6;

/// One completed run, reduced to what the criteria read.
struct Bundle {
    probe: f64,
    max_iters: usize,
    final_field: Field,
    steps: Vec<StepStats>,
    spacing: f64,
}

type AmbKey = (bool, u32, u64, u64);
static AMB_RUNS: OnceLock<Mutex<HashMap<AmbKey, Arc<Bundle>>>> = OnceLock::new();

fn ambiguity_model(best: bool, x_max: f64) -> InvestmentAmbiguity {
    let scenario = if best {
        AmbiguityScenario::Best
    } else {
        AmbiguityScenario::Worst
    };
    let mut model = InvestmentAmbiguity::new(scenario);
    model.x_max = x_max;
    model
}

fn ambiguity_run(best: bool, h_den: u32, rho: f64, x_max: f64) -> Arc<Bundle> {
    let cache = AMB_RUNS.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (best, h_den, rho.to_bits(), x_max.to_bits());
    if let Some(b) = cache.lock().unwrap().get(&key) {
        return b.clone();
    }
    let model = ambiguity_model(best, x_max);
    let h = 1.0 / f64::from(h_den);
    let problem = model.build_problem(h).expect("investment problem builds");
    let config = model.scheme_config(rho);
    let out = scheme::run(&problem, &config).expect("investment run completes");
    let idx = model.spot_index(&problem.grid).expect("probe point on grid");
    let bundle = Arc::new(Bundle {
        probe: out.final_field.values()[idx],
        max_iters: out.steps.iter().map(|s| s.iterations).max().unwrap_or(0),
        final_field: out.final_field,
        steps: out.steps,
        spacing: h,
    });
    cache.lock().unwrap().insert(key, bundle.clone());
    bundle
}

type EzKey = (u32, u32);
static EZ_RUNS: OnceLock<Mutex<HashMap<EzKey, Arc<Bundle>>>> = OnceLock::new();

fn consumption_run(h_den: u32, mesh_den: u32) -> Arc<Bundle> {
    let cache = EZ_RUNS.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (h_den, mesh_den);
    if let Some(b) = cache.lock().unwrap().get(&key) {
        return b.clone();
    }
    let mut model = EpsteinZin::default();
    model.control_mesh = 1.0 / f64::from(mesh_den);
    let h = 1.0 / f64::from(h_den);
    let problem = model.build_problem(h).expect("consumption problem builds");
    let config = model.scheme_config();
    let out = scheme::run(&problem, &config).expect("consumption run completes");
    let idx = model.spot_index(&problem.grid).expect("probe point on grid");
    let bundle = Arc::new(Bundle {
        probe: out.final_field.values()[idx],
        max_iters: out.steps.iter().map(|s| s.iterations).max().unwrap_or(0),
        final_field: out.final_field,
        steps: out.steps,
        spacing: h,
    });
    cache.lock().unwrap().insert(key, bundle.clone());
    bundle
}

fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} {}: {name} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn criterion_1_state_mesh_refinement_order() {
    let probes: Vec<f64> = STATE_LADDER
        .iter()
        .map(|&d| ambiguity_run(false, d, 16e3, 2.0).probe)
        .collect();
    let monotone = probes.windows(2).all(|w| w[1] > w[0]);
    let incs: Vec<f64> = probes.windows(2).map(|w| w[1] - w[0]).collect();
    let ratios: Vec<f64> = incs.windows(2).map(|w| w[0] / w[1]).collect();
    let in_band = ratios
        .iter()
        .all(|r| *r >= STATE_RATIO_BAND.0 && *r <= STATE_RATIO_BAND.1);
    let gap = (probes[probes.len() - 1] - STATE_PROBE_GOLD).abs();
    let pass = monotone && in_band && gap < STATE_PROBE_TOL;
    verdict(
        1,
        "state-mesh refinement is first order at the probe",
        pass,
        &format!(
            "probes {probes:.7?}, ratios {ratios:.3?}, reference gap {gap:.2e} (tol {STATE_PROBE_TOL:.0e})"
        ),
    );
}

#[test]
fn criterion_2_penalty_rate_refinement_order() {
    let mut pass = true;
    let mut details = Vec::new();
    for (best, gold) in [(false, PENALTY_GOLD_WORST), (true, PENALTY_GOLD_BEST)] {
        let probes: Vec<f64> = PENALTY_LADDER
            .iter()
            .map(|&rho| ambiguity_run(best, 320, rho, 2.0).probe)
            .collect();
        let monotone = probes.windows(2).all(|w| w[1] > w[0]);
        let incs: Vec<f64> = probes.windows(2).map(|w| w[1] - w[0]).collect();
        let ratios: Vec<f64> = incs.windows(2).map(|w| w[0] / w[1]).collect();
        let in_band = ratios
            .iter()
            .all(|r| *r >= PENALTY_RATIO_BAND.0 && *r <= PENALTY_RATIO_BAND.1);
        let worst_gap = probes
            .iter()
            .zip(gold)
            .map(|(p, g)| (p - g).abs())
            .fold(0.0f64, f64::max);
        pass &= monotone && in_band && worst_gap < PENALTY_TOL;
        details.push(format!(
            "{} ratios {ratios:.3?} reference gap {worst_gap:.2e}",
            if best { "best" } else { "worst" }
        ));
    }
    verdict(
        2,
        "penalty refinement is first order in 1/rho for both scenarios",
        pass,
        &details.join("; "),
    );
}

#[test]
fn criterion_3_policy_iteration_efficiency() {
    let mut max_iters = 0usize;
    let mut first_ratios = Vec::new();
    let mut last_ratios = Vec::new();
    for &d in &STATE_LADDER {
        let bundle = ambiguity_run(false, d, 16e3, 2.0);
        max_iters = max_iters.max(bundle.max_iters);
        for step in &bundle.steps {
            let del = &step.deltas;
            if del.len() >= 3 && del.iter().all(|x| *x > 0.0) {
                first_ratios.push(del[1] / del[0]);
                last_ratios.push(del[del.len() - 1] / del[del.len() - 2]);
            }
        }
    }
    let enough = !first_ratios.is_empty();
    let (mf, ml) = if enough {
        (median(first_ratios), median(last_ratios))
    } else {
        (f64::NAN, f64::NAN)
    };
    let pass = max_iters <= MAX_POLICY_ITERS && enough && ml < mf;
    verdict(
        3,
        "policy iteration stays cheap and contracts superlinearly",
        pass,
        &format!(
            "max iterations {max_iters} (cap {MAX_POLICY_ITERS}), median increment ratio first {mf:.3} vs last {ml:.3}"
        ),
    );
}

#[test]
fn criterion_4_consumption_model_convergence() {
    let probes: Vec<f64> = CONSUMPTION_LADDER
        .iter()
        .map(|&d| consumption_run(d, 20).probe)
        .collect();
    let incs: Vec<f64> = probes.windows(2).map(|w| w[1] - w[0]).collect();
    let ratio = incs[0] / incs[1];
    let in_band = ratio >= CONSUMPTION_RATIO_BAND.0 && ratio <= CONSUMPTION_RATIO_BAND.1;
    let gap = (probes[probes.len() - 1] - CONSUMPTION_GOLD).abs();
    let pass = in_band && gap < CONSUMPTION_TOL;
    verdict(
        4,
        "consumption-model state refinement converges at the probe",
        pass,
        &format!(
            "probes {probes:.7?}, finest increment ratio {ratio:.3} (band {CONSUMPTION_RATIO_BAND:?}), reference gap {gap:.2e}"
        ),
    );
}

#[test]
fn criterion_5_control_mesh_refinement() {
    let probes: Vec<f64> = CONTROL_LADDER
        .iter()
        .map(|&m| consumption_run(400, m).probe)
        .collect();
    let incs: Vec<f64> = probes.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let shrinking = incs.windows(2).all(|w| w[1] < w[0]);
    let final_inc = incs[incs.len() - 1];
    let pass = shrinking && final_inc < CONTROL_FINAL_TOL;
    let inc_list = incs
        .iter()
        .map(|i| format!("{i:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        5,
        "control-mesh refinement settles at the probe",
        pass,
        &format!("probes {probes:.7?}, increments [{inc_list}], final {final_inc:.2e}"),
    );
}

#[test]
fn criterion_6_property_suites() {
    let mut parts = Vec::new();
    let mut pass = true;

    // (a) monotonicity probe under a certified step on a ~50-node instance.
    let model = ambiguity_model(false, 2.0);
    let problem = model.build_problem(1.0 / 24.0).unwrap();
    let config = model.scheme_config(16e3);
    let mono = oracle::probe_monotonicity(&problem, &config, 10_000, 2024).unwrap();
    pass &= mono.passed;
    parts.push(format!("a:{}", if mono.passed { "pass" } else { "FAIL" }));

    // (b) a priori growth bound re-derived from published constants on
    // representative runs; the march itself enforces the same ladder with
    // sharper constants on every run in this gate.
    let mut apriori_ok = true;
    for (best, rho) in [(false, 16e3), (true, 1e3)] {
        let model = ambiguity_model(best, 2.0);
        let problem = model.build_problem(1.0 / 40.0).unwrap();
        let report = oracle::probe_apriori(&problem, &model.scheme_config(rho)).unwrap();
        apriori_ok &= report.passed;
    }
    {
        let model = EpsteinZin::default();
        let problem = model.build_problem(0.01).unwrap();
        let report = oracle::probe_apriori(&problem, &model.scheme_config()).unwrap();
        apriori_ok &= report.passed;
    }
    pass &= apriori_ok;
    parts.push(format!("b:{}", if apriori_ok { "pass" } else { "FAIL" }));

    // (c) reference fixed-point solve agrees with policy iteration on the
    // tiny-instance fixture suite.
    let mut oracle_ok = true;
    let mut worst_gap = 0.0f64;
    for best in [false, true] {
        for rho in [1e3, 16e3] {
            let model = ambiguity_model(best, 2.0);
            let mut problem = model.build_problem(0.1).unwrap();
            problem.horizon = 0.02;
            let config = model.scheme_config(rho);
            let out = scheme::run(&problem, &config).unwrap();
            let init = problem.obstacle.initial.clone();
            let u0 = Field::from_fn(problem.grid.clone(), |x| init(x)).unwrap();
            let reference = oracle::fixed_point_solve(&problem, &config, 0, &u0, 400).unwrap();
            let gap = reference.sup_diff(&out.final_field);
            worst_gap = worst_gap.max(gap);
            oracle_ok &= gap < 1e-8;
        }
    }
    pass &= oracle_ok;
    parts.push(format!(
        "c:{} (gap {worst_gap:.1e})",
        if oracle_ok { "pass" } else { "FAIL" }
    ));

    // (d) slant identity for both model drivers.
    let worst = ambiguity_model(false, 2.0);
    let best = ambiguity_model(true, 2.0);
    let ez = EpsteinZin::default();
    let ys = [-0.8, -0.3, 0.0, 0.5, 1.0];
    let slant_ok = oracle::probe_slant("ambiguity worst", &worst.driver(), &[0.6], &[1.2], &ys, 0.3)
        .unwrap()
        .passed
        && oracle::probe_slant("ambiguity best", &best.driver(), &[0.6], &[1.2], &ys, -0.2)
            .unwrap()
            .passed
        && oracle::probe_slant(
            "recursive utility",
            &ez.driver(),
            &[0.4, 0.5],
            &[1.0, 0.02],
            &[-2.0, -1.0, -0.25],
            0.0,
        )
        .unwrap()
        .passed;
    pass &= slant_ok;
    parts.push(format!("d:{}", if slant_ok { "pass" } else { "FAIL" }));

    // (e) penalty ladders increase nodewise in both scenarios.
    let mut nodewise_ok = true;
    for bset in [false, true] {
        let ladder: Vec<Arc<Bundle>> = PENALTY_LADDER
            .iter()
            .map(|&rho| ambiguity_run(bset, 320, rho, 2.0))
            .collect();
        for pair in ladder.windows(2) {
            for (a, b) in pair[0]
                .final_field
                .values()
                .iter()
                .zip(pair[1].final_field.values())
            {
                nodewise_ok &= *a <= b + 1e-10;
            }
        }
    }
    pass &= nodewise_ok;
    parts.push(format!("e:{}", if nodewise_ok { "pass" } else { "FAIL" }));

    // (f) the worst-case value never exceeds the best-case value.
    let mut order_ok = true;
    for rho in [16e3, 64e3] {
        let w = ambiguity_run(false, 320, rho, 2.0);
        let b = ambiguity_run(true, 320, rho, 2.0);
        for (a, c) in w.final_field.values().iter().zip(b.final_field.values()) {
            order_ok &= *a <= c + 1e-10;
        }
    }
    pass &= order_ok;
    parts.push(format!("f:{}", if order_ok { "pass" } else { "FAIL" }));

    // (g) contact bands approach the finest-penalty proxy monotonically
    // (one-sided set distance, one cell of slack), with the band constant
    // estimated from the two finest ladder runs.
    let ladder: Vec<Arc<Bundle>> = PENALTY_LADDER
        .iter()
        .map(|&rho| ambiguity_run(false, 320, rho, 2.0))
        .collect();
    let n_rho = PENALTY_LADDER.len();
    let (rho_a, rho_b) = (PENALTY_LADDER[n_rho - 2], PENALTY_LADDER[n_rho - 1]);
    let mut c0 = 0.0f64;
    for (ua, ub) in ladder[n_rho - 2]
        .final_field
        .values()
        .iter()
        .zip(ladder[n_rho - 1].final_field.values())
    {
        c0 = c0.max((ub - ua).abs() / (1.0 / rho_a - 1.0 / rho_b));
    }
    let params = FreeBoundaryParams::new(c0.max(1e-9), 1.0).unwrap();
    let zeta = |_t: f64, x: &[f64]| model.utility(x[0]);
    let sets: Vec<_> = ladder
        .iter()
        .zip(&PENALTY_LADDER)
        .map(|(b, &rho)| {
            free_boundary::gamma_rho(&[(1.0, &b.final_field)], &zeta, &params, rho).unwrap()
        })
        .collect();
    let dists: Vec<f64> = sets
        .iter()
        .map(|s| free_boundary::directed_hausdorff(s, &sets[n_rho - 1], SetMetric::Euclidean).unwrap())
        .collect();
    let cell = ladder[0].spacing * (1.0 + 1e-9);
    let band_ok = dists.windows(2).all(|w| w[1] <= w[0] + cell);
    pass &= band_ok;
    parts.push(format!(
        "g:{} (distances {dists:.4?})",
        if band_ok { "pass" } else { "FAIL" }
    ));

    // (h) every Newton system assembled in this gate carried the dominance
    // margin check inside the linear-solve path; reaching this point means
    // no solve reported a violation.
    let solves: usize = STATE_LADDER
        .iter()
        .map(|&d| {
            ambiguity_run(false, d, 16e3, 2.0)
                .steps
                .iter()
                .map(|s| s.iterations)
                .sum::<usize>()
        })
        .sum();
    parts.push(format!("h:pass ({solves} checked solves)"));

    verdict(6, "structural property suites", pass, &parts.join(", "));
}

#[test]
fn criterion_7_domain_robustness() {
    let narrow = ambiguity_run(false, 320, 16e3, 2.0);
    let wide = ambiguity_run(false, 320, 16e3, 4.0);
    let rel = (wide.probe - narrow.probe).abs() / narrow.probe.abs();
    let iter_gap = wide.max_iters.abs_diff(narrow.max_iters);
    let pass = rel < DOMAIN_REL_TOL && iter_gap <= 1;
    verdict(
        7,
        "doubling the domain leaves the probe unchanged",
        pass,
        &format!(
            "relative probe change {rel:.2e} (tol {DOMAIN_REL_TOL:.0e}), max iterations {} vs {}",
            narrow.max_iters, wide.max_iters
        ),
    );
}
