//! Contact-band extraction and set comparison.
//!
//! A penalized obstacle problem approaches its constrained limit from below
//! at rate `C0 * rho^{-rate}`, so the contact region ("stopped" set) can be
//! bracketed without knowing the limit: a node belongs to the band when its
//! value sits between `zeta - C0 * rho^{-rate}` and `zeta`. The constant
//! `C0` itself is recovered by regressing point values from a ladder of
//! penalty rates against `1 / rho`; the intercept of that fit is the
//! extrapolated unpenalized value.
//!
//! Band and argmin sets are compared through Hausdorff distances, either on
//! physical coordinates or in the discrete metric (where any two distinct
//! points are at distance one, so the symmetric distance is zero exactly for
//! equal sets).

use crate::error::{Result, SolverError};
use crate::grid::Field;

/// Parameters of the penalty-error envelope `C0 * rho^{-rate}`.
#[derive(Clone, Copy, Debug)]
pub struct FreeBoundaryParams {
    pub c0: f64,
    /// Error-rate exponent in the penalty parameter; 1 for obstacles smooth
    /// in time, lower for Hölder ones.
    pub rate: f64,
}

impl FreeBoundaryParams {
    pub fn new(c0: f64, rate: f64) -> Result<Self> {
        if !(c0 > 0.0) || !c0.is_finite() {
            return Err(SolverError::InvalidConfig(format!(
                "penalty-error constant must be positive and finite, got {c0}"
            )));
        }
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(SolverError::InvalidConfig(format!(
                "penalty-error rate must lie in (0, 1], got {rate}"
            )));
        }
        Ok(Self { c0, rate })
    }

    /// Width of the band below the obstacle at penalty rate `rho`.
    pub fn band_width(&self, rho: f64) -> f64 {
        self.c0 * rho.powf(-self.rate)
    }
}

/// Result of regressing ladder values against the reciprocal penalty rate.
#[derive(Clone, Copy, Debug)]
pub struct PenaltyFit {
    /// Extrapolated value at infinite penalty (the regression intercept).
    pub intercept: f64,
    /// Magnitude of the regression slope.
    pub c0: f64,
    /// Largest absolute deviation of the samples from the fitted line.
    pub max_residual: f64,
}

/// Least-squares fit of `value ~ intercept - c0 / rho` from `(rho, value)`
/// samples. Needs at least three ladder points with distinct rates.
pub fn estimate_c0(samples: &[(f64, f64)]) -> Result<PenaltyFit> {
    if samples.len() < 3 {
        return Err(SolverError::InvalidConfig(format!(
            "the penalty regression needs at least 3 ladder points, got {}",
            samples.len()
        )));
    }
    let mut xs = Vec::with_capacity(samples.len());
    for &(rho, v) in samples {
        if !(rho > 0.0) || !rho.is_finite() || !v.is_finite() {
            return Err(SolverError::InvalidConfig(format!(
                "ladder samples need positive finite rates and finite values, got ({rho}, {v})"
            )));
        }
        xs.push(1.0 / rho);
    }
    let n = samples.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut scale = 0.0f64;
    for (x, s) in xs.iter().zip(samples) {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (s.1 - ybar);
        scale = scale.max(x * x);
    }
    if sxx <= 1e-28 * scale.max(f64::MIN_POSITIVE) {
        return Err(SolverError::RankDeficient(
            "penalty ladder rates are not distinct; the regression line is undetermined".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let mut max_residual = 0.0f64;
    for (x, s) in xs.iter().zip(samples) {
        max_residual = max_residual.max((s.1 - (intercept + slope * x)).abs());
    }
    Ok(PenaltyFit {
        intercept,
        c0: slope.abs(),
        max_residual,
    })
}

/// A finite set of tagged points: `(level, index)` membership plus one
/// coordinate vector per member (time prepended for space-time sets, raw
/// control coordinates for argmin sets).
#[derive(Clone, Debug)]
pub struct NodeSet {
    dim: usize,
    members: Vec<(usize, usize)>,
    coords: Vec<f64>,
}

impl NodeSet {
    pub fn new(dim: usize, members: Vec<(usize, usize)>, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.len() != members.len() * dim {
            return Err(SolverError::InvalidConfig(format!(
                "node set needs {} coordinates for {} members of dimension {dim}, got {}",
                members.len() * dim,
                members.len(),
                coords.len()
            )));
        }
        Ok(Self {
            dim,
            members,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(level, index)` tags in insertion order.
    pub fn members(&self) -> &[(usize, usize)] {
        &self.members
    }

    pub fn coord(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }
}

/// Contact band at penalty rate `rho`: nodes whose value lies in
/// `[zeta - C0 rho^{-rate}, zeta]`. `levels` pairs each field with its time,
/// and the member tags record the position of the level in the slice.
pub fn gamma_rho(
    levels: &[(f64, &Field)],
    zeta: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
    params: &FreeBoundaryParams,
    rho: f64,
) -> Result<NodeSet> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(SolverError::InvalidConfig(format!(
            "penalty rate must be positive and finite, got {rho}"
        )));
    }
    let width = params.band_width(rho);
    let mut members = Vec::new();
    let mut coords = Vec::new();
    let mut dim = 0;
    for (lvl, (t, field)) in levels.iter().enumerate() {
        let grid = field.grid();
        let d = grid.dim();
        dim = d + 1;
        let mut x = vec![0.0; d];
        for (i, &v) in field.values().iter().enumerate() {
            grid.coords_into(i, &mut x);
            let z = zeta(*t, &x);
            if v >= z - width && v <= z {
                members.push((lvl, i));
                coords.push(*t);
                coords.extend_from_slice(&x);
            }
        }
    }
    if levels.is_empty() {
        return Err(SolverError::EmptyNodeSet);
    }
    NodeSet::new(dim, members, coords)
}

/// Which ground distance the set comparison uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetMetric {
    /// Euclidean distance between coordinate vectors.
    Euclidean,
    /// 0 for identical coordinate vectors, 1 otherwise.
    Discrete,
}

fn point_distance(a: &[f64], b: &[f64], metric: SetMetric) -> f64 {
    match metric {
        SetMetric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt(),
        SetMetric::Discrete => {
            if a == b {
                0.0
            } else {
                1.0
            }
        }
    }
}

/// `sup_{x in a} inf_{y in b} dist(x, y)`; zero exactly when `a` is covered
/// by `b` (in the discrete metric, when `a` is a subset of `b`).
pub fn directed_hausdorff(a: &NodeSet, b: &NodeSet, metric: SetMetric) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SolverError::EmptyNodeSet);
    }
    if a.dim() != b.dim() {
        return Err(SolverError::InvalidConfig(format!(
            "node sets of dimension {} and {} cannot be compared",
            a.dim(),
            b.dim()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        let p = a.coord(i);
        let mut best = f64::INFINITY;
        for j in 0..b.len() {
            best = best.min(point_distance(p, b.coord(j), metric));
            if best == 0.0 {
                break;
            }
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Symmetric Hausdorff distance: the larger of the two directed distances.
pub fn hausdorff(a: &NodeSet, b: &NodeSet, metric: SetMetric) -> Result<f64> {
    Ok(directed_hausdorff(a, b, metric)?.max(directed_hausdorff(b, a, metric)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::UniformGrid;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn line_set(points: &[f64]) -> NodeSet {
        let members = (0..points.len()).map(|i| (0, i)).collect();
        NodeSet::new(1, members, points.to_vec()).unwrap()
    }

    #[test]
    fn regression_recovers_its_own_model_exactly() {
        let (u, c) = (0.73, 12.5);
        let samples: Vec<(f64, f64)> = [1e3, 4e3, 16e3, 64e3]
            .iter()
            .map(|&rho| (rho, u - c / rho))
            .collect();
        let fit = estimate_c0(&samples).unwrap();
        assert!((fit.intercept - u).abs() < 1e-12);
        assert!((fit.c0 - c).abs() < 1e-9);
        assert!(fit.max_residual < 1e-12);
    }

    #[test]
    fn regression_rejects_degenerate_ladders() {
        let err = estimate_c0(&[(1e3, 0.1), (4e3, 0.2)]).unwrap_err();
        assert!(matches!(err, SolverError::InvalidConfig(_)));
        let err = estimate_c0(&[(1e3, 0.1), (1e3, 0.2), (1e3, 0.3)]).unwrap_err();
        assert!(matches!(err, SolverError::RankDeficient(_)));
        let err = estimate_c0(&[(1e3, 0.1), (4e3, f64::NAN), (16e3, 0.3)]).unwrap_err();
        assert!(matches!(err, SolverError::InvalidConfig(_)));
    }

    #[test]
    fn regression_extrapolates_a_monotone_ladder_from_below() {
        let samples = [
            (1e3, 0.72930381),
            (4e3, 0.72932303),
            (16e3, 0.72932783),
            (64e3, 0.72932903),
        ];
        let fit = estimate_c0(&samples).unwrap();
        assert!(fit.c0 > 0.0);
        for &(_, v) in &samples {
            assert!(fit.intercept > v, "intercept {} not above {v}", fit.intercept);
        }
    }

    #[test]
    fn band_membership_follows_the_envelope() {
        let grid = Arc::new(UniformGrid::from_spacing(&[0.0], &[1.0], 0.25).unwrap());
        let params = FreeBoundaryParams::new(20.0, 1.0).unwrap();
        let rho = 1e3; // band width 0.02
        let zeta = |_t: f64, _x: &[f64]| 1.0;

        let on = Field::constant(grid.clone(), 1.0).unwrap();
        let set = gamma_rho(&[(0.0, &on)], &zeta, &params, rho).unwrap();
        assert_eq!(set.len(), grid.num_nodes());

        let above = Field::constant(grid.clone(), 1.01).unwrap();
        let set = gamma_rho(&[(0.0, &above)], &zeta, &params, rho).unwrap();
        assert!(set.is_empty());

        let mut vals = vec![0.5; grid.num_nodes()];
        vals[2] = 0.99;
        let mixed = Field::new(grid.clone(), vals).unwrap();
        let set = gamma_rho(&[(0.0, &mixed)], &zeta, &params, rho).unwrap();
        assert_eq!(set.members(), &[(0, 2)]);
        assert_eq!(set.coord(0), &[0.0, 0.5]);
    }

    #[test]
    fn band_tracks_levels_separately() {
        let grid = Arc::new(UniformGrid::from_spacing(&[0.0], &[1.0], 0.5).unwrap());
        let params = FreeBoundaryParams::new(10.0, 1.0).unwrap();
        let zeta = |t: f64, _x: &[f64]| 1.0 + t;
        let a = Field::constant(grid.clone(), 1.0).unwrap();
        let b = Field::constant(grid.clone(), 1.0).unwrap();
        // At t=0 the field sits on the obstacle; at t=0.5 it is far below.
        let set = gamma_rho(&[(0.0, &a), (0.5, &b)], &zeta, &params, 1e3).unwrap();
        assert_eq!(set.len(), grid.num_nodes());
        assert!(set.members().iter().all(|&(lvl, _)| lvl == 0));
    }

    #[test]
    fn hausdorff_matches_hand_values() {
        let a = line_set(&[0.0]);
        let b = line_set(&[0.0, 1.0]);
        assert_eq!(hausdorff(&a, &a, SetMetric::Euclidean).unwrap(), 0.0);
        assert_eq!(directed_hausdorff(&a, &b, SetMetric::Euclidean).unwrap(), 0.0);
        assert_eq!(directed_hausdorff(&b, &a, SetMetric::Euclidean).unwrap(), 1.0);
        assert_eq!(hausdorff(&a, &b, SetMetric::Euclidean).unwrap(), 1.0);
    }

    #[test]
    fn discrete_metric_separates_unequal_sets_only() {
        let a = line_set(&[0.0, 2.0]);
        let b = line_set(&[2.0, 0.0]);
        let c = line_set(&[0.0, 3.0]);
        assert_eq!(hausdorff(&a, &b, SetMetric::Discrete).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &c, SetMetric::Discrete).unwrap(), 1.0);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let a = line_set(&[0.0]);
        let empty = NodeSet::new(1, Vec::new(), Vec::new()).unwrap();
        let err = hausdorff(&a, &empty, SetMetric::Euclidean).unwrap_err();
        assert!(matches!(err, SolverError::EmptyNodeSet));
        let err = directed_hausdorff(&empty, &a, SetMetric::Euclidean).unwrap_err();
        assert!(matches!(err, SolverError::EmptyNodeSet));
    }

    proptest! {
        #[test]
        fn hausdorff_is_a_metric_on_random_triples(
            pa in prop::collection::vec(-5.0f64..5.0, 1..6),
            pb in prop::collection::vec(-5.0f64..5.0, 1..6),
            pc in prop::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let a = line_set(&pa);
            let b = line_set(&pb);
            let c = line_set(&pc);
            for metric in [SetMetric::Euclidean, SetMetric::Discrete] {
                let ab = hausdorff(&a, &b, metric).unwrap();
                let ba = hausdorff(&b, &a, metric).unwrap();
                let ac = hausdorff(&a, &c, metric).unwrap();
                let cb = hausdorff(&c, &b, metric).unwrap();
                let aa = hausdorff(&a, &a, metric).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert_eq!(aa, 0.0);
                prop_assert!(ab <= ac + cb + 1e-12);
            }
        }
    }
}
