//! Uniform tensor grids, time partitions, node fields and boundary rules.
//!
//! The solver works on cell-vertex grids over a box `[lo_1, hi_1] x ... x [lo_d, hi_d]`
//! with one value per node. Nodes are addressed either by a flat index or by a
//! multi-index `(i_1, ..., i_d)` in row-major order (the last axis varies fastest).
//!
//! Values outside the grid are supplied by per-face boundary rules:
//!
//! * exterior extension: the problem prescribes the solution outside the domain
//!   (localized nonlocal equations); the exterior function is evaluated at the
//!   exact off-grid lattice point, never clamped,
//! * homogeneous Neumann: the first interior value is mirrored across the face,
//! * equation on boundary: the face node carries the equation itself with
//!   one-sided stencils, so nothing may reference the outside; doing so is an error.

use crate::error::{Result, SolverError};
use std::sync::Arc;

/// Exterior data as a function of time and the exact spatial point.
pub type ExteriorFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Uniform cell-vertex grid on a box.
#[derive(Clone, Debug)]
pub struct UniformGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    spacing: Vec<f64>,
    counts: Vec<usize>,
    strides: Vec<usize>,
}

impl UniformGrid {
    /// Build a grid from bounds and a common spacing `h`. The spacing must
    /// divide every axis extent (relative tolerance 1e-9) and every axis must
    /// carry at least three nodes.
    pub fn from_spacing(lo: &[f64], hi: &[f64], h: f64) -> Result<Self> {
        let spacing = vec![h; lo.len()];
        Self::from_spacings(lo, hi, &spacing)
    }

    /// Build a grid with a per-axis spacing.
    pub fn from_spacings(lo: &[f64], hi: &[f64], spacing: &[f64]) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.len() != spacing.len() {
            return Err(SolverError::InvalidConfig(
                "grid bounds and spacing must share a positive dimension".into(),
            ));
        }
        let mut counts = Vec::with_capacity(lo.len());
        for axis in 0..lo.len() {
            let extent = hi[axis] - lo[axis];
            let h = spacing[axis];
            if !(extent > 0.0) || !(h > 0.0) {
                return Err(SolverError::InvalidConfig(format!(
                    "axis {axis}: extent and spacing must be positive (extent {extent}, h {h})"
                )));
            }
            let cells = extent / h;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-9 * cells.max(1.0) {
                return Err(SolverError::InvalidConfig(format!(
                    "axis {axis}: spacing {h} does not divide extent {extent}"
                )));
            }
            let n = rounded as usize + 1;
            if n < 3 {
                return Err(SolverError::InvalidConfig(format!(
                    "axis {axis}: needs at least 3 nodes, got {n}"
                )));
            }
            counts.push(n);
        }
        let mut strides = vec![1usize; lo.len()];
        for axis in (0..lo.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * counts[axis + 1];
        }
        Ok(Self {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            spacing: spacing.to_vec(),
            counts,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Flat index of a multi-index (row-major, last axis fastest).
    pub fn flat(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        multi
            .iter()
            .zip(&self.strides)
            .map(|(i, s)| i * s)
            .sum()
    }

    /// Multi-index of a flat index.
    pub fn multi(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.dim()];
        self.multi_into(flat, &mut out);
        out
    }

    pub fn multi_into(&self, flat: usize, out: &mut [usize]) {
        let mut rem = flat;
        for axis in 0..self.dim() {
            out[axis] = rem / self.strides[axis];
            rem %= self.strides[axis];
        }
    }

    /// Physical coordinates of a node.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.coords_into(flat, &mut out);
        out
    }

    pub fn coords_into(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for axis in 0..self.dim() {
            let i = rem / self.strides[axis];
            rem %= self.strides[axis];
            out[axis] = self.lo[axis] + i as f64 * self.spacing[axis];
        }
    }

    /// Coordinates of an arbitrary (possibly exterior) lattice point.
    pub fn lattice_coords(&self, idx: &[i64]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(axis, &i)| self.lo[axis] + i as f64 * self.spacing[axis])
            .collect()
    }

    /// Flat index of the grid node nearest to `point`, provided the point lies
    /// on the lattice (relative tolerance `tol` in units of the spacing).
    pub fn node_at(&self, point: &[f64], tol: f64) -> Result<usize> {
        let mut flat = 0usize;
        for axis in 0..self.dim() {
            let s = (point[axis] - self.lo[axis]) / self.spacing[axis];
            let i = s.round();
            if (s - i).abs() > tol || i < 0.0 || i as usize >= self.counts[axis] {
                return Err(SolverError::InvalidConfig(format!(
                    "point is not a grid node on axis {axis} (offset {s})"
                )));
            }
            flat += i as usize * self.strides[axis];
        }
        Ok(flat)
    }

    /// True when the node lies on the boundary face `(axis, side)`
    /// (side 0 = lower, side 1 = upper).
    pub fn on_face(&self, flat: usize, axis: usize, side: usize) -> bool {
        let i = (flat / self.strides[axis]) % self.counts[axis];
        if side == 0 {
            i == 0
        } else {
            i == self.counts[axis] - 1
        }
    }
}

/// Rule supplying values beyond one face of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceRule {
    /// The exterior function of the problem is evaluated at the exact point.
    ExteriorExtension,
    /// Homogeneous Neumann: mirror the first interior value across the face.
    HomogeneousNeumann,
    /// The equation itself holds on the face with one-sided stencils; nothing
    /// may look outside across this face.
    EquationOnBoundary,
}

/// Boundary description: one rule per face, plus the exterior function where
/// any face uses exterior extension.
#[derive(Clone)]
pub struct BoundaryConditions {
    /// `faces[axis] = [lower rule, upper rule]`.
    pub faces: Vec<[FaceRule; 2]>,
    pub exterior: Option<ExteriorFn>,
}

impl BoundaryConditions {
    /// The same rule on every face, with no exterior function.
    pub fn uniform(dim: usize, rule: FaceRule) -> Self {
        Self {
            faces: vec![[rule; 2]; dim],
            exterior: None,
        }
    }

    pub fn exterior_everywhere(dim: usize, exterior: ExteriorFn) -> Self {
        Self {
            faces: vec![[FaceRule::ExteriorExtension; 2]; dim],
            exterior: Some(exterior),
        }
    }

    pub fn validate(&self, grid: &UniformGrid) -> Result<()> {
        if self.faces.len() != grid.dim() {
            return Err(SolverError::InvalidConfig(
                "boundary rules must cover every axis".into(),
            ));
        }
        let needs_exterior = self
            .faces
            .iter()
            .flatten()
            .any(|r| *r == FaceRule::ExteriorExtension);
        if needs_exterior && self.exterior.is_none() {
            return Err(SolverError::InvalidConfig(
                "exterior-extension faces require an exterior function".into(),
            ));
        }
        Ok(())
    }

    pub fn rule(&self, axis: usize, side: usize) -> FaceRule {
        self.faces[axis][side]
    }
}

/// One real value per grid node.
#[derive(Clone, Debug)]
pub struct Field {
    grid: Arc<UniformGrid>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Arc<UniformGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(SolverError::InvalidConfig(format!(
                "field length {} does not match grid size {}",
                values.len(),
                grid.num_nodes()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::InvalidConfig(
                "field values must be finite".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<UniformGrid>, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.num_nodes());
        let mut x = vec![0.0; grid.dim()];
        for i in 0..grid.num_nodes() {
            grid.coords_into(i, &mut x);
            values.push(f(&x));
        }
        Self::new(grid, values)
    }

    pub fn constant(grid: Arc<UniformGrid>, c: f64) -> Result<Self> {
        let n = grid.num_nodes();
        Self::new(grid, vec![c; n])
    }

    pub fn grid(&self) -> &Arc<UniformGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Where an arbitrary lattice point lands after applying the boundary rules.
#[derive(Clone, Debug, PartialEq)]
pub enum ResolvedPoint {
    /// A grid node (possibly after Neumann mirroring), by flat index.
    Interior(usize),
    /// A point outside the grid across exterior-extension faces; carries the
    /// exact coordinates (mirrored on any Neumann axes).
    Exterior(Vec<f64>),
}

/// Resolve a signed lattice multi-index through the boundary rules: Neumann
/// faces mirror, exterior-extension faces report the exact outside point, and
/// equation-on-boundary faces refuse outside references.
pub fn resolve_lattice(
    grid: &UniformGrid,
    bc: &BoundaryConditions,
    idx: &[i64],
) -> Result<ResolvedPoint> {
    let mut folded = idx.to_vec();
    let mut exterior = false;
    for axis in 0..grid.dim() {
        let n = grid.counts()[axis] as i64;
        loop {
            let i = folded[axis];
            if i >= 0 && i < n {
                break;
            }
            let side = if i < 0 { 0 } else { 1 };
            match bc.rule(axis, side) {
                FaceRule::HomogeneousNeumann => {
                    // Mirror across the face node.
                    folded[axis] = if i < 0 { -i } else { 2 * (n - 1) - i };
                }
                FaceRule::ExteriorExtension => {
                    exterior = true;
                    break;
                }
                FaceRule::EquationOnBoundary => {
                    return Err(SolverError::MissingNeighbor { node: 0, axis });
                }
            }
        }
    }
    if exterior {
        return Ok(ResolvedPoint::Exterior(grid.lattice_coords(&folded)));
    }
    let mut flat = 0usize;
    for axis in 0..grid.dim() {
        flat += folded[axis] as usize * grid.strides()[axis];
    }
    Ok(ResolvedPoint::Interior(flat))
}

/// Value of a field at an arbitrary lattice point (possibly outside the grid),
/// resolved through the boundary rules at time `t`.
pub fn lattice_value(
    field: &Field,
    bc: &BoundaryConditions,
    t: f64,
    idx: &[i64],
) -> Result<f64> {
    match resolve_lattice(field.grid(), bc, idx)? {
        ResolvedPoint::Interior(flat) => Ok(field.values()[flat]),
        ResolvedPoint::Exterior(point) => {
            let f = bc
                .exterior
                .as_ref()
                .expect("validated boundary conditions carry an exterior function");
            Ok(f(t, &point))
        }
    }
}

/// Forward difference `(u(x + h e_axis) - u(x)) / h`.
pub fn diff_forward(
    field: &Field,
    bc: &BoundaryConditions,
    t: f64,
    node: usize,
    axis: usize,
) -> Result<f64> {
    let grid = field.grid();
    let mut multi: Vec<i64> = grid.multi(node).iter().map(|&i| i as i64).collect();
    multi[axis] += 1;
    let up = lattice_value(field, bc, t, &multi)?;
    Ok((up - field.values()[node]) / grid.spacing()[axis])
}

/// Backward difference `(u(x) - u(x - h e_axis)) / h`.
pub fn diff_backward(
    field: &Field,
    bc: &BoundaryConditions,
    t: f64,
    node: usize,
    axis: usize,
) -> Result<f64> {
    let grid = field.grid();
    let mut multi: Vec<i64> = grid.multi(node).iter().map(|&i| i as i64).collect();
    multi[axis] -= 1;
    let down = lattice_value(field, bc, t, &multi)?;
    Ok((field.values()[node] - down) / grid.spacing()[axis])
}

/// Central difference vector `((u(x + h e_l) - u(x - h e_l)) / (2 h))_l`.
pub fn central_diff_vector(
    field: &Field,
    bc: &BoundaryConditions,
    t: f64,
    node: usize,
) -> Result<Vec<f64>> {
    let grid = field.grid();
    let mut out = Vec::with_capacity(grid.dim());
    for axis in 0..grid.dim() {
        let f = diff_forward(field, bc, t, node, axis)?;
        let b = diff_backward(field, bc, t, node, axis)?;
        out.push(0.5 * (f + b));
    }
    Ok(out)
}

/// A field materialized on an enlarged lattice, with every exterior value
/// already resolved through the boundary rules. Nonlocal stencils and
/// difference operators read from this array in hot loops.
pub struct ExtendedField {
    data: Vec<f64>,
    pad_lo: Vec<usize>,
    ext_counts: Vec<usize>,
    ext_strides: Vec<usize>,
    grid_strides: Vec<usize>,
    dim: usize,
    /// Offset such that `base(node) = node mapped into the extended layout`.
    base_of_origin: usize,
}

impl ExtendedField {
    /// Materialize `field` with `pad_lo[axis]` extra layers below and
    /// `pad_hi[axis]` above each axis. Padding across an equation-on-boundary
    /// face must be zero.
    pub fn build(
        field: &Field,
        bc: &BoundaryConditions,
        t: f64,
        pad_lo: &[usize],
        pad_hi: &[usize],
    ) -> Result<Self> {
        let grid = field.grid();
        let dim = grid.dim();
        for axis in 0..dim {
            if pad_lo[axis] > 0 && bc.rule(axis, 0) == FaceRule::EquationOnBoundary {
                return Err(SolverError::MissingNeighbor { node: 0, axis });
            }
            if pad_hi[axis] > 0 && bc.rule(axis, 1) == FaceRule::EquationOnBoundary {
                return Err(SolverError::MissingNeighbor { node: 0, axis });
            }
        }
        let ext_counts: Vec<usize> = (0..dim)
            .map(|a| grid.counts()[a] + pad_lo[a] + pad_hi[a])
            .collect();
        let mut ext_strides = vec![1usize; dim];
        for axis in (0..dim.saturating_sub(1)).rev() {
            ext_strides[axis] = ext_strides[axis + 1] * ext_counts[axis + 1];
        }
        let total: usize = ext_counts.iter().product();
        let mut data = vec![0.0; total];
        let mut multi = vec![0usize; dim];
        let mut lattice = vec![0i64; dim];
        for ext_flat in 0..total {
            let mut rem = ext_flat;
            let mut interior = true;
            for axis in 0..dim {
                multi[axis] = rem / ext_strides[axis];
                rem %= ext_strides[axis];
                let i = multi[axis] as i64 - pad_lo[axis] as i64;
                lattice[axis] = i;
                if i < 0 || i >= grid.counts()[axis] as i64 {
                    interior = false;
                }
            }
            data[ext_flat] = if interior {
                let mut flat = 0usize;
                for axis in 0..dim {
                    flat += lattice[axis] as usize * grid.strides()[axis];
                }
                field.values()[flat]
            } else {
                lattice_value(field, bc, t, &lattice)?
            };
        }
        let base_of_origin: usize = (0..dim).map(|a| pad_lo[a] * ext_strides[a]).sum();
        Ok(Self {
            data,
            pad_lo: pad_lo.to_vec(),
            ext_counts,
            ext_strides,
            grid_strides: grid.strides().to_vec(),
            dim,
            base_of_origin,
        })
    }

    /// Extended-layout index of a grid node.
    #[inline]
    pub fn base(&self, node: usize) -> usize {
        let mut rem = node;
        let mut out = self.base_of_origin;
        for axis in 0..self.dim {
            let i = rem / self.grid_strides[axis];
            rem %= self.grid_strides[axis];
            out += i * self.ext_strides[axis];
        }
        out
    }

    /// Value at `base(node)` shifted by a signed per-axis offset.
    #[inline]
    pub fn get_shifted(&self, base: usize, shift: &[i32]) -> f64 {
        let mut idx = base as isize;
        for axis in 0..self.dim {
            idx += shift[axis] as isize * self.ext_strides[axis] as isize;
        }
        self.data[idx as usize]
    }

    /// Value at a base index shifted along one axis only.
    #[inline]
    pub fn get_axis_shifted(&self, base: usize, axis: usize, shift: i32) -> f64 {
        let idx = base as isize + shift as isize * self.ext_strides[axis] as isize;
        self.data[idx as usize]
    }

    #[inline]
    pub fn get(&self, base: usize) -> f64 {
        self.data[base]
    }

    pub fn ext_strides(&self) -> &[usize] {
        &self.ext_strides
    }

    /// Raw extended-layout values, for flat-offset bulk application.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pad_lo(&self) -> &[usize] {
        &self.pad_lo
    }

    pub fn ext_counts(&self) -> &[usize] {
        &self.ext_counts
    }
}

/// Uniform partition of `[0, T]` into `steps` intervals of length `T / steps`.
#[derive(Clone, Copy, Debug)]
pub struct TimePartition {
    horizon: f64,
    steps: usize,
}

impl TimePartition {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(SolverError::InvalidConfig(
                "time partition needs a positive horizon and at least one step".into(),
            ));
        }
        Ok(Self { horizon, steps })
    }

    /// Partition whose step does not exceed `dt_target`, rounding the step
    /// count up so that `steps * dt == horizon` holds exactly.
    pub fn from_target_dt(horizon: f64, dt_target: f64) -> Result<Self> {
        if !(dt_target > 0.0) {
            return Err(SolverError::InvalidConfig(
                "target time step must be positive".into(),
            ));
        }
        let steps = (horizon / dt_target - 1e-9).ceil().max(1.0) as usize;
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        self.horizon * n as f64 / self.steps as f64
    }
}
