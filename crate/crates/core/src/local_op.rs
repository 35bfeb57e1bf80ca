//! Monotone discretizations of the local (diffusion plus drift) part of the
//! generator.
//!
//! Two interchangeable backends produce a [`LocalStencil`], a positive-weight
//! difference stencil `A u |_i ~ sum_j c_j (u_j - u_i)` with `c_j >= 0`:
//!
//! * [`build_upwind`] uses central second differences for the diagonal of the
//!   diffusion matrix, a sign-split seven-point arrangement for off-diagonal
//!   terms (requiring row-wise diagonal dominance of `sigma sigma^T`), and
//!   one-sided first differences for the drift, taken from the inflow side.
//! * [`build_semilagrangian`] traces the characteristic feet
//!   `x +/- sqrt(d dt) sigma^(w)` and `x + dt b` and interpolates the field
//!   there multilinearly, which stays monotone for any diffusion matrix.
//!
//! Feet that leave the computational box are clamped back onto the nearest
//! face when that face is reflecting (homogeneous Neumann) or carries the
//! equation itself; across exterior-extension faces the stencil records the
//! outside point verbatim so its value can be taken from the prescribed
//! extension. The upwind builder is stricter: a leg crossing an
//! equation-on-boundary face has no value to read and is reported as a
//! missing neighbor.
//!
//! [`assemble_implicit`] turns one stencil per node into the rows of the
//! backward-Euler matrix `I - dt A`, routing the mass on outside points into
//! an explicit right-hand-side vector.

use crate::error::{Result, SolverError};
use crate::grid::{resolve_lattice, BoundaryConditions, FaceRule, ResolvedPoint, UniformGrid};

/// Fractional cell positions this close to a lattice node are snapped onto
/// it, so feet that land on a node analytically yield a single-point stencil.
const FOOT_SNAP: f64 = 1e-9;

/// Positive-weight difference stencil for the local generator at one node.
///
/// The diagonal coefficient is implied: applying the stencil computes
/// `sum_j c_j (u_j - u_i)`, so the matrix row has `-sum_j c_j` on the
/// diagonal. Legs that fold back onto the center node are dropped (their
/// difference vanishes). The struct owns scratch buffers so the `_into`
/// builders run without allocating in steady state.
#[derive(Clone, Debug, Default)]
pub struct LocalStencil {
    nodes: Vec<(usize, f64)>,
    outside: Vec<(Vec<f64>, f64)>,
    // Scratch reused across builds.
    multi: Vec<usize>,
    lat: Vec<i64>,
    base: Vec<i64>,
    mat: Vec<f64>,
    pos: Vec<f64>,
    foot: Vec<f64>,
    frac: Vec<f64>,
}

impl LocalStencil {
    pub fn new() -> Self {
        Self::default()
    }

    /// In-grid legs as `(flat node index, coefficient)` pairs.
    pub fn nodes(&self) -> &[(usize, f64)] {
        &self.nodes
    }

    /// Legs on points outside the grid, as `(coordinates, coefficient)`.
    pub fn outside(&self) -> &[(Vec<f64>, f64)] {
        &self.outside
    }

    /// Sum of all leg coefficients (the negated diagonal of the matrix row).
    pub fn coeff_sum(&self) -> f64 {
        let interior: f64 = self.nodes.iter().map(|&(_, c)| c).sum();
        let ext: f64 = self.outside.iter().map(|(_, c)| c).sum();
        interior + ext
    }

    /// Apply the stencil to a field: `sum_j c_j (u_j - u_center)`, with
    /// outside legs valued through `ext`.
    pub fn apply(&self, u: &[f64], u_center: f64, ext: impl Fn(&[f64]) -> f64) -> f64 {
        let mut acc = 0.0;
        for &(j, c) in &self.nodes {
            acc += c * (u[j] - u_center);
        }
        for (p, c) in &self.outside {
            acc += c * (ext(p) - u_center);
        }
        acc
    }

    /// Apply a stencil whose legs all sit on grid nodes. Debug builds check
    /// that assumption.
    pub fn apply_interior(&self, u: &[f64], u_center: f64) -> f64 {
        debug_assert!(self.outside.is_empty(), "stencil has outside legs");
        let mut acc = 0.0;
        for &(j, c) in &self.nodes {
            acc += c * (u[j] - u_center);
        }
        acc
    }

    fn clear(&mut self) {
        self.nodes.clear();
        self.outside.clear();
    }

    fn push_node(&mut self, j: usize, c: f64) {
        if c == 0.0 {
            return;
        }
        for entry in &mut self.nodes {
            if entry.0 == j {
                entry.1 += c;
                return;
            }
        }
        self.nodes.push((j, c));
    }

    fn push_outside(&mut self, point: Vec<f64>, c: f64) {
        if c == 0.0 {
            return;
        }
        for entry in &mut self.outside {
            if entry.0 == point {
                entry.1 += c;
                return;
            }
        }
        self.outside.push((point, c));
    }

    /// Route one leg through the boundary rules and merge it in, skipping
    /// legs that fold back onto the center.
    fn push_lattice(
        &mut self,
        grid: &UniformGrid,
        bc: &BoundaryConditions,
        node: usize,
        c: f64,
    ) -> Result<()> {
        if c == 0.0 {
            return Ok(());
        }
        let lat = std::mem::take(&mut self.lat);
        let resolved = resolve_lattice(grid, bc, &lat).map_err(|e| match e {
            SolverError::MissingNeighbor { axis, .. } => SolverError::MissingNeighbor { node, axis },
            other => other,
        });
        self.lat = lat;
        match resolved? {
            ResolvedPoint::Interior(flat) => {
                if flat != node {
                    self.push_node(flat, c);
                }
            }
            ResolvedPoint::Exterior(point) => self.push_outside(point, c),
        }
        Ok(())
    }
}

/// Upwind finite-difference stencil for `1/2 tr(sigma sigma^T D^2 u) + b . D u`
/// at `node`. `sigma` is the d-by-d (row-major) diffusion factor and `drift`
/// the d-vector b, both already including any jump compensation.
///
/// Fails with [`SolverError::Unsupported`] when `sigma sigma^T` is not
/// row-wise diagonally dominant in grid units (the sign-split cross stencil
/// would lose positivity), and with [`SolverError::MissingNeighbor`] when a
/// leg crosses an equation-on-boundary face.
pub fn build_upwind(
    grid: &UniformGrid,
    bc: &BoundaryConditions,
    node: usize,
    sigma: &[f64],
    drift: &[f64],
) -> Result<LocalStencil> {
    let mut out = LocalStencil::new();
    build_upwind_into(&mut out, grid, bc, node, sigma, drift)?;
    Ok(out)
}

/// Allocation-free variant of [`build_upwind`] reusing `out`'s buffers.
pub fn build_upwind_into(
    out: &mut LocalStencil,
    grid: &UniformGrid,
    bc: &BoundaryConditions,
    node: usize,
    sigma: &[f64],
    drift: &[f64],
) -> Result<()> {
    let d = grid.dim();
    debug_assert_eq!(sigma.len(), d * d);
    debug_assert_eq!(drift.len(), d);
    out.clear();

    // a = sigma sigma^T.
    out.mat.resize(d * d, 0.0);
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for w in 0..d {
                s += sigma[i * d + w] * sigma[j * d + w];
            }
            out.mat[i * d + j] = s;
            out.mat[j * d + i] = s;
        }
    }

    let mut multi = std::mem::take(&mut out.multi);
    multi.resize(d, 0);
    grid.multi_into(node, &mut multi);
    out.lat.resize(d, 0);

    let h = grid.spacing();
    for i in 0..d {
        let mut cross = 0.0;
        for j in 0..d {
            if j != i {
                cross += out.mat[i * d + j].abs() / (2.0 * h[i] * h[j]);
            }
        }
        let diag = out.mat[i * d + i] / (2.0 * h[i] * h[i]);
        let mut axis = diag - cross;
        if axis < 0.0 {
            // Tolerate rounding-level violations, reject structural ones.
            if axis < -1e-12 * (diag + cross).max(1.0) {
                out.multi = multi;
                return Err(SolverError::Unsupported(format!(
                    "diffusion matrix at node {node} is not diagonally dominant \
                     along axis {i}; use the semi-Lagrangian operator"
                )));
            }
            axis = 0.0;
        }
        let bp = drift[i].max(0.0) / h[i];
        let bm = (-drift[i]).max(0.0) / h[i];
        for (step, coeff) in [(1i64, axis + bp), (-1i64, axis + bm)] {
            if coeff == 0.0 {
                continue;
            }
            for l in 0..d {
                out.lat[l] = multi[l] as i64;
            }
            out.lat[i] += step;
            if let Err(e) = out.push_lattice(grid, bc, node, coeff) {
                out.multi = multi;
                return Err(e);
            }
        }
    }

    for i in 0..d {
        for j in (i + 1)..d {
            let aij = out.mat[i * d + j];
            if aij == 0.0 {
                continue;
            }
            let c = aij.abs() / (2.0 * h[i] * h[j]);
            // Positive coupling pairs the (+,+)/(-,-) corners, negative
            // coupling the (+,-)/(-,+) corners.
            let pairs: [(i64, i64); 2] = if aij > 0.0 {
                [(1, 1), (-1, -1)]
            } else {
                [(1, -1), (-1, 1)]
            };
            for (si, sj) in pairs {
                for l in 0..d {
                    out.lat[l] = multi[l] as i64;
                }
                out.lat[i] += si;
                out.lat[j] += sj;
                if let Err(e) = out.push_lattice(grid, bc, node, c) {
                    out.multi = multi;
                    return Err(e);
                }
            }
        }
    }

    out.multi = multi;
    Ok(())
}

/// Semi-Lagrangian stencil for the same generator: for each column
/// `sigma^(w)` the two feet `x +/- sqrt(d dt) sigma^(w)` carry weight
/// `1/(2 d dt)`, and the drift foot `x + dt b` carries weight `1/dt`. Feet
/// are interpolated multilinearly; components leaving the box across
/// reflecting or equation-on-boundary faces are clamped onto the face, while
/// components crossing exterior-extension faces keep their outside position.
pub fn build_semilagrangian(
    grid: &UniformGrid,
    bc: &BoundaryConditions,
    node: usize,
    sigma: &[f64],
    drift: &[f64],
    dt: f64,
) -> Result<LocalStencil> {
    let mut out = LocalStencil::new();
    build_semilagrangian_into(&mut out, grid, bc, node, sigma, drift, dt)?;
    Ok(out)
}

/// Allocation-free variant of [`build_semilagrangian`] reusing `out`'s
/// buffers.
pub fn build_semilagrangian_into(
    out: &mut LocalStencil,
    grid: &UniformGrid,
    bc: &BoundaryConditions,
    node: usize,
    sigma: &[f64],
    drift: &[f64],
    dt: f64,
) -> Result<()> {
    let d = grid.dim();
    debug_assert_eq!(sigma.len(), d * d);
    debug_assert_eq!(drift.len(), d);
    if dt <= 0.0 {
        return Err(SolverError::InvalidConfig(
            "semi-Lagrangian stencil needs a positive time step".into(),
        ));
    }
    if d > 16 {
        return Err(SolverError::InvalidConfig(format!(
            "semi-Lagrangian interpolation supports at most 16 axes, got {d}"
        )));
    }
    out.clear();

    let mut multi = std::mem::take(&mut out.multi);
    multi.resize(d, 0);
    grid.multi_into(node, &mut multi);
    out.pos.resize(d, 0.0);
    out.foot.resize(d, 0.0);
    out.frac.resize(d, 0.0);
    out.base.resize(d, 0);
    out.lat.resize(d, 0);
    for l in 0..d {
        out.pos[l] = grid.lo()[l] + multi[l] as f64 * grid.spacing()[l];
    }

    let spread = (d as f64 * dt).sqrt();
    let diff_coeff = 1.0 / (2.0 * d as f64 * dt);
    let drift_coeff = 1.0 / dt;

    let mut status = Ok(());
    'feet: for foot_id in 0..(2 * d + 1) {
        if foot_id < 2 * d {
            let w = foot_id / 2;
            let sign = if foot_id % 2 == 0 { 1.0 } else { -1.0 };
            let mut moved = false;
            for l in 0..d {
                let delta = sign * spread * sigma[l * d + w];
                out.foot[l] = out.pos[l] + delta;
                moved |= delta != 0.0;
            }
            if !moved {
                continue;
            }
        } else {
            let mut moved = false;
            for l in 0..d {
                let delta = dt * drift[l];
                out.foot[l] = out.pos[l] + delta;
                moved |= delta != 0.0;
            }
            if !moved {
                continue;
            }
        }
        let coeff = if foot_id < 2 * d { diff_coeff } else { drift_coeff };

        // Clamp components that leave through reflecting or
        // equation-on-boundary faces; exterior faces keep the raw position.
        for l in 0..d {
            let (lo, hi) = (grid.lo()[l], grid.hi()[l]);
            if out.foot[l] < lo && bc.rule(l, 0) != FaceRule::ExteriorExtension {
                out.foot[l] = lo;
            } else if out.foot[l] > hi && bc.rule(l, 1) != FaceRule::ExteriorExtension {
                out.foot[l] = hi;
            }
        }

        // Cell-relative position with snapping onto nodes.
        for l in 0..d {
            let s = (out.foot[l] - grid.lo()[l]) / grid.spacing()[l];
            let mut i0 = s.floor();
            let mut th = s - i0;
            if th < FOOT_SNAP {
                th = 0.0;
            } else if th > 1.0 - FOOT_SNAP {
                i0 += 1.0;
                th = 0.0;
            }
            out.base[l] = i0 as i64;
            out.frac[l] = th;
        }

        for mask in 0..(1usize << d) {
            let mut w = coeff;
            for l in 0..d {
                let up = (mask >> l) & 1 == 1;
                w *= if up { out.frac[l] } else { 1.0 - out.frac[l] };
                out.lat[l] = out.base[l] + up as i64;
            }
            if w == 0.0 {
                continue;
            }
            if let Err(e) = out.push_lattice(grid, bc, node, w) {
                status = Err(e);
                break 'feet;
            }
        }
    }

    out.multi = multi;
    status
}

/// Build the rows of the backward-Euler matrix `I - dt A` from one stencil
/// per grid node, returning `(rows, exterior_rhs)`. Row `i` holds
/// `1 + dt * sum_j c_j` on the diagonal and `-dt * c_j` on each in-grid leg;
/// outside legs contribute `dt * c * g(t_next, point)` to `exterior_rhs[i]`,
/// where `g` is the prescribed exterior extension. An empty stencil yields a
/// plain identity row.
pub fn assemble_implicit(
    stencils: &[LocalStencil],
    dt: f64,
    t_next: f64,
    bc: &BoundaryConditions,
) -> Result<(Vec<Vec<(usize, f64)>>, Vec<f64>)> {
    let n = stencils.len();
    let mut rows = Vec::with_capacity(n);
    let mut rhs = vec![0.0; n];
    for (i, st) in stencils.iter().enumerate() {
        let mut row = Vec::with_capacity(st.nodes().len() + 1);
        row.push((i, 1.0 + dt * st.coeff_sum()));
        for &(j, c) in st.nodes() {
            row.push((j, -dt * c));
        }
        if !st.outside().is_empty() {
            let ext = bc.exterior.as_ref().ok_or_else(|| {
                SolverError::InvalidConfig(
                    "stencil references points outside the grid but no exterior \
                     extension is configured"
                        .into(),
                )
            })?;
            for (p, c) in st.outside() {
                rhs[i] += dt * c * ext(t_next, p);
            }
        }
        rows.push(row);
    }
    Ok((rows, rhs))
}
