//! Sparse linear algebra for the Newton systems of policy iteration.
//!
//! The systems are strictly diagonally dominant M-matrices (unit row sums plus
//! a positive monotonicity margin), so two solvers cover every case:
//!
//! * a Thomas sweep for tridiagonal systems (one-dimensional grids with
//!   nearest-neighbor stencils), exact up to rounding,
//! * forward Gauss-Seidel for general sparse systems, iterated until the
//!   residual meets the contract below.
//!
//! Both paths enforce `|A x - b|_inf < RESIDUAL_CONTRACT * |b|_inf` and fail
//! loudly instead of returning an inaccurate solution.

use crate::error::{Result, SolverError};

/// Relative residual every solve must reach (sup norm, relative to the
/// right-hand side).
pub const RESIDUAL_CONTRACT: f64 = 1e-13;

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Tridiagonal matrix stored as three diagonals: `sub[i] = A[i][i-1]`,
/// `diag[i] = A[i][i]`, `sup[i] = A[i][i+1]` (with `sub[0]` and `sup[n-1]`
/// unused and kept at zero).
#[derive(Clone, Debug)]
pub struct Tridiag {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiag {
    pub fn zeros(n: usize) -> Self {
        Self {
            sub: vec![0.0; n],
            diag: vec![0.0; n],
            sup: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut s = self.diag[i] * x[i];
            if i > 0 {
                s += self.sub[i] * x[i - 1];
            }
            if i + 1 < n {
                s += self.sup[i] * x[i + 1];
            }
            out[i] = s;
        }
    }

    /// Solve `A x = b` by the Thomas sweep, then verify the residual contract
    /// with one step of iterative refinement if needed.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.sweep(rhs)?;
        let bound = RESIDUAL_CONTRACT * sup_norm(rhs).max(f64::MIN_POSITIVE);
        let mut res = vec![0.0; self.len()];
        self.mul_vec(&x, &mut res);
        for (r, b) in res.iter_mut().zip(rhs) {
            *r = b - *r;
        }
        if sup_norm(&res) <= bound {
            return Ok(x);
        }
        let corr = self.sweep(&res)?;
        for (xi, ci) in x.iter_mut().zip(&corr) {
            *xi += ci;
        }
        self.mul_vec(&x, &mut res);
        for (r, b) in res.iter_mut().zip(rhs) {
            *r = b - *r;
        }
        if sup_norm(&res) <= bound {
            Ok(x)
        } else {
            Err(SolverError::LinearSolve(format!(
                "tridiagonal residual {:.3e} exceeds contract {:.3e}",
                sup_norm(&res),
                bound
            )))
        }
    }

    fn sweep(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if rhs.len() != n {
            return Err(SolverError::LinearSolve(
                "right-hand side length mismatch".into(),
            ));
        }
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut denom = self.diag[0];
        if denom == 0.0 {
            return Err(SolverError::LinearSolve("zero pivot at row 0".into()));
        }
        c[0] = self.sup[0] / denom;
        d[0] = rhs[0] / denom;
        for i in 1..n {
            denom = self.diag[i] - self.sub[i] * c[i - 1];
            if denom == 0.0 {
                return Err(SolverError::LinearSolve(format!("zero pivot at row {i}")));
            }
            if i + 1 < n {
                c[i] = self.sup[i] / denom;
            }
            d[i] = (rhs[i] - self.sub[i] * d[i - 1]) / denom;
        }
        let mut x = d;
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        Ok(x)
    }
}

/// Compressed sparse row matrix with entries sorted by column within each row.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    diag_pos: Vec<usize>,
}

impl CsrMatrix {
    /// Build from per-row entry lists. Entries in one row are sorted by column
    /// and duplicates are summed. Every row must end up with a nonzero
    /// diagonal entry.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        let mut diag_pos = Vec::with_capacity(n);
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            let mut dp = usize::MAX;
            for (c, v) in row {
                if c >= n {
                    return Err(SolverError::LinearSolve(format!(
                        "column {c} out of range in row {i}"
                    )));
                }
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    vals.push(v);
                }
                if c == i {
                    dp = vals.len() - 1;
                }
            }
            if dp == usize::MAX || vals[dp] == 0.0 {
                return Err(SolverError::LinearSolve(format!(
                    "row {i} is missing a nonzero diagonal entry"
                )));
            }
            diag_pos.push(dp);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            vals,
            diag_pos,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.vals[lo..hi])
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.vals[self.diag_pos[i]]
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let mut s = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                s += v * x[*c];
            }
            out[i] = s;
        }
    }

    pub fn residual_sup(&self, x: &[f64], rhs: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let mut s = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                s += v * x[*c];
            }
            worst = worst.max((rhs[i] - s).abs());
        }
        worst
    }

    /// True when every off-diagonal entry sits in column `i - 1` or `i + 1`.
    pub fn is_tridiagonal(&self) -> bool {
        for i in 0..self.n {
            let (cols, _) = self.row(i);
            for &c in cols {
                if c != i && c + 1 != i && c != i + 1 {
                    return false;
                }
            }
        }
        true
    }

    pub fn to_tridiag(&self) -> Result<Tridiag> {
        if !self.is_tridiagonal() {
            return Err(SolverError::LinearSolve(
                "matrix is not tridiagonal".into(),
            ));
        }
        let mut t = Tridiag::zeros(self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if c + 1 == i {
                    t.sub[i] = v;
                } else if c == i {
                    t.diag[i] = v;
                } else {
                    t.sup[i] = v;
                }
            }
        }
        Ok(t)
    }

    /// Forward Gauss-Seidel until the residual contract holds. Converges for
    /// the strictly diagonally dominant systems assembled by the scheme; the
    /// sweep limit exists to fail loudly on anything else.
    pub fn gauss_seidel(
        &self,
        rhs: &[f64],
        x0: Option<&[f64]>,
        max_sweeps: usize,
    ) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(SolverError::LinearSolve(
                "right-hand side length mismatch".into(),
            ));
        }
        let mut x = match x0 {
            Some(x0) => x0.to_vec(),
            None => vec![0.0; self.n],
        };
        let bound = RESIDUAL_CONTRACT * sup_norm(rhs).max(f64::MIN_POSITIVE);
        for _ in 0..max_sweeps {
            for i in 0..self.n {
                let (cols, vals) = self.row(i);
                let mut s = rhs[i];
                let mut d = 0.0;
                for (&c, &v) in cols.iter().zip(vals) {
                    if c == i {
                        d = v;
                    } else {
                        s -= v * x[c];
                    }
                }
                x[i] = s / d;
            }
            if self.residual_sup(&x, rhs) <= bound {
                return Ok(x);
            }
        }
        Err(SolverError::LinearSolve(format!(
            "Gauss-Seidel residual {:.3e} above contract {:.3e} after {max_sweeps} sweeps",
            self.residual_sup(&x, rhs),
            bound
        )))
    }
}
