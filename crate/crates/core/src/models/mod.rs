//! Ready-made experiment bundles: concrete market models packaged as
//! drivers, jump kernels, obstacles, boundary rules and control grids that
//! plug straight into the scheme.
//!
//! Two models ship with the library. [`InvestmentAmbiguity`] prices an
//! optimal-investment-and-stopping problem on a one-dimensional wealth
//! domain where the discount rate, the market drift and the jump intensity
//! are all ambiguous; its worst- and best-case value functions solve
//! obstacle problems with a piecewise-linear discounting nonlinearity.
//! [`EpsteinZin`] solves a consumption-portfolio allocation problem under
//! recursive utility on a wealth-volatility rectangle; its driver is
//! non-Lipschitz but monotone in the utility argument.

mod ambiguity;
mod epstein_zin;

pub use ambiguity::{AmbiguityDriver, AmbiguityScenario, InvestmentAmbiguity};
pub use epstein_zin::{EpsteinZin, EpsteinZinDriver};

use crate::error::{Result, SolverError};
use crate::grid::UniformGrid;

/// FNV-1a over a tag and the bit patterns of the model parameters; keys the
/// on-disk stencil cache, so it must be stable across runs and processes.
pub(crate) fn param_hash(tag: &str, values: &[f64]) -> u64 {
    let mut state: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |byte: u8| {
        state ^= byte as u64;
        state = state.wrapping_mul(0x100_0000_01b3);
    };
    for b in tag.bytes() {
        eat(b);
    }
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            eat(b);
        }
    }
    state
}

/// Flat index of the grid node sitting at `point`, required to lie on the
/// lattice (within a tiny rounding slack proportional to the spacing).
pub(crate) fn node_index_at(grid: &UniformGrid, point: &[f64]) -> Result<usize> {
    if point.len() != grid.dim() {
        return Err(SolverError::InvalidConfig(format!(
            "evaluation point has dimension {}, grid has {}",
            point.len(),
            grid.dim()
        )));
    }
    let mut flat = 0usize;
    for axis in 0..grid.dim() {
        let h = grid.spacing()[axis];
        let rel = (point[axis] - grid.lo()[axis]) / h;
        let idx = rel.round();
        if (rel - idx).abs() > 1e-9 || idx < 0.0 || idx as usize >= grid.counts()[axis] {
            return Err(SolverError::InvalidConfig(format!(
                "evaluation point {point:?} is not a lattice node of the grid"
            )));
        }
        flat += idx as usize * grid.strides()[axis];
    }
    Ok(flat)
}
