//! Penalty-based monotone solver for nonlocal Hamilton-Jacobi-Bellman
//! variational inequalities with drivers that may depend on the solution,
//! its gradient and a nonlocal jump term.
//!
//! The obstacle constraint is replaced by a penalty term, the spatial operator
//! by a monotone finite-difference or semi-Lagrangian discretization with a
//! truncated jump quadrature, and each semi-implicit time step is solved by
//! policy iteration with a semismooth Newton inner solve.

pub mod driver;
pub mod error;
pub mod free_boundary;
pub mod grid;
pub mod levy;
pub mod linalg;
pub mod local_op;
pub mod models;
pub mod oracle;
pub mod policy;
pub mod scheme;
pub mod stencil_cache;

pub use error::{Result, SolverError};
