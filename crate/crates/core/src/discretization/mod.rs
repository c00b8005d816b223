//! Uniform grids, finite-volume stencils and linear solvers shared by the
//! fine-scale, cell and upscaled solvers.

mod field;
mod grid;
mod ops;
mod sparse;

pub use field::Field;
pub use grid::{CellGrid, Grid, MacroGrid};
pub use ops::{
    apply_operator, assemble_div_flux, assemble_operator, fd_gradient, integrate_field, FluxCoefficients, Norm,
};
pub use sparse::{solve_linear, CsrMatrix, Gauge, LinearSolver, SolveMethod, SparseSystem, DENSE_GAUGE_LIMIT};
