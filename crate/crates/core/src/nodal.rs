//! Small dense per-node algebra and the elliptic solve shared by the
//! fine-scale and upscaled solvers.

use nalgebra::DMatrix;

use crate::discretization::{assemble_operator, fd_gradient, CsrMatrix, Field, FluxCoefficients, Gauge, Grid, LinearSolver};
use crate::error::Result;
use crate::stepping::SolverOptions;

pub(crate) fn identity_plus(n: usize, scale: f64, a: &[f64]) -> Vec<f64> {
    let mut m: Vec<f64> = a.iter().map(|v| scale * v).collect();
    for i in 0..n {
        m[i * n + i] += 1.0;
    }
    m
}

pub(crate) fn invert(n: usize, a: &[f64]) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(n, n, a);
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if m.determinant().abs() <= 1e-13 * scale.powi(n as i32).max(f64::MIN_POSITIVE) {
        return None;
    }
    let inv = m.try_inverse()?;
    Some(inv.transpose().as_slice().to_vec())
}

pub(crate) fn matvec(n: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        out[i] = (0..n).map(|j| a[i * n + j] * x[j]).sum();
    }
}

pub(crate) fn matmul(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

pub(crate) fn add_csr(a: &CsrMatrix, b: &CsrMatrix) -> CsrMatrix {
    let mut trip = Vec::with_capacity(a.nnz() + b.nnz());
    for m in [a, b] {
        for r in 0..m.nrows() {
            trip.extend(m.row(r).map(|(c, v)| (r, c, v)));
        }
    }
    CsrMatrix::from_triplets(a.nrows(), a.ncols(), trip)
}

/// `R w - div(a grad w + b w) (+ extra)` factored once for repeated right-hand sides.
#[derive(Debug)]
pub(crate) struct EllipticOperator {
    ncomp: usize,
    solver: LinearSolver,
}

impl EllipticOperator {
    pub fn new<G: Grid + ?Sized>(
        grid: &G,
        flux: &FluxCoefficients,
        reaction: &Field,
        extra: Option<&CsrMatrix>,
        opts: &SolverOptions,
    ) -> Result<Self> {
        let mut matrix = assemble_operator(grid, flux, Some(reaction))?;
        if let Some(x) = extra {
            matrix = add_csr(&matrix, x);
        }
        let solver = LinearSolver::new(&matrix, Gauge::None, opts.method, opts.tol)?;
        Ok(EllipticOperator { ncomp: flux.ncomp, solver })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Field> {
        let values = self.solver.solve(rhs)?;
        Ok(Field { ncomp: self.ncomp, values })
    }
}

/// Nodal source `H + K u + J . grad u (+ extra)`, zero on Dirichlet nodes.
///
/// `k` holds `N x N` blocks, `j` holds `d x N x N` blocks `[i][alpha][beta]`.
pub(crate) fn source_rhs<G: Grid + ?Sized>(
    grid: &G,
    h: &Field,
    k: &Field,
    j: &Field,
    u: &Field,
    extra: Option<&Field>,
) -> Vec<f64> {
    let n = u.ncomp;
    let d = grid.dim();
    let grad = fd_gradient(grid, u);
    let mut rhs = vec![0.0; u.values.len()];
    for node in 0..grid.num_nodes() {
        if grid.is_boundary(node) {
            continue;
        }
        let (hk, kk, jk, gk, uk) = (h.node(node), k.node(node), j.node(node), grad.node(node), u.node(node));
        for a in 0..n {
            let mut s = hk[a];
            for b in 0..n {
                s += kk[a * n + b] * uk[b];
                for i in 0..d {
                    s += jk[(i * n + a) * n + b] * gk[b * d + i];
                }
            }
            if let Some(e) = extra {
                s += e.get(node, a);
            }
            rhs[node * n + a] = s;
        }
    }
    rhs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_small_matrix() {
        let a = [2.0, 1.0, 0.0, 3.0];
        let inv = invert(2, &a).unwrap();
        let id = matmul(2, &a, &inv);
        for (i, v) in id.iter().enumerate() {
            let want = if i % 3 == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15);
        }
        assert!(invert(2, &[1.0, 2.0, 2.0, 4.0]).is_none());
    }
}
