//! Compressed sparse rows and the linear solvers used by every PDE solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed in
    /// insertion order so the result is independent of scheduling.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            debug_assert!(r < nrows && c < ncols);
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.nrows) {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|r| self.get(r, r)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    /// Lower and upper bandwidth.
    pub fn bandwidth(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0, 0);
        for r in 0..self.nrows {
            for (c, _) in self.row(r) {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMethod {
    /// Banded LU without pivoting; bordered dense LU when a gauge is imposed
    /// (conjugate gradients past [`DENSE_GAUGE_LIMIT`] unknowns).
    Direct,
    Cg,
    Bicgstab,
}

impl SolveMethod {
    fn name(self) -> &'static str {
        match self {
            SolveMethod::Direct => "direct",
            SolveMethod::Cg => "cg",
            SolveMethod::Bicgstab => "bicgstab",
        }
    }
}

/// Largest gauged system solved by dense bordered LU.
pub const DENSE_GAUGE_LIMIT: usize = 600;

/// Side condition fixing the null space of a singular operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gauge {
    None,
    /// Solution has zero nodal mean; imposed by a Lagrange multiplier row.
    ZeroMean,
}

#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub gauge: Gauge,
}

/// One-shot solve. Iterative methods stop once `||A x - b||_2 <= tol ||b||_2`.
pub fn solve_linear(sys: &SparseSystem, method: SolveMethod, tol: f64) -> Result<Vec<f64>> {
    LinearSolver::new(&sys.matrix, sys.gauge, method, tol)?.solve(&sys.rhs)
}

/// A matrix prepared for repeated solves with different right-hand sides.
#[derive(Debug)]
pub struct LinearSolver {
    inner: Inner,
    gauge: Gauge,
    tol: f64,
    n: usize,
}

#[derive(Debug)]
enum Inner {
    Banded(BandedLu),
    Bordered(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
    Iterative { matrix: CsrMatrix, inv_diag: Vec<f64>, shift: f64, method: SolveMethod },
}

impl LinearSolver {
    pub fn new(matrix: &CsrMatrix, gauge: Gauge, method: SolveMethod, tol: f64) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::Domain("linear solve needs a square matrix".into()));
        }
        let inner = match (method, gauge) {
            (SolveMethod::Direct, Gauge::None) => Inner::Banded(BandedLu::factor(matrix)?),
            (SolveMethod::Direct, Gauge::ZeroMean) if n <= DENSE_GAUGE_LIMIT => {
                let mut dense = DMatrix::zeros(n + 1, n + 1);
                for r in 0..n {
                    for (c, v) in matrix.row(r) {
                        dense[(r, c)] = v;
                    }
                    dense[(r, n)] = 1.0;
                    dense[(n, r)] = 1.0;
                }
                Inner::Bordered(dense.lu())
            }
            (m, _) => {
                let m = if m == SolveMethod::Direct { SolveMethod::Cg } else { m };
                let diag = matrix.diagonal();
                if diag.iter().any(|&d| d == 0.0) {
                    return Err(Error::Singular("zero diagonal entry; Jacobi preconditioner undefined".into()));
                }
                let shift = match gauge {
                    Gauge::ZeroMean => diag.iter().sum::<f64>() / n as f64,
                    Gauge::None => 0.0,
                };
                Inner::Iterative {
                    matrix: matrix.clone(),
                    inv_diag: diag.iter().map(|d| 1.0 / (d + shift / n as f64)).collect(),
                    shift,
                    method: m,
                }
            }
        };
        Ok(LinearSolver { inner, gauge, tol, n })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(rhs.len(), self.n, "right-hand side length mismatch");
        match &self.inner {
            Inner::Banded(lu) => lu.solve(rhs),
            Inner::Bordered(lu) => {
                let mut b = DVector::zeros(self.n + 1);
                b.rows_mut(0, self.n).copy_from_slice(rhs);
                let x = lu
                    .solve(&b)
                    .ok_or_else(|| Error::Singular("bordered gauge system is singular".into()))?;
                Ok(x.as_slice()[..self.n].to_vec())
            }
            Inner::Iterative { matrix, inv_diag, shift, method } => {
                let mut b = rhs.to_vec();
                if self.gauge == Gauge::ZeroMean {
                    remove_mean(&mut b);
                }
                let apply = |x: &[f64], y: &mut [f64]| {
                    matrix.matvec(x, y);
                    if *shift != 0.0 {
                        let m = shift * x.iter().sum::<f64>() / x.len() as f64;
                        y.iter_mut().for_each(|v| *v += m);
                    }
                };
                let mut x = match method {
                    SolveMethod::Cg => pcg(apply, inv_diag, &b, self.tol)?,
                    _ => bicgstab(apply, inv_diag, &b, self.tol)?,
                };
                if self.gauge == Gauge::ZeroMean {
                    remove_mean(&mut x);
                }
                Ok(x)
            }
        }
    }
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_iterations(n: usize) -> usize {
    (10 * n).clamp(1000, 50_000)
}

fn pcg(apply: impl Fn(&[f64], &mut [f64]), inv_diag: &[f64], b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    for _ in 0..max_iterations(n) {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            history.push(norm(&r) / bnorm);
            return Err(Error::Solver { method: SolveMethod::Cg.name(), iterations: history.len(), residual_history: history });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = norm(&r) / bnorm;
        history.push(rel);
        if rel <= tol {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solver { method: SolveMethod::Cg.name(), iterations: history.len(), residual_history: history })
}

fn bicgstab(apply: impl Fn(&[f64], &mut [f64]), inv_diag: &[f64], b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut history = Vec::new();
    let fail = |history: Vec<f64>| Error::Solver {
        method: SolveMethod::Bicgstab.name(),
        iterations: history.len(),
        residual_history: history,
    };
    for _ in 0..max_iterations(n) {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(fail(history));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * inv_diag[i];
        }
        apply(&y, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            return Err(fail(history));
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / bnorm <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(x);
        }
        for i in 0..n {
            z[i] = s[i] * inv_diag[i];
        }
        apply(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        let rel = norm(&r) / bnorm;
        history.push(rel);
        if rel <= tol {
            return Ok(x);
        }
    }
    Err(fail(history))
}

/// Banded LU factorization without pivoting.
///
/// Used for the Dirichlet operators, whose symmetric part is positive definite
/// once boundary couplings are eliminated, so every leading minor is
/// non-singular.
#[derive(Debug, Clone)]
struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    band: Vec<f64>,
}

impl BandedLu {
    fn width(&self) -> usize {
        self.kl + self.ku + 1
    }

    fn at(&self, r: usize, c: usize) -> usize {
        r * self.width() + (c + self.kl - r)
    }

    fn factor(m: &CsrMatrix) -> Result<Self> {
        let n = m.nrows();
        let (kl, ku) = m.bandwidth();
        let mut lu = BandedLu { n, kl, ku, band: vec![0.0; n * (kl + ku + 1)] };
        for r in 0..n {
            for (c, v) in m.row(r) {
                let idx = lu.at(r, c);
                lu.band[idx] = v;
            }
        }
        let scale = lu.band.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let pivot = lu.band[lu.at(k, k)];
            if pivot.abs() <= 1e-14 * scale {
                return Err(Error::Singular(format!("zero pivot in banded LU at row {k}")));
            }
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ku).min(n - 1);
            for r in k + 1..=last_row {
                let ir = lu.at(r, k);
                let l = lu.band[ir] / pivot;
                if l == 0.0 {
                    continue;
                }
                lu.band[ir] = l;
                for c in k + 1..=last_col {
                    let src = lu.band[lu.at(k, c)];
                    let dst = lu.at(r, c);
                    lu.band[dst] -= l * src;
                }
            }
        }
        Ok(lu)
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let mut x = rhs.to_vec();
        for r in 0..n {
            let start = r.saturating_sub(self.kl);
            let mut acc = x[r];
            for c in start..r {
                acc -= self.band[self.at(r, c)] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let end = (r + self.ku).min(n - 1);
            let mut acc = x[r];
            for c in r + 1..=end {
                acc -= self.band[self.at(r, c)] * x[c];
            }
            x[r] = acc / self.band[self.at(r, r)];
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, t)
    }

    #[test]
    fn triplets_are_summed() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, 2.0), (0, 0, 0.5)]);
        assert_eq!(m.get(0, 0), 1.5);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn identity_returns_rhs() {
        let b = vec![1.0, -2.0, 3.5, 0.25];
        for method in [SolveMethod::Direct, SolveMethod::Cg, SolveMethod::Bicgstab] {
            let sys = SparseSystem { matrix: CsrMatrix::identity(4), rhs: b.clone(), gauge: Gauge::None };
            assert_eq!(solve_linear(&sys, method, 1e-14).unwrap(), b);
        }
    }

    #[test]
    fn methods_agree_with_dense_lu() {
        let n = 40;
        let a = laplacian_1d(n);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let dense = a.to_dense().lu().solve(&DVector::from_vec(b.clone())).unwrap();
        for method in [SolveMethod::Direct, SolveMethod::Cg, SolveMethod::Bicgstab] {
            let sys = SparseSystem { matrix: a.clone(), rhs: b.clone(), gauge: Gauge::None };
            let x = solve_linear(&sys, method, 1e-13).unwrap();
            let err = x.iter().zip(dense.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{method:?}: {err}");
        }
    }

    #[test]
    fn non_convergence_reports_history() {
        let mut t = Vec::new();
        for i in 0..3 {
            t.push((i, i, 1.0));
        }
        t.push((0, 1, 5.0));
        t.push((1, 0, 5.0));
        let a = CsrMatrix::from_triplets(3, 3, t);
        let sys = SparseSystem { matrix: a, rhs: vec![1.0, 0.0, 1.0], gauge: Gauge::None };
        match solve_linear(&sys, SolveMethod::Cg, 1e-14) {
            Err(Error::Solver { residual_history, .. }) => assert!(!residual_history.is_empty()),
            other => panic!("expected solver error, got {other:?}"),
        }
    }

    #[test]
    fn banded_detects_zero_pivot() {
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]);
        assert!(matches!(BandedLu::factor(&a), Err(Error::Singular(_))));
    }
}
