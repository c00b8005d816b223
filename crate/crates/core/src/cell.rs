//! Periodic cell problems and effective tensors.
//!
//! For fixed `(t, x)` the correctors solve, with zero mean on the cell,
//!
//! ```text
//! -div_y(E (e_i + grad_y W_i)) = 0,        -div_y(E grad_y delta_ab + D_.ab) = 0,
//! ```
//!
//! and the effective tensors are the cell averages of the corrector fluxes:
//! `E*_ij = <e_i (delta_ij + d_i W_j)>`, `D*_iab = <D_iab + e_i d_i delta_ab>`.
//! The corrector tensors are `dtilde_jab = G_ag d_j delta_gb` and
//! `wtilde_jiab = d_j W_i G_ab`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::coefficients::{CoefficientId, CoefficientSet, TensorField, TxProfile};
use crate::discretization::{
    assemble_div_flux, fd_gradient, CellGrid, Field, FluxCoefficients, Gauge, Grid, LinearSolver, MacroGrid,
};
use crate::error::{Error, Result};
use crate::stepping::SolverOptions;

/// Cell operator `-div_y(E grad_y .)` at one `(t, x)`, factored once for all correctors.
#[derive(Debug)]
pub struct CellProblem {
    pub grid: CellGrid,
    pub size: usize,
    /// `e_i` at the faces, scalar flux layout.
    pub diffusion: FluxCoefficients,
    /// `D_{i alpha beta}` at the faces, layout `[axis][node][alpha][beta]`.
    pub drift: Vec<f64>,
    solver: LinearSolver,
}

impl CellProblem {
    /// Samples `E` and `D` of `set` at `(t, x)` on the faces of `grid`.
    pub fn sample(set: &CoefficientSet, t: f64, x: &[f64], grid: CellGrid, opts: &SolverOptions) -> Result<Self> {
        Self::from_fields(set.field(CoefficientId::E), set.field(CoefficientId::D), set.size(), t, x, grid, opts)
    }

    pub fn from_fields(
        e: &TensorField,
        d: &TensorField,
        size: usize,
        t: f64,
        x: &[f64],
        grid: CellGrid,
        opts: &SolverOptions,
    ) -> Result<Self> {
        let dim = grid.dim();
        let nn = size * size;
        let mut ebuf = vec![0.0; dim * dim];
        let diffusion = FluxCoefficients::sample(&grid, 1, false, |axis, y, a, _| {
            e.sample(t, x, y, &mut ebuf);
            *a = ebuf[axis * dim + axis];
        });
        let nodes = grid.num_nodes();
        let mut drift = vec![0.0; dim * nodes * nn];
        let mut dbuf = vec![0.0; dim * nn];
        for axis in 0..dim {
            for node in 0..nodes {
                let p = grid.face_point(node, axis);
                d.sample(t, x, &p[..dim], &mut dbuf);
                let slot = axis * nodes + node;
                drift[slot * nn..(slot + 1) * nn].copy_from_slice(&dbuf[axis * nn..(axis + 1) * nn]);
            }
        }
        Self::new(grid, size, diffusion, drift, opts)
    }

    pub fn new(
        grid: CellGrid,
        size: usize,
        diffusion: FluxCoefficients,
        drift: Vec<f64>,
        opts: &SolverOptions,
    ) -> Result<Self> {
        let matrix = assemble_div_flux(&grid, &diffusion)?;
        let solver = LinearSolver::new(&matrix, Gauge::ZeroMean, opts.method, opts.tol)?;
        Ok(CellProblem { grid, size, diffusion, drift, solver })
    }

    fn drift_at(&self, axis: usize, node: usize) -> &[f64] {
        let nn = self.size * self.size;
        let slot = axis * self.grid.num_nodes() + node;
        &self.drift[slot * nn..(slot + 1) * nn]
    }

    /// `W` with one component per axis, zero mean.
    pub fn solve_w(&self) -> Result<Field> {
        let d = self.grid.dim();
        let nodes = self.grid.num_nodes();
        let h = self.grid.h();
        let mut w = Field::zeros(nodes, d);
        for i in 0..d {
            let rhs: Vec<f64> = (0..nodes)
                .map(|k| {
                    let km = self.grid.neighbor(k, i, false).unwrap();
                    (self.diffusion.diffusion(i, k) - self.diffusion.diffusion(i, km)) / h
                })
                .collect();
            let sol = self.solver.solve(&rhs)?;
            for (k, v) in sol.into_iter().enumerate() {
                w.values[k * d + i] = v;
            }
        }
        Ok(w)
    }

    /// `delta` with `N x N` components (layout `[alpha][beta]`), zero mean.
    pub fn solve_delta(&self) -> Result<Field> {
        let d = self.grid.dim();
        let nodes = self.grid.num_nodes();
        let h = self.grid.h();
        let nn = self.size * self.size;
        let mut delta = Field::zeros(nodes, nn);
        for ab in 0..nn {
            let rhs: Vec<f64> = (0..nodes)
                .map(|k| {
                    (0..d)
                        .map(|i| {
                            let km = self.grid.neighbor(k, i, false).unwrap();
                            (self.drift_at(i, k)[ab] - self.drift_at(i, km)[ab]) / h
                        })
                        .sum()
                })
                .collect();
            if rhs.iter().all(|&v| v == 0.0) {
                continue;
            }
            let sol = self.solver.solve(&rhs)?;
            for (k, v) in sol.into_iter().enumerate() {
                delta.values[k * nn + ab] = v;
            }
        }
        Ok(delta)
    }

    /// Face averages of the corrector fluxes: `(E*, D*)` with layouts
    /// `[i][j]` and `[i][alpha][beta]`.
    pub fn effective_tensors(&self, w: &Field, delta: &Field) -> (Vec<f64>, Vec<f64>) {
        let d = self.grid.dim();
        let nodes = self.grid.num_nodes();
        let h = self.grid.h();
        let nn = self.size * self.size;
        let mut e_star = vec![0.0; d * d];
        let mut d_star = vec![0.0; d * nn];
        for i in 0..d {
            for k in 0..nodes {
                let kp = self.grid.neighbor(k, i, true).unwrap();
                let a = self.diffusion.diffusion(i, k);
                for j in 0..d {
                    let unit = if i == j { 1.0 } else { 0.0 };
                    e_star[i * d + j] += a * (unit + (w.get(kp, j) - w.get(k, j)) / h);
                }
                let b = self.drift_at(i, k);
                for ab in 0..nn {
                    d_star[i * nn + ab] += b[ab] + a * (delta.get(kp, ab) - delta.get(k, ab)) / h;
                }
            }
        }
        let scale = 1.0 / nodes as f64;
        e_star.iter_mut().chain(d_star.iter_mut()).for_each(|v| *v *= scale);
        (e_star, d_star)
    }
}

/// Smallest eigenvalue of the symmetric part of a `d x d` tensor.
pub fn min_symmetric_eigenvalue(t: &[f64], d: usize) -> f64 {
    let m = DMatrix::from_row_slice(d, d, t);
    let s = (&m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

fn check_effective(e_star: &[f64], d: usize) -> Result<()> {
    let lam = min_symmetric_eigenvalue(e_star, d);
    if lam > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("effective diffusion is not positive definite (min eigenvalue {lam:.3e})")))
    }
}

/// `(dtilde, wtilde)` with layouts `[j][alpha][beta]` and `[j][i][alpha][beta]`.
///
/// `delta_scale` multiplies `delta` (used by the separable shortcut).
pub fn corrector_tensors(g: &[f64], size: usize, w: &Field, delta: &Field, delta_scale: f64, grid: &CellGrid) -> (Field, Field) {
    let fields = CellFields::new(w.clone(), delta.clone(), grid);
    corrector_tensors_from(&fields, g, size, delta_scale, grid)
}

fn corrector_tensors_from(f: &CellFields, g: &[f64], n: usize, scale: f64, grid: &CellGrid) -> (Field, Field) {
    let d = grid.dim();
    let nn = n * n;
    let nodes = grid.num_nodes();
    let mut dt = Field::zeros(nodes, d * nn);
    let mut wt = Field::zeros(nodes, d * d * nn);
    for k in 0..nodes {
        let gd = f.grad_delta.node(k);
        let gw = f.grad_w.node(k);
        let out = dt.node_mut(k);
        for j in 0..d {
            for a in 0..n {
                for b in 0..n {
                    let s: f64 = (0..n).map(|c| g[a * n + c] * gd[(c * n + b) * d + j]).sum();
                    out[(j * n + a) * n + b] = scale * s;
                }
            }
        }
        let out = wt.node_mut(k);
        for j in 0..d {
            for i in 0..d {
                let dw = gw[i * d + j];
                for ab in 0..nn {
                    out[(j * d + i) * nn + ab] = dw * g[ab];
                }
            }
        }
    }
    (dt, wt)
}

/// Corrector fields on the cell grid and their centred gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFields {
    /// Components `W_i`.
    pub w: Field,
    /// Components `delta_{alpha beta}`.
    pub delta: Field,
    /// `d_j W_i`, layout `[i][j]`.
    pub grad_w: Field,
    /// `d_j delta_{alpha beta}`, layout `[alpha][beta][j]`.
    pub grad_delta: Field,
}

impl CellFields {
    fn new(w: Field, delta: Field, grid: &CellGrid) -> Self {
        let grad_w = fd_gradient(grid, &w);
        let grad_delta = fd_gradient(grid, &delta);
        CellFields { w, delta, grad_w, grad_delta }
    }
}

/// Full cell solution at one `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSolution {
    pub t: f64,
    pub x: Vec<f64>,
    pub w: Field,
    pub delta: Field,
    pub e_star: Vec<f64>,
    pub d_star: Vec<f64>,
    pub delta_tilde: Field,
    pub omega_tilde: Field,
}

/// Solves both cell problems at `(t, x)` and derives all tensors.
pub fn solve_cell(set: &CoefficientSet, t: f64, x: &[f64], grid: CellGrid, opts: &SolverOptions) -> Result<CellSolution> {
    let p = CellProblem::sample(set, t, x, grid, opts)?;
    let w = p.solve_w()?;
    let delta = p.solve_delta()?;
    let (e_star, d_star) = p.effective_tensors(&w, &delta);
    check_effective(&e_star, grid.dim())?;
    let mut g = vec![0.0; set.size() * set.size()];
    set.sample_macro(CoefficientId::G, t, x, &mut g);
    let (delta_tilde, omega_tilde) = corrector_tensors(&g, set.size(), &w, &delta, 1.0, &grid);
    Ok(CellSolution { t, x: x.to_vec(), w, delta, e_star, d_star, delta_tilde, omega_tilde })
}

/// Compact per-node entry of a [`CellTable`].
#[derive(Debug, Clone)]
pub struct CellSample {
    pub e_star: Vec<f64>,
    pub d_star: Vec<f64>,
    /// `G` at the sample.
    pub g: Vec<f64>,
    /// Factor applied to the stored `delta` (separable shortcut), else 1.
    pub delta_scale: f64,
    /// Shared corrector fields; absent when `J` has no cell dependence.
    pub fields: Option<Arc<CellFields>>,
}

impl CellSample {
    /// Right side of the corrector-gradient ODE at cell node `y`:
    /// `r_{j alpha} = dtilde_{j alpha beta} v_beta + wtilde_{j i alpha beta} d_i v_beta`.
    ///
    /// `grad_v` has layout `[beta][i]`; `out` has layout `[j][alpha]`.
    pub fn corrector_source(&self, y: usize, v: &[f64], grad_v: &[f64], out: &mut [f64]) {
        let n = v.len();
        let d = grad_v.len() / n.max(1);
        let Some(f) = &self.fields else {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        };
        let gd = f.grad_delta.node(y);
        let gw = f.grad_w.node(y);
        let mut tmp = [0.0f64; 16];
        let mut gv = [0.0f64; 16];
        for j in 0..d {
            // tmp_c = s sum_b d_j delta_cb v_b + sum_i d_j W_i d_i v_c
            for c in 0..n {
                let mut s = 0.0;
                for b in 0..n {
                    s += gd[(c * n + b) * d + j] * v[b];
                }
                let mut r = self.delta_scale * s;
                for i in 0..d {
                    r += gw[i * d + j] * grad_v[c * d + i];
                }
                tmp[c] = r;
            }
            for a in 0..n {
                gv[a] = (0..n).map(|c| self.g[a * n + c] * tmp[c]).sum();
            }
            out[j * n..(j + 1) * n].copy_from_slice(&gv[..n]);
        }
    }

    /// Materializes the full solution (requires stored fields).
    pub fn solution(&self, t: f64, x: &[f64], grid: &CellGrid) -> Option<CellSolution> {
        let f = self.fields.as_ref()?;
        let n = (self.g.len() as f64).sqrt().round() as usize;
        let (delta_tilde, omega_tilde) = corrector_tensors_from(f, &self.g, n, self.delta_scale, grid);
        let mut delta = f.delta.clone();
        delta.values.iter_mut().for_each(|v| *v *= self.delta_scale);
        Some(CellSolution {
            t,
            x: x.to_vec(),
            w: f.w.clone(),
            delta,
            e_star: self.e_star.clone(),
            d_star: self.d_star.clone(),
            delta_tilde,
            omega_tilde,
        })
    }
}

/// Cell solutions over the macro nodes and flux faces at each sample time.
#[derive(Debug, Clone)]
pub struct CellTable {
    pub cell: CellGrid,
    pub macro_grid: MacroGrid,
    pub size: usize,
    /// Sample times; a single entry when `E`, `D`, `G` are time-constant.
    pub times: Vec<f64>,
    /// Whether the cell problems were solved once and rescaled.
    pub separable: bool,
    nodes: Vec<Vec<CellSample>>,
    faces: Vec<FluxCoefficients>,
}

impl CellTable {
    pub fn time_dependent(&self) -> bool {
        self.times.len() > 1
    }

    /// Index of the sample time matching `t`.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        if self.times.len() == 1 {
            return Ok(0);
        }
        let tol = 1e-9 * t.abs().max(1.0);
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= tol)
            .ok_or_else(|| Error::Domain(format!("cell table has no sample at t = {t}")))
    }

    pub fn node(&self, ti: usize, node: usize) -> &CellSample {
        &self.nodes[ti][node]
    }

    /// Effective diffusion/drift at the macro flux faces.
    pub fn flux(&self, ti: usize) -> &FluxCoefficients {
        &self.faces[ti]
    }

    pub fn has_correctors(&self) -> bool {
        self.nodes.first().and_then(|n| n.first()).is_some_and(|s| s.fields.is_some())
    }
}

struct Split {
    e_factor: Option<TxProfile>,
    d_factor: Option<TxProfile>,
    fields: Arc<CellFields>,
    e_star: Vec<f64>,
    d_star: Vec<f64>,
}

impl Split {
    fn factors(&self, t: f64, x: &[f64]) -> (f64, f64) {
        let f = self.e_factor.as_ref().map_or(1.0, |p| p.eval(t, x));
        let g = self.d_factor.as_ref().map_or(1.0, |p| p.eval(t, x));
        (f, g)
    }
}

fn try_split(set: &CoefficientSet, cell: CellGrid, opts: &SolverOptions) -> Result<Option<Split>> {
    let (Some((fe, ue)), Some((fd, ud))) =
        (set.field(CoefficientId::E).separable_split(), set.field(CoefficientId::D).separable_split())
    else {
        return Ok(None);
    };
    if !(set.separable || fe.is_none() && fd.is_none()) {
        return Ok(None);
    }
    let x0 = [0.5; 2];
    let base = CellProblem::from_fields(&ue, &ud, set.size(), 0.0, &x0[..set.dim()], cell, opts)?;
    let w = base.solve_w()?;
    let delta = base.solve_delta()?;
    let (e_star, d_star) = base.effective_tensors(&w, &delta);
    check_effective(&e_star, set.dim())?;
    let fields = Arc::new(CellFields::new(w, delta, &cell));
    Ok(Some(Split { e_factor: fe, d_factor: fd, fields, e_star, d_star }))
}

fn aggregate<T>(results: Vec<Result<T>>, what: &str) -> Result<Vec<T>> {
    let total = results.len();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed == 0 {
        return Ok(results.into_iter().map(|r| r.unwrap()).collect());
    }
    let first = results.into_iter().find_map(|r| r.err()).unwrap();
    Err(first.context(format!("{failed} of {total} {what} cell samples failed")))
}

/// Solves the cell problems at every macro node and flux face for each
/// required time. `E`, `D` that factor as `f(t,x) c(y)` are solved once when
/// the set is flagged separable (or has no `(t, x)` dependence at all).
pub fn cell_sweep(
    set: &CoefficientSet,
    macro_grid: &MacroGrid,
    times: &[f64],
    cell: &CellGrid,
    opts: &SolverOptions,
) -> Result<CellTable> {
    use CoefficientId::{D, E, G, J};
    if cell.dim() != set.dim() || macro_grid.dim() != set.dim() {
        return Err(Error::Domain("grid dimensions do not match the coefficient set".into()));
    }
    let (d, n) = (set.dim(), set.size());
    let nn = n * n;
    let times: Vec<f64> = if set.any_t_dependent(&[E, D, G]) && !times.is_empty() {
        times.to_vec()
    } else {
        vec![times.first().copied().unwrap_or(0.0)]
    };
    let with_fields = set.y_dependent(J);
    let split = try_split(set, *cell, opts)?;
    let nodes = macro_grid.num_nodes();

    let node_points: Vec<(usize, usize)> = (0..times.len()).flat_map(|ti| (0..nodes).map(move |k| (ti, k))).collect();
    let samples: Vec<Result<CellSample>> = node_points
        .par_iter()
        .map(|&(ti, k)| {
            let t = times[ti];
            let p = macro_grid.point(k);
            let x = &p[..d];
            let mut g = vec![0.0; nn];
            set.sample_macro(G, t, x, &mut g);
            match &split {
                Some(s) => {
                    let (f, gd) = s.factors(t, x);
                    Ok(CellSample {
                        e_star: s.e_star.iter().map(|v| f * v).collect(),
                        d_star: s.d_star.iter().map(|v| gd * v).collect(),
                        g,
                        delta_scale: gd / f,
                        fields: with_fields.then(|| s.fields.clone()),
                    })
                }
                None => {
                    let prob = CellProblem::sample(set, t, x, *cell, opts)?;
                    let w = prob.solve_w()?;
                    let delta = prob.solve_delta()?;
                    let (e_star, d_star) = prob.effective_tensors(&w, &delta);
                    check_effective(&e_star, d)?;
                    Ok(CellSample {
                        e_star,
                        d_star,
                        g,
                        delta_scale: 1.0,
                        fields: with_fields.then(|| Arc::new(CellFields::new(w, delta, cell))),
                    })
                }
            }
            .map_err(|e: Error| e.context(format!("cell sample t = {t}, x = {x:?}")))
        })
        .collect();
    let flat = aggregate(samples, "node")?;
    let mut node_table: Vec<Vec<CellSample>> = Vec::with_capacity(times.len());
    let mut it = flat.into_iter();
    for _ in 0..times.len() {
        node_table.push(it.by_ref().take(nodes).collect());
    }

    let mut faces = Vec::with_capacity(times.len());
    for &t in &times {
        let face_ids: Vec<(usize, usize)> = (0..d)
            .flat_map(|axis| (0..nodes).map(move |k| (axis, k)))
            .filter(|&(axis, k)| macro_grid.neighbor(k, axis, true).is_some())
            .collect();
        let values: Vec<Result<(f64, Vec<f64>)>> = face_ids
            .par_iter()
            .map(|&(axis, k)| {
                let p = macro_grid.face_point(k, axis);
                let x = &p[..d];
                let (e_star, d_star) = match &split {
                    Some(s) => {
                        let (f, gd) = s.factors(t, x);
                        (s.e_star.iter().map(|v| f * v).collect::<Vec<_>>(), s.d_star.iter().map(|v| gd * v).collect())
                    }
                    None => {
                        let prob = CellProblem::sample(set, t, x, *cell, opts)
                            .map_err(|e| e.context(format!("cell face t = {t}, x = {x:?}")))?;
                        let w = prob.solve_w()?;
                        let delta = prob.solve_delta()?;
                        let out = prob.effective_tensors(&w, &delta);
                        check_effective(&out.0, d)?;
                        out
                    }
                };
                Ok((e_star[axis * d + axis], d_star[axis * nn..(axis + 1) * nn].to_vec()))
            })
            .collect();
        let values = aggregate(values, "face")?;
        let mut flux = FluxCoefficients {
            ncomp: n,
            dim: d,
            nodes,
            diffusion: vec![0.0; d * nodes],
            drift: Some(vec![0.0; d * nodes * nn]),
        };
        for (&(axis, k), (a, b)) in face_ids.iter().zip(values) {
            let slot = axis * nodes + k;
            flux.diffusion[slot] = a;
            flux.drift.as_mut().unwrap()[slot * nn..(slot + 1) * nn].copy_from_slice(&b);
        }
        faces.push(flux);
    }
    let separable = split.is_some();
    Ok(CellTable { cell: *cell, macro_grid: *macro_grid, size: n, times, separable, nodes: node_table, faces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{ScalarFamily, YProfile};
    use std::f64::consts::PI;

    fn periodic(mean: f64, amp: f64, k: &[i64]) -> ScalarFamily {
        ScalarFamily::Periodic(YProfile { mean, amp, k: k.to_vec(), phase: 0.0 })
    }

    fn set_1d(e: ScalarFamily, d: ScalarFamily) -> CoefficientSet {
        CoefficientSet::new(1, 1)
            .unwrap()
            .with(CoefficientId::E, TensorField::from_families(vec![1, 1], vec![e]).unwrap())
            .unwrap()
            .with(CoefficientId::D, TensorField::from_families(vec![1, 1, 1], vec![d]).unwrap())
            .unwrap()
    }

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn constant_coefficients_have_trivial_correctors() {
        let set = set_1d(ScalarFamily::Constant { value: 2.5 }, ScalarFamily::Constant { value: 0.7 });
        let sol = solve_cell(&set, 0.0, &[0.3], CellGrid::new(1, 32).unwrap(), &opts()).unwrap();
        assert!(sol.w.max_abs() <= 1e-12 && sol.delta.max_abs() <= 1e-12);
        assert!((sol.e_star[0] - 2.5).abs() <= 1e-12);
        assert!((sol.d_star[0] - 0.7).abs() <= 1e-12);
        assert!(sol.delta_tilde.max_abs() == 0.0 && sol.omega_tilde.max_abs() <= 1e-12);
    }

    #[test]
    fn harmonic_mean_in_one_dimension() {
        let set = set_1d(periodic(2.0, 1.0, &[1]), ScalarFamily::Constant { value: 0.0 });
        let grid = CellGrid::new(1, 256).unwrap();
        let sol = solve_cell(&set, 0.0, &[0.5], grid, &opts()).unwrap();
        assert!((sol.e_star[0] - 3f64.sqrt()).abs() < 1e-6);
        // W' = E*/E - 1 at the faces.
        let h = grid.h();
        for k in 0..256 {
            let kp = (k + 1) % 256;
            let y = (k as f64 + 0.5) * h;
            let want = sol.e_star[0] / (2.0 + (2.0 * PI * y).sin()) - 1.0;
            assert!(((sol.w.get(kp, 0) - sol.w.get(k, 0)) / h - want).abs() < 1e-9);
        }
        let mean: f64 = sol.w.values.iter().sum::<f64>() / 256.0;
        assert!(mean.abs() < 1e-13);
    }

    #[test]
    fn drift_corrector_oracle() {
        let set = set_1d(ScalarFamily::Constant { value: 1.0 }, periodic(0.0, 1.0, &[1]));
        let err = |n: usize| {
            let grid = CellGrid::new(1, n).unwrap();
            let sol = solve_cell(&set, 0.0, &[0.5], grid, &opts()).unwrap();
            (0..n)
                .map(|k| (sol.delta.get(k, 0) - (2.0 * PI * grid.point(k)[0]).cos() / (2.0 * PI)).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(32), err(64));
        assert!(e1 < 1e-3);
        assert!((e1 / e2 - 4.0).abs() < 0.1);
    }

    #[test]
    fn drift_flux_is_constant_and_equals_d_star() {
        let set = set_1d(periodic(2.0, 0.8, &[2]), periodic(0.3, 0.5, &[1]));
        let grid = CellGrid::new(1, 64).unwrap();
        let p = CellProblem::sample(&set, 0.0, &[0.5], grid, &opts()).unwrap();
        let delta = p.solve_delta().unwrap();
        let w = p.solve_w().unwrap();
        let (e_star, d_star) = p.effective_tensors(&w, &delta);
        let h = grid.h();
        for k in 0..64 {
            let kp = (k + 1) % 64;
            let flux = p.drift_at(0, k)[0] + p.diffusion.diffusion(0, k) * (delta.get(kp, 0) - delta.get(k, 0)) / h;
            assert!((flux - d_star[0]).abs() < 1e-10);
        }
        assert!(e_star[0] < 2.0);
    }

    #[test]
    fn separable_two_dimensional_cell_splits() {
        let a = |y: f64| 2.0 + (2.0 * PI * y).sin();
        let b = |y: f64| 1.5 + 0.5 * (2.0 * PI * y).cos();
        let e = TensorField::custom(vec![2, 2], true, false, move |_, _, y, o| {
            let v = a(y[0]) * b(y[1]);
            o.copy_from_slice(&[v, 0.0, 0.0, v]);
        });
        let set = CoefficientSet::new(2, 1).unwrap().with(CoefficientId::E, e).unwrap();
        let n = 16;
        let sol = solve_cell(&set, 0.0, &[0.5, 0.5], CellGrid::new(2, n).unwrap(), &opts()).unwrap();

        let one_d = |f: &dyn Fn(f64) -> f64| {
            let e1 = TensorField::custom(vec![1, 1], true, false, {
                let vals: Vec<f64> = (0..4 * n).map(|k| f(k as f64 / (4 * n) as f64)).collect();
                move |_, _, y, o| o[0] = vals[(y[0] * (4 * n) as f64).round() as usize % (4 * n)]
            });
            let s = CoefficientSet::new(1, 1).unwrap().with(CoefficientId::E, e1).unwrap();
            solve_cell(&s, 0.0, &[0.5], CellGrid::new(1, n).unwrap(), &opts()).unwrap()
        };
        let wa = one_d(&a);
        let wb = one_d(&b);
        let grid = CellGrid::new(2, n).unwrap();
        for k in 0..grid.num_nodes() {
            let m = grid.multi(k);
            assert!((sol.w.get(k, 0) - wa.w.get(m[0], 0)).abs() < 1e-10);
            assert!((sol.w.get(k, 1) - wb.w.get(m[1], 0)).abs() < 1e-10);
        }
        assert!(sol.e_star[1].abs() < 1e-12 && sol.e_star[2].abs() < 1e-12);
    }

    #[test]
    fn gauge_shift_leaves_tensors_unchanged() {
        let set = set_1d(periodic(2.0, 1.0, &[1]), periodic(0.2, 0.5, &[1]));
        let grid = CellGrid::new(1, 32).unwrap();
        let p = CellProblem::sample(&set, 0.0, &[0.5], grid, &opts()).unwrap();
        let w = p.solve_w().unwrap();
        let delta = p.solve_delta().unwrap();
        let shift = |f: &Field, c: f64| Field { ncomp: f.ncomp, values: f.values.iter().map(|v| v + c).collect() };
        let (e0, d0) = p.effective_tensors(&w, &delta);
        let (e1, d1) = p.effective_tensors(&shift(&w, 3.0), &shift(&delta, -1.25));
        assert!((e0[0] - e1[0]).abs() < 1e-13 && (d0[0] - d1[0]).abs() < 1e-13);
        let g = [1.7];
        let (t0, o0) = corrector_tensors(&g, 1, &w, &delta, 1.0, &grid);
        let (t1, o1) = corrector_tensors(&g, 1, &shift(&w, 3.0), &shift(&delta, -1.25), 1.0, &grid);
        assert!(t0.max_abs_diff(&t1) < 1e-12 && o0.max_abs_diff(&o1) < 1e-12);
    }

    #[test]
    fn corrector_tensors_scale_with_g() {
        let set = set_1d(periodic(2.0, 1.0, &[1]), periodic(0.2, 0.5, &[1]));
        let grid = CellGrid::new(1, 32).unwrap();
        let sol = solve_cell(&set, 0.0, &[0.5], grid, &opts()).unwrap();
        let (t1, o1) = corrector_tensors(&[1.0], 1, &sol.w, &sol.delta, 1.0, &grid);
        let (t2, o2) = corrector_tensors(&[2.0], 1, &sol.w, &sol.delta, 1.0, &grid);
        assert_eq!(t1, sol.delta_tilde);
        for (a, b) in t1.values.iter().zip(&t2.values).chain(o1.values.iter().zip(&o2.values)) {
            assert_eq!(2.0 * a, *b);
        }
        let grad = fd_gradient(&grid, &sol.delta);
        assert_eq!(t1.values, grad.values);
    }

    #[test]
    fn sweep_matches_pointwise_recompute() {
        let e = ScalarFamily::Separable {
            tx: TxProfile { base: 1.0, amp: 0.5, k: vec![], rate: 0.0 },
            y: YProfile { mean: 2.0, amp: 1.0, k: vec![1], phase: 0.0 },
        };
        let mut set = set_1d(e, periodic(0.2, 0.4, &[1]));
        set = set
            .with(CoefficientId::J, TensorField::from_families(vec![1, 1, 1], vec![periodic(0.1, 0.1, &[1])]).unwrap())
            .unwrap();
        let mg = MacroGrid::new(1, 9).unwrap();
        let cg = CellGrid::new(1, 32).unwrap();
        let general = cell_sweep(&set, &mg, &[0.0], &cg, &opts()).unwrap();
        assert!(!general.separable);
        set.separable = true;
        let fast = cell_sweep(&set, &mg, &[0.0], &cg, &opts()).unwrap();
        assert!(fast.separable);
        for k in 0..mg.num_nodes() {
            let x = mg.point(k);
            let direct = solve_cell(&set, 0.0, &x[..1], cg, &opts()).unwrap();
            for tab in [&general, &fast] {
                let s = tab.node(0, k);
                assert!((s.e_star[0] - direct.e_star[0]).abs() < 1e-10);
                assert!((s.d_star[0] - direct.d_star[0]).abs() < 1e-10);
                let full = s.solution(0.0, &x[..1], &cg).unwrap();
                assert!(full.delta_tilde.max_abs_diff(&direct.delta_tilde) < 1e-9);
                assert!(full.omega_tilde.max_abs_diff(&direct.omega_tilde) < 1e-9);
            }
        }
        for slot in 0..8 {
            assert!((general.flux(0).diffusion[slot] - fast.flux(0).diffusion[slot]).abs() < 1e-10);
        }
    }

    #[test]
    fn corrector_source_matches_tensor_contraction() {
        let set = CoefficientSet::new(1, 2)
            .unwrap()
            .with(CoefficientId::E, TensorField::from_families(vec![1, 1], vec![periodic(2.0, 1.0, &[1])]).unwrap())
            .unwrap()
            .with(
                CoefficientId::D,
                TensorField::from_families(
                    vec![1, 2, 2],
                    vec![periodic(0.1, 0.2, &[1]), periodic(0.0, 0.1, &[2]), ScalarFamily::Constant { value: 0.3 }, periodic(0.0, 0.3, &[1])],
                )
                .unwrap(),
            )
            .unwrap()
            .with(CoefficientId::G, TensorField::constant(vec![2, 2], &[1.0, 0.5, -0.2, 2.0]).unwrap())
            .unwrap()
            .with(CoefficientId::J, TensorField::from_families(vec![1, 2, 2], vec![periodic(0.0, 1.0, &[1]); 4]).unwrap())
            .unwrap();
        let mg = MacroGrid::new(1, 5).unwrap();
        let cg = CellGrid::new(1, 16).unwrap();
        let tab = cell_sweep(&set, &mg, &[0.0], &cg, &opts()).unwrap();
        let s = tab.node(0, 2);
        let sol = s.solution(0.0, &[0.5], &cg).unwrap();
        let v = [0.7, -1.1];
        let gv = [0.4, 2.0];
        let mut out = [0.0; 2];
        for y in 0..16 {
            s.corrector_source(y, &v, &gv, &mut out);
            let dt = sol.delta_tilde.node(y);
            let wt = sol.omega_tilde.node(y);
            for a in 0..2 {
                let want: f64 = (0..2).map(|b| dt[a * 2 + b] * v[b] + wt[a * 2 + b] * gv[b]).sum();
                assert!((out[a] - want).abs() < 1e-12);
            }
        }
    }
}
