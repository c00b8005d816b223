//! Upscaled (homogenized) solver.
//!
//! ```text
//! Mbar v - div(E* grad v + D* v) = Hbar + Kbar u + Jbar grad u + <J . grad_y U1>,
//! du/dt + L u = G v,
//! d/dt grad_y U1 + L grad_y U1 = dtilde v + wtilde . grad v,   grad_y U1(0) = 0,
//! ```
//!
//! where bars are cell averages, `<.>` is the cell average and the last
//! equation holds at every macro node and cell node. The corrector gradient is
//! either stepped with implicit Euler or eliminated through the memory
//! convolution `int_0^t exp(-L(t-s)) [dtilde v + wtilde . grad v](s) ds`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{CellSample, CellTable};
use crate::coefficients::{CoefficientId, CoefficientSet};
use crate::discretization::{fd_gradient, CellGrid, CsrMatrix, Field, Grid, MacroGrid};
use crate::error::{Error, Result};
use crate::nodal::{self, source_rhs, EllipticOperator};
use crate::stepping::{OdeOperator, SolverOptions, TimeConfig, TimeScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectorMode {
    Stepped,
    Nonlocal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub t: f64,
    pub u: Field,
    pub v: Field,
    /// Per macro node, `grad_y U1` on the cell grid with layout `[j][alpha]`.
    /// `None` when `J` has no cell dependence (the memory term vanishes).
    pub grad_uy: Option<Vec<Field>>,
    /// Memory source `<J . grad_y U1>` per macro node.
    pub memory: Field,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroTrajectory {
    pub grid: MacroGrid,
    pub cell: CellGrid,
    pub time: TimeConfig,
    pub mode: CorrectorMode,
    pub states: Vec<MacroState>,
    pub picard_iterations: Vec<usize>,
}

/// `exp(s A)` by scaling and squaring with the degree-13 Pade approximant.
///
/// `a` is row-major `n x n`.
pub fn matrix_exponential(a: &[f64], n: usize, s: f64) -> Vec<f64> {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA13: f64 = 5.371920351148152;
    let mut m = DMatrix::from_row_slice(n, n, a) * s;
    let norm1 = (0..n).map(|j| m.column(j).abs().sum()).fold(0.0, f64::max);
    if norm1 == 0.0 {
        return DMatrix::<f64>::identity(n, n).transpose().as_slice().to_vec();
    }
    let squarings = if norm1 > THETA13 { (norm1 / THETA13).log2().ceil() as i32 } else { 0 };
    m /= 2f64.powi(squarings);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &m * &m;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * B[13] + &a4 * B[11] + &a2 * B[9]);
    let u = &m * (inner_u + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &id * B[1]);
    let inner_v = &a6 * (&a6 * B[12] + &a4 * B[10] + &a2 * B[8]);
    let v = inner_v + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &id * B[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Pade denominator is nonsingular for scaled input");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r.transpose().as_slice().to_vec()
}

/// `exp(-L(x) k dt)` for `k = 0..=steps` at every macro node.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryKernel {
    pub dt: f64,
    pub size: usize,
    pub nodes: usize,
    /// Layout `[k][node][alpha][beta]`.
    values: Vec<f64>,
}

impl MemoryKernel {
    /// Requires `L` to be time-constant.
    pub fn new(set: &CoefficientSet, grid: &MacroGrid, dt: f64, steps: usize) -> Result<Self> {
        if set.t_dependent(CoefficientId::L) {
            return Err(Error::NonLocal("L depends on time; use the stepped corrector".into()));
        }
        let n = set.size();
        let nn = n * n;
        let nodes = grid.num_nodes();
        let d = grid.dim();
        let mut values = vec![0.0; (steps + 1) * nodes * nn];
        let mut l = vec![0.0; nn];
        for node in 0..nodes {
            let p = grid.point(node);
            set.sample_macro(CoefficientId::L, 0.0, &p[..d], &mut l);
            for k in 0..=steps {
                let e = matrix_exponential(&l, n, -(k as f64) * dt);
                let off = (k * nodes + node) * nn;
                values[off..off + nn].copy_from_slice(&e);
            }
        }
        Ok(MemoryKernel { dt, size: n, nodes, values })
    }

    pub fn steps(&self) -> usize {
        self.values.len() / (self.nodes * self.size * self.size) - 1
    }

    pub fn at(&self, k: usize, node: usize) -> &[f64] {
        let nn = self.size * self.size;
        let off = (k * self.nodes + node) * nn;
        &self.values[off..off + nn]
    }
}

fn cell_average(set: &CoefficientSet, id: CoefficientId, t: f64, grid: &MacroGrid, quad_n: usize) -> Field {
    let len = set.field(id).len();
    Field::from_fn(grid, len, |x, out| out.copy_from_slice(&set.y_average_unchecked(id, t, x, quad_n, 0.0)))
}

/// Centred discretization of `-sum_{i != j} d_i(E*_ij d_j v)` on interior rows.
fn cross_diffusion(grid: &MacroGrid, table: &CellTable, ti: usize, n: usize) -> Option<CsrMatrix> {
    if grid.dim() < 2 {
        return None;
    }
    let nodes = grid.num_nodes();
    let e = |k: usize, i: usize, j: usize| table.node(ti, k).e_star[i * 2 + j];
    if (0..nodes).all(|k| e(k, 0, 1) == 0.0 && e(k, 1, 0) == 0.0) {
        return None;
    }
    let h = grid.h();
    let c = 1.0 / (4.0 * h * h);
    let mut trip = Vec::new();
    for k in 0..nodes {
        if grid.is_boundary(k) {
            continue;
        }
        for (i, j) in [(0, 1), (1, 0)] {
            for (side, sign) in [(true, -1.0), (false, 1.0)] {
                let ki = grid.neighbor(k, i, side).unwrap();
                let coef = e(ki, i, j) * c * sign;
                for (dir, s2) in [(true, 1.0), (false, -1.0)] {
                    let col = grid.neighbor(ki, j, dir).unwrap();
                    if grid.is_boundary(col) {
                        continue;
                    }
                    for a in 0..n {
                        trip.push((k * n + a, col * n + a, coef * s2));
                    }
                }
            }
        }
    }
    Some(CsrMatrix::from_triplets(nodes * n, nodes * n, trip))
}

struct Averages {
    t: f64,
    h: Field,
    k: Field,
    j: Field,
}

/// Elliptic half of the upscaled system with cached factorization.
pub struct MacroElliptic<'a> {
    set: &'a CoefficientSet,
    table: &'a CellTable,
    grid: MacroGrid,
    opts: SolverOptions,
    operator: Option<(f64, EllipticOperator)>,
    averages: Option<Averages>,
    /// `J` at the cell nodes per macro node, layout `[node][y][j][alpha][beta]`.
    j_cell: Option<(f64, Vec<f64>)>,
    operator_t_dep: bool,
    averages_t_dep: bool,
}

impl<'a> MacroElliptic<'a> {
    pub fn new(set: &'a CoefficientSet, table: &'a CellTable, grid: MacroGrid, opts: SolverOptions) -> Result<Self> {
        if table.macro_grid != grid {
            return Err(Error::Domain("cell table was built for a different macro grid".into()));
        }
        use CoefficientId::*;
        Ok(MacroElliptic {
            set,
            table,
            grid,
            opts,
            operator: None,
            averages: None,
            j_cell: None,
            operator_t_dep: table.time_dependent() || set.t_dependent(M),
            averages_t_dep: set.any_t_dependent(&[H, K, J]),
        })
    }

    fn quad_n(&self) -> usize {
        self.table.cell.n()
    }

    fn prepare(&mut self, t: f64) -> Result<()> {
        let stale = |cached: Option<f64>, dep: bool| cached.is_none_or(|tc| dep && tc != t);
        if stale(self.operator.as_ref().map(|o| o.0), self.operator_t_dep) {
            let ti = self.table.time_index(t)?;
            let reaction = cell_average(self.set, CoefficientId::M, t, &self.grid, self.quad_n());
            let cross = cross_diffusion(&self.grid, self.table, ti, self.set.size());
            let op = EllipticOperator::new(&self.grid, self.table.flux(ti), &reaction, cross.as_ref(), &self.opts)?;
            self.operator = Some((t, op));
        }
        if stale(self.averages.as_ref().map(|a| a.t), self.averages_t_dep) {
            use CoefficientId::{H, J, K};
            let q = self.quad_n();
            self.averages = Some(Averages {
                t,
                h: cell_average(self.set, H, t, &self.grid, q),
                k: cell_average(self.set, K, t, &self.grid, q),
                j: cell_average(self.set, J, t, &self.grid, q),
            });
        }
        Ok(())
    }

    /// `<J . grad_y U1>` per macro node (rectangle rule on the cell grid).
    pub fn memory(&mut self, t: f64, grad_uy: &[Field]) -> Field {
        let set = self.set;
        let (d, n) = (set.dim(), set.size());
        let nn = n * n;
        let cell = self.table.cell;
        let cn = cell.num_nodes();
        let per = cn * d * nn;
        let stale = self.j_cell.as_ref().is_none_or(|(tc, _)| set.t_dependent(CoefficientId::J) && *tc != t);
        if stale {
            let grid = self.grid;
            let vals: Vec<f64> = (0..grid.num_nodes())
                .into_par_iter()
                .flat_map_iter(|k| {
                    let p = grid.point(k);
                    let mut buf = vec![0.0; per];
                    for y in 0..cn {
                        let q = cell.point(y);
                        set.sample(CoefficientId::J, t, &p[..d], &q[..d], &mut buf[y * d * nn..(y + 1) * d * nn]);
                    }
                    buf
                })
                .collect();
            self.j_cell = Some((t, vals));
        }
        let jc = &self.j_cell.as_ref().unwrap().1;
        let mut out = Field::zeros(self.grid.num_nodes(), n);
        let scale = 1.0 / cn as f64;
        out.values.par_chunks_mut(n).enumerate().for_each(|(k, o)| {
            let g = &grad_uy[k];
            let jk = &jc[k * per..(k + 1) * per];
            for y in 0..cn {
                let gy = g.node(y);
                let jy = &jk[y * d * nn..(y + 1) * d * nn];
                for a in 0..n {
                    let mut s = 0.0;
                    for j in 0..d {
                        for b in 0..n {
                            s += jy[(j * n + a) * n + b] * gy[j * n + b];
                        }
                    }
                    o[a] += s;
                }
            }
            o.iter_mut().for_each(|v| *v *= scale);
        });
        out
    }

    /// `v` at time `t` for given `u` and memory source.
    pub fn solve(&mut self, t: f64, u: &Field, memory: Option<&Field>) -> Result<Field> {
        let run = |this: &mut Self| -> Result<Field> {
            this.prepare(t)?;
            let a = this.averages.as_ref().unwrap();
            let rhs = source_rhs(&this.grid, &a.h, &a.k, &a.j, u, memory);
            this.operator.as_ref().unwrap().1.solve(&rhs)
        };
        run(self).map_err(|e| e.context(format!("upscaled elliptic solve at t = {t}")))
    }
}

/// One-off upscaled elliptic solve.
pub fn solve_macro_v(
    set: &CoefficientSet,
    table: &CellTable,
    u: &Field,
    grad_uy: Option<&[Field]>,
    t: f64,
    grid: &MacroGrid,
) -> Result<Field> {
    let mut ell = MacroElliptic::new(set, table, *grid, SolverOptions::default())?;
    let memory = grad_uy.map(|g| ell.memory(t, g));
    ell.solve(t, u, memory.as_ref())
}

pub fn step_macro_u(
    set: &CoefficientSet,
    grid: &MacroGrid,
    state: &MacroState,
    v_next: &Field,
    dt: f64,
    scheme: TimeScheme,
) -> Result<Field> {
    let op = OdeOperator::new(set, grid, state.t, dt, scheme)?;
    Ok(op.apply(&state.u, &state.v, v_next))
}

fn corrector_update(sample: &CellSample, lhs_inv: &[f64], prev: &Field, v: &[f64], grad_v: &[f64], dt: f64) -> Field {
    let n = v.len();
    let d = prev.ncomp / n;
    let mut out = Field::zeros(prev.num_nodes(), prev.ncomp);
    let mut r = vec![0.0; d * n];
    let mut rhs = vec![0.0; n];
    for y in 0..prev.num_nodes() {
        sample.corrector_source(y, v, grad_v, &mut r);
        let p = prev.node(y);
        let o = out.node_mut(y);
        for j in 0..d {
            for a in 0..n {
                rhs[a] = p[j * n + a] + dt * r[j * n + a];
            }
            nodal::matvec(n, lhs_inv, &rhs, &mut o[j * n..(j + 1) * n]);
        }
    }
    out
}

/// Implicit Euler step of the corrector-gradient ODE at one macro node.
///
/// `l` is `L(t + dt, x)`, `grad_v` has layout `[beta][i]`.
#[allow(clippy::too_many_arguments)]
pub fn step_corrector(
    sample: &CellSample,
    l: &[f64],
    prev: &Field,
    v: &[f64],
    grad_v: &[f64],
    dt: f64,
    t: f64,
    node: usize,
) -> Result<Field> {
    let n = v.len();
    let inv = nodal::invert(n, &nodal::identity_plus(n, dt, l)).ok_or(Error::Step { t: t + dt, dt, node })?;
    Ok(corrector_update(sample, &inv, prev, v, grad_v, dt))
}

/// History-convolution coefficients `(P, R)` of one macro node:
/// `P_{a g b} = sum_k w_k (K_{n-k} G)_{a g} v_b(k)`, `R_{a i} = sum_k w_k (K_{n-k} G d_i v(k))_a`.
#[derive(Debug, Clone, PartialEq)]
struct Convolution {
    p: Vec<f64>,
    r: Vec<f64>,
}

impl Convolution {
    fn zeros(n: usize, d: usize) -> Self {
        Convolution { p: vec![0.0; n * n * n], r: vec![0.0; n * d] }
    }

    fn add(&mut self, weight: f64, kg: &[f64], v: &[f64], grad_v: &[f64]) {
        let n = v.len();
        let d = grad_v.len() / n;
        for a in 0..n {
            for g in 0..n {
                let c = weight * kg[a * n + g];
                for b in 0..n {
                    self.p[(a * n + g) * n + b] += c * v[b];
                }
                for i in 0..d {
                    self.r[a * d + i] += c * grad_v[g * d + i];
                }
            }
        }
    }

    /// Reconstructs `grad_y U1` on the cell grid.
    fn field(&self, sample: &CellSample, n: usize, d: usize, cell_nodes: usize) -> Field {
        let mut out = Field::zeros(cell_nodes, d * n);
        let Some(f) = &sample.fields else {
            return out;
        };
        for y in 0..cell_nodes {
            let gd = f.grad_delta.node(y);
            let gw = f.grad_w.node(y);
            let o = out.node_mut(y);
            for j in 0..d {
                for a in 0..n {
                    let mut s = 0.0;
                    for g in 0..n {
                        for b in 0..n {
                            s += gd[(g * n + b) * d + j] * self.p[(a * n + g) * n + b];
                        }
                    }
                    let mut acc = sample.delta_scale * s;
                    for i in 0..d {
                        acc += gw[i * d + j] * self.r[a * d + i];
                    }
                    o[j * n + a] = acc;
                }
            }
        }
        out
    }
}

/// Evaluates `grad_y U1(t_n)` at one macro node by trapezoid quadrature of the
/// Duhamel integral over the stored history `(v(t_k), grad v(t_k))`, `k = 0..=n`.
pub fn nonlocal_corrector(
    kernel: &MemoryKernel,
    node: usize,
    history: &[(Vec<f64>, Vec<f64>)],
    sample: &CellSample,
    cell: &CellGrid,
) -> Result<Field> {
    let n = kernel.size;
    let d = cell.dim();
    let steps = history.len().saturating_sub(1);
    if steps > kernel.steps() {
        return Err(Error::NonLocal(format!("history of {steps} steps exceeds the kernel length {}", kernel.steps())));
    }
    let mut conv = Convolution::zeros(n, d);
    for (k, (v, gv)) in history.iter().enumerate() {
        let w = trapezoid_weight(k, steps, kernel.dt);
        if w == 0.0 {
            continue;
        }
        let kg = nodal::matmul(n, kernel.at(steps - k, node), &sample.g);
        conv.add(w, &kg, v, gv);
    }
    Ok(conv.field(sample, n, d, cell.num_nodes()))
}

fn trapezoid_weight(k: usize, steps: usize, dt: f64) -> f64 {
    if steps == 0 {
        0.0
    } else if k == 0 || k == steps {
        0.5 * dt
    } else {
        dt
    }
}

fn rel_diff(new: &[f64], old: &[f64]) -> f64 {
    let scale = new.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    new.iter().zip(old).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / scale
}

/// Runs the upscaled system. The cell table must hold every step time when
/// its coefficients depend on time.
pub fn run_macro(
    set: &CoefficientSet,
    table: &CellTable,
    grid: &MacroGrid,
    time: &TimeConfig,
    opts: &SolverOptions,
    mode: CorrectorMode,
) -> Result<MacroTrajectory> {
    use CoefficientId::{D, E, G, L};
    let steps = time.steps()?;
    let (d, n) = (set.dim(), set.size());
    let cell = table.cell;
    let cn = cell.num_nodes();
    let nodes = grid.num_nodes();
    let with_corrector = table.has_correctors() && set.y_dependent(CoefficientId::J);
    let kernel = match (mode, with_corrector) {
        (CorrectorMode::Nonlocal, true) => {
            if set.any_t_dependent(&[L, G, E, D]) {
                return Err(Error::NonLocal("L, G, E and D must be time-constant; use the stepped corrector".into()));
            }
            Some(MemoryKernel::new(set, grid, time.dt, steps)?)
        }
        _ => None,
    };

    let mut ell = MacroElliptic::new(set, table, *grid, opts.clone())?;
    let u0 = Field::from_fn(grid, n, |x, o| set.sample_macro(CoefficientId::UStar, 0.0, x, o));
    let g0 = with_corrector.then(|| vec![Field::zeros(cn, d * n); nodes]);
    let mem0 = Field::zeros(nodes, n);
    let v0 = ell.solve(0.0, &u0, None)?;
    let mut state = MacroState { t: 0.0, u: u0, v: v0, grad_uy: g0, memory: mem0 };
    let mut traj = MacroTrajectory {
        grid: *grid,
        cell,
        time: time.clone(),
        mode,
        states: vec![state.clone()],
        picard_iterations: Vec::with_capacity(steps),
    };
    // (v, grad v) per node and step, for the convolution.
    let mut history: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); nodes];
    if kernel.is_some() {
        let grad = fd_gradient(grid, &state.v);
        for (k, h) in history.iter_mut().enumerate() {
            h.push((state.v.node(k).to_vec(), grad.node(k).to_vec()));
        }
    }

    let l_dep = set.any_t_dependent(&[L, G]);
    let mut ode: Option<OdeOperator> = None;
    let nn = n * n;
    let mut lhs_inv = vec![0.0; nodes * nn];
    for step in 0..steps {
        let t_prev = time.time(step);
        let t_next = time.time(step + 1);
        let ti = table.time_index(t_next)?;
        if ode.is_none() || l_dep {
            ode = Some(OdeOperator::new(set, grid, t_prev, time.dt, time.scheme)?);
            if with_corrector {
                let mut l = vec![0.0; nn];
                for k in 0..nodes {
                    let p = grid.point(k);
                    set.sample_macro(L, t_next, &p[..d], &mut l);
                    let inv = nodal::invert(n, &nodal::identity_plus(n, time.dt, &l))
                        .ok_or(Error::Step { t: t_next, dt: time.dt, node: k })?;
                    lhs_inv[k * nn..(k + 1) * nn].copy_from_slice(&inv);
                }
            }
        }
        let op = ode.as_ref().unwrap();

        // History part of the convolution (k < step + 1) is fixed during the Picard loop.
        let partial: Option<Vec<Convolution>> = kernel.as_ref().map(|ker| {
            (0..nodes)
                .into_par_iter()
                .map(|k| {
                    let sample = table.node(ti, k);
                    let mut conv = Convolution::zeros(n, d);
                    let total = step + 1;
                    for (m, (v, gv)) in history[k].iter().enumerate() {
                        let w = trapezoid_weight(m, total, time.dt);
                        let kg = nodal::matmul(n, ker.at(total - m, k), &sample.g);
                        conv.add(w, &kg, v, gv);
                    }
                    conv
                })
                .collect()
        });

        let corrector = |v: &Field| -> Option<Vec<Field>> {
            if !with_corrector {
                return None;
            }
            let grad = fd_gradient(grid, v);
            let prev = state.grad_uy.as_ref().unwrap();
            Some(
                (0..nodes)
                    .into_par_iter()
                    .map(|k| {
                        let sample = table.node(ti, k);
                        match &partial {
                            Some(parts) => {
                                let mut conv = parts[k].clone();
                                conv.add(0.5 * time.dt, &sample.g, v.node(k), grad.node(k));
                                conv.field(sample, n, d, cn)
                            }
                            None => corrector_update(
                                sample,
                                &lhs_inv[k * nn..(k + 1) * nn],
                                &prev[k],
                                v.node(k),
                                grad.node(k),
                                time.dt,
                            ),
                        }
                    })
                    .collect(),
            )
        };

        let mut u_it = state.u.clone();
        let mut g_it = state.grad_uy.clone();
        let mut mem_it = state.memory.clone();
        let mut hist = Vec::new();
        let mut converged = None;
        for it in 1..=opts.picard_max.max(1) {
            let v = ell.solve(t_next, &u_it, with_corrector.then_some(&mem_it))?;
            let u_new = op.apply(&state.u, &state.v, &v);
            let g_new = corrector(&v);
            let mem_new = match &g_new {
                Some(g) => ell.memory(t_next, g),
                None => Field::zeros(nodes, n),
            };
            let diff = rel_diff(&u_new.values, &u_it.values).max(rel_diff(&mem_new.values, &mem_it.values));
            hist.push(diff);
            u_it = u_new;
            g_it = g_new;
            mem_it = mem_new;
            if !u_it.is_finite() {
                break;
            }
            if diff <= opts.picard_tol {
                converged = Some(it);
                break;
            }
        }
        let Some(iters) = converged else {
            return Err(Error::Picard { t: t_next, history: hist });
        };
        let v = ell.solve(t_next, &u_it, with_corrector.then_some(&mem_it))?;
        if kernel.is_some() {
            let grad = fd_gradient(grid, &v);
            for (k, h) in history.iter_mut().enumerate() {
                h.push((v.node(k).to_vec(), grad.node(k).to_vec()));
            }
        }
        state = MacroState { t: t_next, u: u_it, v, grad_uy: g_it, memory: mem_it };
        traj.picard_iterations.push(iters);
        if time.records(step + 1, steps) {
            traj.states.push(state.clone());
        }
    }
    Ok(traj)
}

/// All step times `0, dt, ..., T` (for building a time-dependent cell table).
pub fn step_times(time: &TimeConfig) -> Result<Vec<f64>> {
    Ok((0..=time.steps()?).map(|k| time.time(k)).collect())
}
