//! Numerical certificates: the a-priori energy estimate, the eps-uniform
//! bound, micro/macro convergence and manufactured-solution orders.
//!
//! # Energy constants
//!
//! Testing the elliptic equation with `V` gives
//! `sum m ||V||^2 + sum e ||d_i V||^2 + (D V, grad V) = (H + K U + J grad U, V)`.
//! With `m_a- = 1/sup(1/m_a)`, `e_i- = 1/sup(1/e_i)` and
//! `Q = sum_{i,a,b} sup|D_iab|^2 / (e_i- m_b-)`, Cauchy-Schwarz and Young give
//! `|(D V, grad V)| <= sqrt(q) (sum m- ||V||^2 + sum e- ||d V||^2)` with
//! `q = Q/4`, and `q < 1` under the drift bound. Splitting the right side into
//! `1 + N + dN` products per component with weights
//! `eta_a = (1 - sqrt q) m_a- / (1 + N + dN)` yields
//!
//! ```text
//! mt_a = (1 - sqrt q) m_a- / 2,    et_i = (1 - sqrt q) e_i-,
//! Ht = sum_a sup|H_a|^2 / (2 eta_a),
//! Kt_b = sum_a sup|K_ab|^2 / (2 eta_a),   Jt_ib = sum_a sup|J_iab|^2 / (2 eta_a),
//! ```
//!
//! and `sum mt ||V||^2 + sum et ||d_i V||^2 <= Ht + sum Kt ||U||^2 + sum Jt ||d_i U||^2`.
//! The finite-volume scheme satisfies the same identity with face-difference
//! norms, so the inequality is checked on the discrete trajectory.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::cell::{cell_sweep, solve_cell};
use crate::coefficients::{validate_assumptions, CoefficientBounds, CoefficientId, CoefficientSet, SamplingGrid, TensorField};
use crate::discretization::{fd_gradient, CellGrid, Field, Grid, MacroGrid};
use crate::error::{Error, Result};
use crate::micro::{run_micro, MicroTrajectory};
use crate::nodal;
use crate::stepping::{SolverOptions, TimeConfig};
use crate::upscaled::{run_macro, step_times, CorrectorMode};

/// Smallest value any derived constant may take.
pub const CONSTANT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyConstants {
    pub m_tilde: Vec<f64>,
    pub e_tilde: Vec<f64>,
    pub h_tilde: f64,
    pub k_tilde: Vec<f64>,
    /// Layout `[i][beta]`.
    pub j_tilde: Vec<f64>,
    /// `q = Q/4`; the derivation needs `q < 1`.
    pub q: f64,
}

#[derive(Debug, Clone)]
pub enum ConstantsSource {
    Derived(SamplingGrid),
    Supplied(EnergyConstants),
}

/// Constants of the energy estimate from sampled coefficient bounds.
///
/// Returns a domain error when the sampled bounds violate positivity or the
/// drift bound, since the splitting then has no positive left side.
pub fn derive_constants(set: &CoefficientSet, grid: &SamplingGrid) -> Result<EnergyConstants> {
    let b = CoefficientBounds::sample(set, grid);
    let (d, n) = (set.dim(), set.size());
    if !b.positive_ok {
        return Err(Error::Domain("M or E is not positive on the sampling grid".into()));
    }
    let m_lo: Vec<f64> = b.inv_m_sup.iter().map(|v| 1.0 / v).collect();
    let e_lo: Vec<f64> = b.inv_e_sup.iter().map(|v| 1.0 / v).collect();
    let mut big_q = 0.0;
    for i in 0..d {
        for a in 0..n {
            for bb in 0..n {
                let s = b.d_sup[(i * n + a) * n + bb];
                big_q += s * s / (e_lo[i] * m_lo[bb]);
            }
        }
    }
    let q = big_q / 4.0;
    if q >= 1.0 {
        return Err(Error::Domain(format!("drift too large for the energy splitting (q = {q:.4})")));
    }
    let c = 1.0 - q.sqrt();
    let terms = (1 + n + d * n) as f64;
    let eta: Vec<f64> = m_lo.iter().map(|m| c * m / terms).collect();
    let floor = |v: f64| v.max(CONSTANT_FLOOR);
    let h_tilde = floor((0..n).map(|a| b.h_sup[a].powi(2) / (2.0 * eta[a])).sum());
    let k_tilde = (0..n)
        .map(|bb| floor((0..n).map(|a| b.k_sup[a * n + bb].powi(2) / (2.0 * eta[a])).sum()))
        .collect();
    let mut j_tilde = vec![0.0; d * n];
    for i in 0..d {
        for bb in 0..n {
            j_tilde[i * n + bb] = floor((0..n).map(|a| b.j_sup[(i * n + a) * n + bb].powi(2) / (2.0 * eta[a])).sum());
        }
    }
    Ok(EnergyConstants {
        m_tilde: m_lo.iter().map(|m| floor(c * m / 2.0)).collect(),
        e_tilde: e_lo.iter().map(|e| floor(c * e)).collect(),
        h_tilde,
        k_tilde,
        j_tilde,
        q,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub times: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub pass: Vec<bool>,
    /// `None` when the constants could not be derived.
    pub constants: Option<EnergyConstants>,
    pub note: Option<String>,
}

impl EnergyReport {
    pub fn passes(&self) -> bool {
        self.constants.is_some() && self.pass.iter().all(|&p| p)
    }

    /// Smallest `right - left` over time.
    pub fn min_margin(&self) -> f64 {
        self.left.iter().zip(&self.right).map(|(l, r)| r - l).fold(f64::INFINITY, f64::min)
    }
}

/// `sum_{i-faces} h^d ((w(k+e_i) - w(k))/h)^2` per axis and component, layout `[i][alpha]`.
fn face_gradient_sq<G: Grid + ?Sized>(grid: &G, w: &Field) -> Vec<f64> {
    let (d, n) = (grid.dim(), w.ncomp);
    let h = grid.h();
    let vol = h.powi(d as i32);
    let mut out = vec![0.0; d * n];
    for k in 0..grid.num_nodes() {
        for i in 0..d {
            if let Some(kp) = grid.neighbor(k, i, true) {
                for a in 0..n {
                    let g = (w.get(kp, a) - w.get(k, a)) / h;
                    out[i * n + a] += vol * g * g;
                }
            }
        }
    }
    out
}

/// Per-component `sum_k weight_k w_k^2`.
fn component_sq(weights: &[f64], w: &Field) -> Vec<f64> {
    let n = w.ncomp;
    let mut out = vec![0.0; n];
    for (k, wk) in weights.iter().enumerate() {
        for (a, o) in out.iter_mut().enumerate() {
            *o += wk * w.get(k, a).powi(2);
        }
    }
    out
}

/// Evaluates both sides of the energy estimate at every recorded state.
pub fn energy_certificate(set: &CoefficientSet, traj: &MicroTrajectory, constants: ConstantsSource) -> EnergyReport {
    let (constants, note) = match constants {
        ConstantsSource::Supplied(c) => (Some(c), None),
        ConstantsSource::Derived(g) => match derive_constants(set, &g) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        },
    };
    let grid = &traj.grid;
    let (d, n) = (grid.dim(), set.size());
    let vol = grid.h().powi(d as i32);
    let node_w: Vec<f64> = (0..grid.num_nodes()).map(|_| vol).collect();
    let trap = grid.weights();
    let mut report = EnergyReport { times: vec![], left: vec![], right: vec![], pass: vec![], constants: None, note };
    for s in &traj.states {
        let v2 = component_sq(&node_w, &s.v);
        let dv2 = face_gradient_sq(grid, &s.v);
        let u2 = component_sq(&trap, &s.u);
        let gu = fd_gradient(grid, &s.u);
        // reorder [beta][i] -> [i][beta]
        let mut gu_t = Field::zeros(grid.num_nodes(), d * n);
        for k in 0..grid.num_nodes() {
            for b in 0..n {
                for i in 0..d {
                    gu_t.values[k * d * n + i * n + b] = gu.get(k, b * d + i);
                }
            }
        }
        let du2 = component_sq(&trap, &gu_t);
        let (left, right) = match &constants {
            Some(c) => {
                let left: f64 = (0..n).map(|a| c.m_tilde[a] * v2[a]).sum::<f64>()
                    + (0..d).flat_map(|i| (0..n).map(move |a| (i, a))).map(|(i, a)| c.e_tilde[i] * dv2[i * n + a]).sum::<f64>();
                let right = c.h_tilde
                    + (0..n).map(|b| c.k_tilde[b] * u2[b]).sum::<f64>()
                    + (0..d * n).map(|ib| c.j_tilde[ib] * du2[ib]).sum::<f64>();
                (left, right)
            }
            None => (f64::NAN, f64::NAN),
        };
        report.times.push(s.t);
        report.left.push(left);
        report.right.push(right);
        report.pass.push(left <= right);
    }
    report.constants = constants;
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformBoundRow {
    pub eps: f64,
    /// `||U||_{H^1((0,T) x Omega)}`.
    pub u_h1: f64,
    /// `max_t ||V(t)||_{H^1}`.
    pub v_linf_h1: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformBoundTable {
    pub rows: Vec<UniformBoundRow>,
    /// `max / min` of the composite norm (1 when all norms vanish).
    pub ratio: f64,
}

/// Discrete `||U||_{H^1((0,T) x Omega)} + ||V||_{L^inf(H^1)}` of one run.
pub fn composite_norm(traj: &MicroTrajectory) -> UniformBoundRow {
    let grid = &traj.grid;
    let trap = grid.weights();
    let h1_sq = |f: &Field| -> f64 {
        component_sq(&trap, f).iter().sum::<f64>() + face_gradient_sq(grid, f).iter().sum::<f64>()
    };
    let states = &traj.states;
    let spatial: Vec<f64> = states.iter().map(|s| h1_sq(&s.u)).collect();
    let mut u_sq = 0.0;
    for m in 1..states.len() {
        let dt = states[m].t - states[m - 1].t;
        u_sq += 0.5 * dt * (spatial[m] + spatial[m - 1]);
        let du = states[m].u.sub(&states[m - 1].u);
        u_sq += component_sq(&trap, &du).iter().sum::<f64>() / dt;
    }
    let v_max = states.iter().map(|s| h1_sq(&s.v).sqrt()).fold(0.0, f64::max);
    let u_h1 = u_sq.sqrt();
    UniformBoundRow { eps: traj.eps, u_h1, v_linf_h1: v_max, composite: u_h1 + v_max }
}

/// Composite norms across an eps sweep, sorted by decreasing eps.
pub fn uniform_bound_check(runs: &[MicroTrajectory]) -> UniformBoundTable {
    let mut rows: Vec<UniformBoundRow> = runs.iter().map(composite_norm).collect();
    rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let max = rows.iter().map(|r| r.composite).fold(0.0, f64::max);
    let min = rows.iter().map(|r| r.composite).fold(f64::INFINITY, f64::min);
    let ratio = if rows.is_empty() || max == 0.0 { 1.0 } else { max / min };
    UniformBoundTable { rows, ratio }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub micro_n: usize,
    pub macro_n: usize,
    pub dt: f64,
    pub err_u: f64,
    pub err_v: f64,
    /// Composite norm of the micro run.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log err_u` against `log eps`.
    pub rate_u: f64,
    pub rate_v: f64,
}

impl ConvergenceTable {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].err_u < w[0].err_u)
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_rate(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(sx, sy), (a, b)| (sx + a / m, sy + b / m));
    let sxy: f64 = pts.iter().map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = pts.iter().map(|(a, _)| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// `L^2(0,T)` norm of a per-time series by the trapezoid rule.
pub fn time_l2(series: &[(f64, f64)]) -> f64 {
    series
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1.powi(2) + w[1].1.powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Minimum micro nodes per period.
pub const MIN_NODES_PER_PERIOD: usize = 8;

/// Checks resolution of every eps before any solve.
pub fn check_resolution(eps_list: &[f64], micro: &MacroGrid) -> Result<()> {
    for &eps in eps_list {
        let per = eps * (micro.n() - 1) as f64;
        if per + 1e-9 < MIN_NODES_PER_PERIOD as f64 {
            return Err(Error::UnderResolved { eps, nodes_per_period: per, required: MIN_NODES_PER_PERIOD });
        }
    }
    Ok(())
}

/// `sqrt(int_0^T ||a - b||^2 dt)` on the coarse grid, trapezoid in time.
fn space_time_error(coarse: &MacroGrid, fine: &MacroGrid, fine_fields: &[(f64, &Field)], coarse_fields: &[&Field]) -> f64 {
    let w = coarse.weights();
    let per_time: Vec<f64> = fine_fields
        .iter()
        .zip(coarse_fields)
        .map(|((_, f), c)| {
            let n = c.ncomp;
            (0..coarse.num_nodes())
                .map(|k| {
                    let kf = fine.restrict_index(coarse, k);
                    w[k] * (0..n).map(|a| (f.get(kf, a) - c.get(k, a)).powi(2)).sum::<f64>()
                })
                .sum()
        })
        .collect();
    let mut acc = 0.0;
    for m in 1..per_time.len() {
        acc += 0.5 * (fine_fields[m].0 - fine_fields[m - 1].0) * (per_time[m] + per_time[m - 1]);
    }
    acc.sqrt()
}

#[derive(Debug, Clone)]
pub struct ConvergenceSetup {
    pub eps: Vec<f64>,
    pub micro: MacroGrid,
    pub macro_grid: MacroGrid,
    pub cell: CellGrid,
    pub time: TimeConfig,
    pub opts: SolverOptions,
    pub mode: CorrectorMode,
}

/// Runs the fine-scale solver at every eps and the upscaled solver once and
/// compares them on the macro grid.
pub fn micro_macro_convergence(set: &CoefficientSet, setup: &ConvergenceSetup) -> Result<ConvergenceTable> {
    check_resolution(&setup.eps, &setup.micro)?;
    if !setup.micro.contains(&setup.macro_grid) {
        return Err(Error::Domain(format!(
            "micro grid n = {} does not contain macro grid n = {}",
            setup.micro.n(),
            setup.macro_grid.n()
        )));
    }
    let times = step_times(&setup.time)?;
    let table = cell_sweep(set, &setup.macro_grid, &times, &setup.cell, &setup.opts)?;
    let mac = run_macro(set, &table, &setup.macro_grid, &setup.time, &setup.opts, setup.mode)?;
    let runs: Vec<Result<MicroTrajectory>> =
        setup.eps.par_iter().map(|&eps| run_micro(set, eps, &setup.micro, &setup.time, &setup.opts)).collect();
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let run = run?;
        let fine_u: Vec<(f64, &Field)> = run.states.iter().map(|s| (s.t, &s.u)).collect();
        let fine_v: Vec<(f64, &Field)> = run.states.iter().map(|s| (s.t, &s.v)).collect();
        let cu: Vec<&Field> = mac.states.iter().map(|s| &s.u).collect();
        let cv: Vec<&Field> = mac.states.iter().map(|s| &s.v).collect();
        rows.push(ConvergenceRow {
            eps: run.eps,
            micro_n: setup.micro.n(),
            macro_n: setup.macro_grid.n(),
            dt: setup.time.dt,
            err_u: space_time_error(&setup.macro_grid, &setup.micro, &fine_u, &cu),
            err_v: space_time_error(&setup.macro_grid, &setup.micro, &fine_v, &cv),
            bound: composite_norm(&run).composite,
        });
    }
    rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let eu: Vec<f64> = rows.iter().map(|r| r.err_u).collect();
    let ev: Vec<f64> = rows.iter().map(|r| r.err_v).collect();
    Ok(ConvergenceTable { rate_u: fit_rate(&eps, &eu), rate_v: fit_rate(&eps, &ev), rows })
}

// ---------------------------------------------------------------------------
// Manufactured solutions

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ManufacturedSolver {
    Micro { eps: f64 },
    /// Upscaled solver with effective tensors from cell problems on `cell`.
    Macro { cell: CellGrid },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManufacturedStudy {
    pub solver: ManufacturedSolver,
    /// Macro grid sizes of the spatial study (coarse to fine).
    pub grids: Vec<usize>,
    /// Time step of the spatial study (the solution is linear in time).
    pub spatial_dt: f64,
    /// Time steps of the temporal study (coarse to fine).
    pub dts: Vec<f64>,
    /// Grid of the temporal study.
    pub temporal_grid: usize,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub step: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderReport {
    pub spatial: Vec<RateRow>,
    pub spatial_order: f64,
    pub temporal: Vec<RateRow>,
    pub temporal_order: f64,
}

#[derive(Debug, Clone, Copy)]
enum TimeProfile {
    Linear,
    Decay,
}

impl TimeProfile {
    fn phi(self, t: f64) -> f64 {
        match self {
            TimeProfile::Linear => 1.0 + t,
            TimeProfile::Decay => (-t).exp(),
        }
    }

    fn dphi(self, t: f64) -> f64 {
        match self {
            TimeProfile::Linear => 1.0,
            TimeProfile::Decay => -(-t).exp(),
        }
    }
}

fn amplitude(a: usize) -> f64 {
    1.0 + 0.5 * a as f64
}

fn bump(x: &[f64]) -> f64 {
    x.iter().map(|&xi| (std::f64::consts::PI * xi).sin()).product()
}

fn bump_grad(x: &[f64], i: usize) -> f64 {
    use std::f64::consts::PI;
    x.iter()
        .enumerate()
        .map(|(k, &xk)| if k == i { PI * (PI * xk).cos() } else { (PI * xk).sin() })
        .product()
}

/// Coefficient view used by the forcing: the eps-trace or the effective values.
struct Effective<'a> {
    set: &'a CoefficientSet,
    solver: ManufacturedSolver,
    opts: &'a SolverOptions,
    cache: &'a EffectiveCache,
}

/// Effective tensors keyed by `(t, x)` bit patterns.
type EffectiveCache = Mutex<HashMap<(u64, [u64; 2]), (Vec<f64>, Vec<f64>)>>;

impl Effective<'_> {
    fn nodal(&self, id: CoefficientId, t: f64, x: &[f64]) -> Vec<f64> {
        match self.solver {
            ManufacturedSolver::Micro { eps } => {
                let mut out = vec![0.0; self.set.field(id).len()];
                self.set.eps_trace_into(id, t, x, eps, &mut out);
                out
            }
            ManufacturedSolver::Macro { cell } => self.set.y_average_unchecked(id, t, x, cell.n(), 0.0),
        }
    }

    /// `(diffusion along axis, drift block along axis)`.
    fn flux(&self, axis: usize, t: f64, x: &[f64]) -> (f64, Vec<f64>) {
        let (d, n) = (self.set.dim(), self.set.size());
        let nn = n * n;
        match self.solver {
            ManufacturedSolver::Micro { .. } => {
                let e = self.nodal(CoefficientId::E, t, x);
                let dr = self.nodal(CoefficientId::D, t, x);
                (e[axis * d + axis], dr[axis * nn..(axis + 1) * nn].to_vec())
            }
            ManufacturedSolver::Macro { cell } => {
                let t_key = if self.set.any_t_dependent(&[CoefficientId::E, CoefficientId::D]) { t.to_bits() } else { 0 };
                let key = (t_key, [x[0].to_bits(), x.get(1).map_or(0, |v| v.to_bits())]);
                let cached = self.cache.lock().expect("cache lock").get(&key).cloned();
                let (e_star, d_star) = match cached {
                    Some(v) => v,
                    None => {
                        let sol = solve_cell(self.set, t, x, cell, self.opts).expect("cell problem solvable");
                        let v = (sol.e_star, sol.d_star);
                        self.cache.lock().expect("cache lock").insert(key, v.clone());
                        v
                    }
                };
                (e_star[axis * d + axis], d_star[axis * nn..(axis + 1) * nn].to_vec())
            }
        }
    }
}

/// `H` making `U = phi(t) a_alpha prod sin(pi x_i)` an exact solution.
fn manufactured_forcing(eff: &Effective, profile: TimeProfile, t: f64, x: &[f64]) -> Vec<f64> {
    use CoefficientId::*;
    let set = eff.set;
    let (d, n) = (set.dim(), set.size());
    let mut l = vec![0.0; n * n];
    let mut g = vec![0.0; n * n];
    let exact_v = |t: f64, x: &[f64], out: &mut [f64], l: &mut [f64], g: &mut [f64]| {
        set.sample_macro(L, t, x, l);
        set.sample_macro(G, t, x, g);
        let s = bump(x);
        let u: Vec<f64> = (0..n).map(|a| profile.phi(t) * amplitude(a) * s).collect();
        let ut: Vec<f64> = (0..n).map(|a| profile.dphi(t) * amplitude(a) * s).collect();
        let mut rhs = vec![0.0; n];
        nodal::matvec(n, l, &u, &mut rhs);
        for a in 0..n {
            rhs[a] += ut[a];
        }
        let ginv = nodal::invert(n, g).expect("G invertible");
        nodal::matvec(n, &ginv, &rhs, out);
    };
    let grad_v = |x: &[f64], i: usize, l: &mut [f64], g: &mut [f64]| -> Vec<f64> {
        // V is linear in the bump and its gradient when L, G do not vary in x locally;
        // use a central difference to stay general.
        let eta = 1e-5;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += eta;
        xm[i] -= eta;
        let (mut vp, mut vm) = (vec![0.0; n], vec![0.0; n]);
        exact_v(t, &xp, &mut vp, l, g);
        exact_v(t, &xm, &mut vm, l, g);
        (0..n).map(|a| (vp[a] - vm[a]) / (2.0 * eta)).collect()
    };
    let flux = |x: &[f64], i: usize, l: &mut [f64], g: &mut [f64]| -> Vec<f64> {
        let (a, b) = eff.flux(i, t, x);
        let mut v = vec![0.0; n];
        exact_v(t, x, &mut v, l, g);
        let gv = grad_v(x, i, l, g);
        (0..n).map(|al| a * gv[al] + (0..n).map(|be| b[al * n + be] * v[be]).sum::<f64>()).collect()
    };
    let mut out = vec![0.0; n];
    let mut v = vec![0.0; n];
    exact_v(t, x, &mut v, &mut l, &mut g);
    let m = eff.nodal(M, t, x);
    nodal::matvec(n, &m, &v, &mut out);
    // Fourth-order central difference of the flux divergence.
    let eta = 1e-3;
    for i in 0..d {
        let mut pts = Vec::new();
        for s in [-2.0, -1.0, 1.0, 2.0] {
            let mut xs = x.to_vec();
            xs[i] += s * eta;
            pts.push(flux(&xs, i, &mut l, &mut g));
        }
        for a in 0..n {
            let div = (pts[0][a] - 8.0 * pts[1][a] + 8.0 * pts[2][a] - pts[3][a]) / (12.0 * eta);
            out[a] -= div;
        }
    }
    let k = eff.nodal(K, t, x);
    let j = eff.nodal(J, t, x);
    let s = bump(x);
    for a in 0..n {
        for b in 0..n {
            let ub = profile.phi(t) * amplitude(b);
            out[a] -= k[a * n + b] * ub * s;
            for i in 0..d {
                out[a] -= j[(i * n + a) * n + b] * ub * bump_grad(x, i);
            }
        }
    }
    out
}

fn manufactured_set(base: &CoefficientSet, solver: ManufacturedSolver, profile: TimeProfile, opts: &SolverOptions) -> Result<CoefficientSet> {
    let (d, n) = (base.dim(), base.size());
    let eff_set = base.clone();
    let solver_c = solver;
    let opts_c = opts.clone();
    let cache = EffectiveCache::default();
    // The forcing ignores the cell variable.
    let h = TensorField::custom(vec![n], false, true, move |t, x, _, out| {
        let eff = Effective { set: &eff_set, solver: solver_c, opts: &opts_c, cache: &cache };
        out.copy_from_slice(&manufactured_forcing(&eff, profile, t, x));
    });
    let ustar = TensorField::custom(vec![n], false, false, move |_, x, _, out| {
        let s = bump(&x[..d]);
        for (a, o) in out.iter_mut().enumerate() {
            *o = profile.phi(0.0) * amplitude(a) * s;
        }
    });
    base.clone().with(CoefficientId::H, h)?.with(CoefficientId::UStar, ustar)
}

fn manufactured_error(
    set: &CoefficientSet,
    solver: ManufacturedSolver,
    profile: TimeProfile,
    grid_n: usize,
    time: &TimeConfig,
    opts: &SolverOptions,
) -> Result<f64> {
    let grid = MacroGrid::new(set.dim(), grid_n)?;
    let n = set.size();
    let u_final = match solver {
        ManufacturedSolver::Micro { eps } => run_micro(set, eps, &grid, time, opts)?.states.pop().unwrap().u,
        ManufacturedSolver::Macro { cell } => {
            let table = cell_sweep(set, &grid, &step_times(time)?, &cell, opts)?;
            run_macro(set, &table, &grid, time, opts, CorrectorMode::Stepped)?.states.pop().unwrap().u
        }
    };
    let t = time.t_end;
    let exact = Field::from_fn(&grid, n, |x, o| {
        for (a, v) in o.iter_mut().enumerate() {
            *v = profile.phi(t) * amplitude(a) * bump(x);
        }
    });
    Ok(u_final.sub(&exact).l2_norm(&grid))
}

/// Observed spatial and temporal orders against a manufactured solution
/// `U = phi(t) a_alpha prod_i sin(pi x_i)`, `V = G^{-1}(dU/dt + L U)`.
///
/// The spatial study uses `phi = 1 + t` (implicit Euler is exact in time);
/// the temporal study uses `phi = exp(-t)`. `H` and `U*` of `set` are replaced.
/// The upscaled study needs `J` without cell dependence.
pub fn manufactured_orders(set: &CoefficientSet, study: &ManufacturedStudy, opts: &SolverOptions) -> Result<OrderReport> {
    if let ManufacturedSolver::Macro { .. } = study.solver {
        if set.y_dependent(CoefficientId::J) {
            return Err(Error::Domain("upscaled manufactured study needs J without cell dependence".into()));
        }
    }
    let lin = manufactured_set(set, study.solver, TimeProfile::Linear, opts)?;
    let time = TimeConfig::new(study.spatial_dt, study.t_end);
    let spatial: Vec<RateRow> = study
        .grids
        .par_iter()
        .map(|&n| {
            let error = manufactured_error(&lin, study.solver, TimeProfile::Linear, n, &time, opts)?;
            Ok(RateRow { step: 1.0 / (n - 1) as f64, error })
        })
        .collect::<Result<_>>()?;
    let dec = manufactured_set(set, study.solver, TimeProfile::Decay, opts)?;
    let temporal: Vec<RateRow> = study
        .dts
        .par_iter()
        .map(|&dt| {
            let time = TimeConfig::new(dt, study.t_end);
            let error = manufactured_error(&dec, study.solver, TimeProfile::Decay, study.temporal_grid, &time, opts)?;
            Ok(RateRow { step: dt, error })
        })
        .collect::<Result<_>>()?;
    let order = |rows: &[RateRow]| {
        let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.step, r.error)).unzip();
        fit_rate(&x, &y)
    };
    Ok(OrderReport { spatial_order: order(&spatial), temporal_order: order(&temporal), spatial, temporal })
}

/// Default sampling grid for derived constants and assumption checks.
pub fn default_sampling(t_end: f64) -> SamplingGrid {
    SamplingGrid::uniform(t_end, 5, 17, 64)
}

/// Convenience: assumptions pass on the default grid.
pub fn assumptions_hold(set: &CoefficientSet, t_end: f64) -> bool {
    validate_assumptions(set, &default_sampling(t_end)).passes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{ScalarFamily, YProfile};
    use std::f64::consts::PI;

    fn periodic(mean: f64, amp: f64) -> ScalarFamily {
        ScalarFamily::Periodic(YProfile { mean, amp, k: vec![1], phase: 0.0 })
    }

    fn oscillatory() -> CoefficientSet {
        let f1 = |f: ScalarFamily| TensorField::from_families(vec![1, 1], vec![f]).unwrap();
        let f3 = |f: ScalarFamily| TensorField::from_families(vec![1, 1, 1], vec![f]).unwrap();
        CoefficientSet::new(1, 1)
            .unwrap()
            .with(CoefficientId::E, f1(periodic(2.0, 1.0)))
            .unwrap()
            .with(CoefficientId::D, f3(periodic(0.2, 0.5)))
            .unwrap()
            .with(CoefficientId::K, f1(ScalarFamily::Constant { value: 0.5 }))
            .unwrap()
            .with(CoefficientId::J, f3(periodic(0.3, 0.3)))
            .unwrap()
            .with(CoefficientId::L, TensorField::constant(vec![1, 1], &[1.0]).unwrap())
            .unwrap()
            .with(CoefficientId::UStar, TensorField::custom(vec![1], false, false, |_, x, _, o| o[0] = (PI * x[0]).sin()))
            .unwrap()
    }

    #[test]
    fn drift_bound_examples_for_constants() {
        let set = CoefficientSet::new(1, 1).unwrap().with(CoefficientId::D, TensorField::constant(vec![1, 1, 1], &[1.0]).unwrap()).unwrap();
        let c = derive_constants(&set, &default_sampling(1.0)).unwrap();
        assert!((c.q - 0.25).abs() < 1e-15);
        assert!((c.m_tilde[0] - 0.25).abs() < 1e-15);
        assert!((c.e_tilde[0] - 0.5).abs() < 1e-15);
        assert!(c.h_tilde >= CONSTANT_FLOOR);
        let bad = CoefficientSet::new(1, 1).unwrap().with(CoefficientId::D, TensorField::constant(vec![1, 1, 1], &[3.0]).unwrap()).unwrap();
        assert!(derive_constants(&bad, &default_sampling(1.0)).is_err());
    }

    #[test]
    fn zero_run_certificate() {
        let set = CoefficientSet::new(1, 1).unwrap();
        let grid = MacroGrid::new(1, 9).unwrap();
        let traj = run_micro(&set, 0.25, &grid, &TimeConfig::new(0.1, 0.3), &SolverOptions::default()).unwrap();
        let rep = energy_certificate(&set, &traj, ConstantsSource::Derived(default_sampling(0.3)));
        assert!(rep.passes());
        assert!(rep.left.iter().all(|&l| l == 0.0));
        assert!(rep.right.iter().all(|&r| r > 0.0));
        let table = uniform_bound_check(&[traj]);
        assert_eq!(table.rows[0].composite, 0.0);
        assert_eq!(table.ratio, 1.0);
    }

    #[test]
    fn oscillatory_run_certificate_passes() {
        let set = oscillatory();
        let grid = MacroGrid::new(1, 65).unwrap();
        let traj = run_micro(&set, 0.125, &grid, &TimeConfig::new(0.05, 0.5), &SolverOptions::default()).unwrap();
        let rep = energy_certificate(&set, &traj, ConstantsSource::Derived(default_sampling(0.5)));
        assert!(rep.passes(), "margin {}", rep.min_margin());
        assert!(rep.left.iter().any(|&l| l > 0.0));
    }

    #[test]
    fn y_constant_norms_do_not_depend_on_eps() {
        let set = CoefficientSet::new(1, 1)
            .unwrap()
            .with(CoefficientId::K, TensorField::constant(vec![1, 1], &[0.5]).unwrap())
            .unwrap()
            .with(CoefficientId::UStar, TensorField::custom(vec![1], false, false, |_, x, _, o| o[0] = (PI * x[0]).sin()))
            .unwrap();
        let grid = MacroGrid::new(1, 33).unwrap();
        let time = TimeConfig::new(0.1, 0.5);
        let runs: Vec<_> = [0.25, 0.125].iter().map(|&e| run_micro(&set, e, &grid, &time, &SolverOptions::default()).unwrap()).collect();
        let t = uniform_bound_check(&runs);
        assert!((t.ratio - 1.0).abs() < 1e-12);
        assert!(t.rows[0].eps > t.rows[1].eps);
    }

    #[test]
    fn rate_fit_recovers_power_law() {
        let x = [0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(2)).collect();
        assert!((fit_rate(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn time_l2_of_constant_series() {
        let s: Vec<(f64, f64)> = (0..5).map(|k| (0.25 * k as f64, 2.0)).collect();
        assert!((time_l2(&s) - 2.0).abs() < 1e-15);
        assert_eq!(time_l2(&s[..1]), 0.0);
    }

    #[test]
    fn under_resolved_eps_is_refused() {
        let micro = MacroGrid::new(1, 33).unwrap();
        assert!(check_resolution(&[0.25], &micro).is_ok());
        match check_resolution(&[0.25, 0.125], &micro) {
            Err(Error::UnderResolved { eps, required, .. }) => {
                assert_eq!(eps, 0.125);
                assert_eq!(required, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn micro_manufactured_orders() {
        let study = ManufacturedStudy {
            solver: ManufacturedSolver::Micro { eps: 0.5 },
            grids: vec![17, 33, 65],
            spatial_dt: 0.1,
            dts: vec![0.1, 0.05, 0.025],
            temporal_grid: 129,
            t_end: 0.4,
        };
        let rep = manufactured_orders(&oscillatory(), &study, &SolverOptions::default()).unwrap();
        assert!(rep.spatial_order >= 1.9, "{rep:?}");
        assert!(rep.temporal_order >= 0.9, "{rep:?}");
    }

    #[test]
    fn macro_manufactured_orders() {
        let set = oscillatory()
            .with(CoefficientId::J, TensorField::constant(vec![1, 1, 1], &[0.3]).unwrap())
            .unwrap();
        let study = ManufacturedStudy {
            solver: ManufacturedSolver::Macro { cell: CellGrid::new(1, 64).unwrap() },
            grids: vec![17, 33, 65],
            spatial_dt: 0.1,
            dts: vec![0.1, 0.05, 0.025],
            temporal_grid: 129,
            t_end: 0.4,
        };
        let rep = manufactured_orders(&set, &study, &SolverOptions::default()).unwrap();
        assert!(rep.spatial_order >= 1.9, "{rep:?}");
        assert!(rep.temporal_order >= 0.9, "{rep:?}");
        assert!(manufactured_orders(&oscillatory(), &study, &SolverOptions::default()).is_err());
    }

    #[test]
    fn micro_approaches_macro_as_eps_shrinks() {
        let setup = ConvergenceSetup {
            eps: vec![0.0625, 0.25, 0.125],
            micro: MacroGrid::new(1, 129).unwrap(),
            macro_grid: MacroGrid::new(1, 33).unwrap(),
            cell: CellGrid::new(1, 64).unwrap(),
            time: TimeConfig::new(0.1, 0.5),
            opts: SolverOptions::default(),
            mode: CorrectorMode::Stepped,
        };
        let table = micro_macro_convergence(&oscillatory(), &setup).unwrap();
        assert_eq!(table.rows.iter().map(|r| r.eps).collect::<Vec<_>>(), vec![0.25, 0.125, 0.0625]);
        assert!(table.strictly_decreasing(), "{table:?}");
        assert!(table.rate_u > 0.5, "{table:?}");
        let coarse = ConvergenceSetup { macro_grid: MacroGrid::new(1, 34).unwrap(), ..setup };
        assert!(matches!(micro_macro_convergence(&oscillatory(), &coarse), Err(Error::Domain(_))));
    }
}
