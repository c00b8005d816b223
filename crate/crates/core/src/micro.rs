//! Fine-scale solver for the split system at a fixed period `eps`:
//!
//! ```text
//! M V - div(E grad V + D V) = H + K U + J . grad U,   V = 0 on the boundary,
//! dU/dt + L U = G V,                                  U(0) = U*.
//! ```
//!
//! All coefficients are evaluated through their eps-trace `c(t, x, x/eps)`.

use crate::coefficients::{CoefficientId, CoefficientSet};
use crate::discretization::{apply_operator, Field, FluxCoefficients, Grid, MacroGrid};
use crate::error::{Error, Result};
use crate::nodal::{self, source_rhs, EllipticOperator};
use crate::stepping::{OdeOperator, SolverOptions, TimeConfig, TimeScheme};

#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    pub t: f64,
    pub u: Field,
    pub v: Field,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroTrajectory {
    pub eps: f64,
    pub grid: MacroGrid,
    pub time: TimeConfig,
    pub states: Vec<MicroState>,
    /// Picard iterations used per step.
    pub picard_iterations: Vec<usize>,
}

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("eps must be positive, got {eps}")))
    }
}

fn flux_at(set: &CoefficientSet, eps: f64, grid: &MacroGrid, t: f64) -> FluxCoefficients {
    use CoefficientId::{D, E};
    let (d, n) = (set.dim(), set.size());
    let nn = n * n;
    let mut e = vec![0.0; d * d];
    let mut dr = vec![0.0; d * nn];
    FluxCoefficients::sample(grid, n, true, |axis, x, a, block| {
        set.eps_trace_into(E, t, x, eps, &mut e);
        *a = e[axis * d + axis];
        set.eps_trace_into(D, t, x, eps, &mut dr);
        block.copy_from_slice(&dr[axis * nn..(axis + 1) * nn]);
    })
}

fn nodal_trace(set: &CoefficientSet, id: CoefficientId, eps: f64, grid: &MacroGrid, t: f64) -> Field {
    let len = set.field(id).len();
    Field::from_fn(grid, len, |x, out| set.eps_trace_into(id, t, x, eps, out))
}

struct Sources {
    t: f64,
    h: Field,
    k: Field,
    j: Field,
}

impl Sources {
    fn sample(set: &CoefficientSet, eps: f64, grid: &MacroGrid, t: f64) -> Self {
        use CoefficientId::{H, J, K};
        Sources {
            t,
            h: nodal_trace(set, H, eps, grid, t),
            k: nodal_trace(set, K, eps, grid, t),
            j: nodal_trace(set, J, eps, grid, t),
        }
    }
}

/// Elliptic half of the fine-scale system with cached factorization.
pub struct MicroElliptic<'a> {
    set: &'a CoefficientSet,
    eps: f64,
    grid: MacroGrid,
    opts: SolverOptions,
    operator: Option<(f64, EllipticOperator)>,
    sources: Option<Sources>,
    operator_t_dep: bool,
    sources_t_dep: bool,
}

impl<'a> MicroElliptic<'a> {
    pub fn new(set: &'a CoefficientSet, eps: f64, grid: MacroGrid, opts: SolverOptions) -> Result<Self> {
        check_eps(eps)?;
        if grid.dim() != set.dim() {
            return Err(Error::Domain(format!(
                "grid dimension {} does not match coefficient dimension {}",
                grid.dim(),
                set.dim()
            )));
        }
        use CoefficientId::*;
        Ok(MicroElliptic {
            set,
            eps,
            grid,
            opts,
            operator: None,
            sources: None,
            operator_t_dep: set.any_t_dependent(&[M, E, D]),
            sources_t_dep: set.any_t_dependent(&[H, K, J]),
        })
    }

    fn prepare(&mut self, t: f64) -> Result<()> {
        let stale = |cached: Option<f64>, dep: bool| match cached {
            None => true,
            Some(tc) => dep && tc != t,
        };
        if stale(self.operator.as_ref().map(|o| o.0), self.operator_t_dep) {
            let flux = flux_at(self.set, self.eps, &self.grid, t);
            let reaction = nodal_trace(self.set, CoefficientId::M, self.eps, &self.grid, t);
            let op = EllipticOperator::new(&self.grid, &flux, &reaction, None, &self.opts)?;
            self.operator = Some((t, op));
        }
        if stale(self.sources.as_ref().map(|s| s.t), self.sources_t_dep) {
            self.sources = Some(Sources::sample(self.set, self.eps, &self.grid, t));
        }
        Ok(())
    }

    /// `V` at time `t` for the given `U`.
    pub fn solve(&mut self, t: f64, u: &Field) -> Result<Field> {
        let eps = self.eps;
        let run = |this: &mut Self| -> Result<Field> {
            this.prepare(t)?;
            let s = this.sources.as_ref().unwrap();
            let rhs = source_rhs(&this.grid, &s.h, &s.k, &s.j, u, None);
            this.operator.as_ref().unwrap().1.solve(&rhs)
        };
        run(self).map_err(|e| e.context(format!("elliptic solve at t = {t}, eps = {eps}")))
    }
}

/// One-off elliptic solve with default solver options.
pub fn solve_elliptic_v(set: &CoefficientSet, u: &Field, t: f64, eps: f64, grid: &MacroGrid) -> Result<Field> {
    MicroElliptic::new(set, eps, *grid, SolverOptions::default())?.solve(t, u)
}

/// ODE step `U^n -> U^{n+1}` given the elliptic field at the new time.
pub fn step_u<G: Grid + ?Sized>(
    set: &CoefficientSet,
    grid: &G,
    state: &MicroState,
    v_next: &Field,
    dt: f64,
    scheme: TimeScheme,
) -> Result<Field> {
    let op = OdeOperator::new(set, grid, state.t, dt, scheme)?;
    Ok(op.apply(&state.u, &state.v, v_next))
}

/// Picard fixed point of one coupled step. Returns `(U, iterations)`.
pub(crate) fn picard<F>(
    u_prev: &Field,
    opts: &SolverOptions,
    t: f64,
    mut update: F,
) -> Result<(Field, usize)>
where
    F: FnMut(&Field) -> Result<Field>,
{
    let mut u_it = u_prev.clone();
    let mut history = Vec::new();
    for k in 1..=opts.picard_max.max(1) {
        let u_new = update(&u_it)?;
        if !u_new.is_finite() {
            history.push(f64::NAN);
            return Err(Error::Picard { t, history });
        }
        let diff = u_new.max_abs_diff(&u_it) / u_new.max_abs().max(1.0);
        history.push(diff);
        u_it = u_new;
        if diff <= opts.picard_tol {
            return Ok((u_it, k));
        }
    }
    Err(Error::Picard { t, history })
}

pub fn run_micro(
    set: &CoefficientSet,
    eps: f64,
    grid: &MacroGrid,
    time: &TimeConfig,
    opts: &SolverOptions,
) -> Result<MicroTrajectory> {
    let steps = time.steps()?;
    let mut ell = MicroElliptic::new(set, eps, *grid, opts.clone())?;
    let u0 = nodal_trace(set, CoefficientId::UStar, eps, grid, 0.0);
    let v0 = ell.solve(0.0, &u0)?;
    let mut state = MicroState { t: 0.0, u: u0, v: v0 };
    let mut traj = MicroTrajectory {
        eps,
        grid: *grid,
        time: time.clone(),
        states: vec![state.clone()],
        picard_iterations: Vec::with_capacity(steps),
    };
    let l_dep = set.any_t_dependent(&[CoefficientId::L, CoefficientId::G]);
    let mut ode: Option<OdeOperator> = None;
    for n in 0..steps {
        let t_prev = time.time(n);
        let t_next = time.time(n + 1);
        if ode.is_none() || l_dep {
            ode = Some(OdeOperator::new(set, grid, t_prev, time.dt, time.scheme)?);
        }
        let op = ode.as_ref().unwrap();
        let (u, iters) = picard(&state.u, opts, t_next, |u_it| {
            let v = ell.solve(t_next, u_it)?;
            Ok(op.apply(&state.u, &state.v, &v))
        })
        .map_err(|e| e.context(format!("coupled step at t = {t_next}, eps = {eps}")))?;
        let v = ell.solve(t_next, &u)?;
        state = MicroState { t: t_next, u, v };
        traj.picard_iterations.push(iters);
        if time.records(n + 1, steps) {
            traj.states.push(state.clone());
        }
    }
    Ok(traj)
}

/// Residual of the pseudo-parabolic form evaluated on a computed trajectory.
///
/// `W = G^{-1}(dU/dt + L U)` with centred time differences (one-sided at the
/// ends); returns `(t, ||M W - div(E grad W + D W) - H - K U - J grad U||)`
/// per recorded state. Dirichlet nodes are excluded. Fewer than two states
/// give an empty result; a singular `G` yields `NaN` at that time.
pub fn q_residual(set: &CoefficientSet, traj: &MicroTrajectory) -> Vec<(f64, f64)> {
    let states = &traj.states;
    if states.len() < 2 {
        return Vec::new();
    }
    let grid = &traj.grid;
    let eps = traj.eps;
    let n = set.size();
    let nn = n * n;
    let d = grid.dim();
    let last = states.len() - 1;
    let mut out = Vec::with_capacity(states.len());
    let (mut g, mut l) = (vec![0.0; nn], vec![0.0; nn]);
    let mut tmp = vec![0.0; n];
    for m in 0..=last {
        let (a, b) = match m {
            0 => (0, 1),
            _ if m == last => (last - 1, last),
            _ => (m - 1, m + 1),
        };
        let span = states[b].t - states[a].t;
        let st = &states[m];
        let mut w = Field::zeros(grid.num_nodes(), n);
        let mut singular = false;
        for k in 0..grid.num_nodes() {
            let p = grid.point(k);
            set.sample_macro(CoefficientId::G, st.t, &p[..d], &mut g);
            set.sample_macro(CoefficientId::L, st.t, &p[..d], &mut l);
            nodal::matvec(n, &l, st.u.node(k), &mut tmp);
            for al in 0..n {
                tmp[al] += (states[b].u.get(k, al) - states[a].u.get(k, al)) / span;
            }
            match nodal::invert(n, &g) {
                Some(ginv) => nodal::matvec(n, &ginv, &tmp, w.node_mut(k)),
                None => singular = true,
            }
        }
        if singular {
            out.push((st.t, f64::NAN));
            continue;
        }
        let flux = flux_at(set, eps, grid, st.t);
        let reaction = nodal_trace(set, CoefficientId::M, eps, grid, st.t);
        let lhs = apply_operator(grid, &flux, Some(&reaction), &w);
        let s = Sources::sample(set, eps, grid, st.t);
        let rhs = source_rhs(grid, &s.h, &s.k, &s.j, &st.u, None);
        let mut r = lhs;
        for k in 0..grid.num_nodes() {
            for al in 0..n {
                r.values[k * n + al] = if grid.is_boundary(k) { 0.0 } else { r.values[k * n + al] - rhs[k * n + al] };
            }
        }
        out.push((st.t, r.l2_norm(grid)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::TensorField;
    use std::f64::consts::PI;

    fn scalar(v: f64) -> TensorField {
        TensorField::constant(vec![1, 1], &[v]).unwrap()
    }

    fn sin_source(scale: f64) -> TensorField {
        TensorField::custom(vec![1], false, false, move |_, x, _, o| o[0] = scale * (PI * x[0]).sin())
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let set = CoefficientSet::new(1, 1).unwrap();
        let grid = MacroGrid::new(1, 17).unwrap();
        let v = solve_elliptic_v(&set, &Field::zeros(17, 1), 0.0, 0.25, &grid).unwrap();
        assert_eq!(v.max_abs(), 0.0);
    }

    #[test]
    fn manufactured_sine_is_second_order() {
        let set = CoefficientSet::new(1, 1)
            .unwrap()
            .with(CoefficientId::H, sin_source(1.0 + PI * PI))
            .unwrap();
        let err = |n: usize| {
            let grid = MacroGrid::new(1, n).unwrap();
            let v = solve_elliptic_v(&set, &Field::zeros(n, 1), 0.0, 0.5, &grid).unwrap();
            let exact = Field::from_fn(&grid, 1, |x, o| o[0] = (PI * x[0]).sin());
            v.max_abs_diff(&exact)
        };
        let (e1, e2) = (err(33), err(65));
        assert!(e1 < 2e-3);
        assert!((e1 / e2 - 4.0).abs() < 0.2, "ratio {}", e1 / e2);
    }

    #[test]
    fn resolvent_oracle() {
        let set = CoefficientSet::new(1, 1).unwrap().with(CoefficientId::K, scalar(1.0)).unwrap();
        let grid = MacroGrid::new(1, 129).unwrap();
        let u = Field::from_fn(&grid, 1, |x, o| o[0] = (PI * x[0]).sin());
        let v = solve_elliptic_v(&set, &u, 0.0, 0.5, &grid).unwrap();
        let exact = Field::from_fn(&grid, 1, |x, o| o[0] = (PI * x[0]).sin() / (1.0 + PI * PI));
        assert!(v.max_abs_diff(&exact) < 1e-5);
        assert_eq!(v.get(0, 0), 0.0);
        assert_eq!(v.get(128, 0), 0.0);
    }

    #[test]
    fn step_formula_examples() {
        let grid = MacroGrid::new(1, 5).unwrap();
        let set = CoefficientSet::new(1, 1).unwrap().with(CoefficientId::L, scalar(1.0)).unwrap();
        let state = MicroState { t: 0.0, u: Field { ncomp: 1, values: vec![1.0; 5] }, v: Field::zeros(5, 1) };
        let u1 = step_u(&set, &grid, &state, &Field::zeros(5, 1), 0.1, TimeScheme::ImplicitEuler).unwrap();
        assert!(u1.values.iter().all(|&v| (v - 1.0 / 1.1).abs() < 1e-15));

        let set = CoefficientSet::new(1, 1).unwrap();
        let c = Field { ncomp: 1, values: vec![2.5; 5] };
        let u1 = step_u(&set, &grid, &state, &c, 0.1, TimeScheme::ImplicitEuler).unwrap();
        assert!(u1.values.iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn exponential_decay_is_first_order() {
        let lambda = 2.0;
        let set = CoefficientSet::new(1, 1)
            .unwrap()
            .with(CoefficientId::L, scalar(lambda))
            .unwrap()
            .with(CoefficientId::G, scalar(0.0))
            .unwrap()
            .with(CoefficientId::UStar, TensorField::constant(vec![1], &[1.0]).unwrap())
            .unwrap();
        let grid = MacroGrid::new(1, 5).unwrap();
        let err = |dt: f64| {
            let traj = run_micro(&set, 0.5, &grid, &TimeConfig::new(dt, 1.0), &SolverOptions::default()).unwrap();
            (traj.states.last().unwrap().u.get(2, 0) - (-lambda).exp()).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn zero_solution_stays_zero() {
        let set = CoefficientSet::new(1, 1).unwrap().with(CoefficientId::L, scalar(1.0)).unwrap();
        let grid = MacroGrid::new(1, 9).unwrap();
        let traj = run_micro(&set, 0.25, &grid, &TimeConfig::new(0.1, 0.5), &SolverOptions::default()).unwrap();
        assert_eq!(traj.states.len(), 6);
        assert!(traj.states.iter().all(|s| s.u.max_abs() == 0.0 && s.v.max_abs() == 0.0));
        assert!(q_residual(&set, &traj).iter().all(|&(_, r)| r == 0.0));
    }

    #[test]
    fn y_constant_coefficients_do_not_depend_on_eps() {
        let set = CoefficientSet::new(1, 1)
            .unwrap()
            .with(CoefficientId::K, scalar(0.5))
            .unwrap()
            .with(CoefficientId::L, scalar(1.0))
            .unwrap()
            .with(CoefficientId::UStar, sin_source(1.0))
            .unwrap();
        let grid = MacroGrid::new(1, 17).unwrap();
        let time = TimeConfig::new(0.05, 0.2);
        let a = run_micro(&set, 0.25, &grid, &time, &SolverOptions::default()).unwrap();
        let b = run_micro(&set, 0.125, &grid, &time, &SolverOptions::default()).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn boundary_values_of_v_vanish() {
        let set = CoefficientSet::new(1, 1)
            .unwrap()
            .with(CoefficientId::H, TensorField::constant(vec![1], &[1.0]).unwrap())
            .unwrap();
        let grid = MacroGrid::new(1, 9).unwrap();
        let traj = run_micro(&set, 0.5, &grid, &TimeConfig::new(0.1, 0.3), &SolverOptions::default()).unwrap();
        for s in &traj.states {
            assert_eq!(s.v.get(0, 0), 0.0);
            assert_eq!(s.v.get(8, 0), 0.0);
        }
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        let set = CoefficientSet::new(1, 1).unwrap();
        let grid = MacroGrid::new(1, 9).unwrap();
        assert!(matches!(
            solve_elliptic_v(&set, &Field::zeros(9, 1), 0.0, 0.0, &grid),
            Err(Error::Domain(_))
        ));
    }
}
