//! Time-stepping configuration and the nodal ODE `dU/dt + L U = G V`.

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientId, CoefficientSet};
use crate::discretization::{Field, Grid, SolveMethod};
use crate::error::{Error, Result};
use crate::nodal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    ImplicitEuler,
    CrankNicolson,
}

impl TimeScheme {
    /// Implicitness weight of the theta-method.
    pub fn theta(self) -> f64 {
        match self {
            TimeScheme::ImplicitEuler => 1.0,
            TimeScheme::CrankNicolson => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_end: f64,
    pub scheme: TimeScheme,
    /// Record every `output_every`-th step (the final step is always recorded).
    pub output_every: usize,
}

impl TimeConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        TimeConfig { dt, t_end, scheme: TimeScheme::ImplicitEuler, output_every: 1 }
    }

    pub fn with_scheme(mut self, scheme: TimeScheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Number of uniform steps; `t_end` must be a multiple of `dt`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return Err(Error::Domain(format!("dt = {} and T = {} must be positive", self.dt, self.t_end)));
        }
        let ratio = self.t_end / self.dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-8 * ratio.max(1.0) {
            return Err(Error::Domain(format!("T = {} is not a multiple of dt = {}", self.t_end, self.dt)));
        }
        Ok(steps as usize)
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn records(&self, step: usize, steps: usize) -> bool {
        step == steps || step % self.output_every.max(1) == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub method: SolveMethod,
    /// Relative residual tolerance of iterative linear solves.
    pub tol: f64,
    /// Fixed-point tolerance of the elliptic/ODE coupling.
    pub picard_tol: f64,
    pub picard_max: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { method: SolveMethod::Direct, tol: 1e-12, picard_tol: 1e-10, picard_max: 50 }
    }
}

/// One theta-step of `dU/dt + L U = G V` at every node:
/// `(I + theta dt L^{n+1}) U^{n+1} = (I - (1-theta) dt L^n) U^n + dt G (theta V^{n+1} + (1-theta) V^n)`.
#[derive(Debug, Clone)]
pub struct OdeOperator {
    size: usize,
    theta: f64,
    dt: f64,
    lhs_inv: Vec<f64>,
    explicit: Vec<f64>,
    g_next: Vec<f64>,
    g_prev: Vec<f64>,
}

impl OdeOperator {
    pub fn new<Gr: Grid + ?Sized>(
        set: &CoefficientSet,
        grid: &Gr,
        t_prev: f64,
        dt: f64,
        scheme: TimeScheme,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        let n = set.size();
        let nn = n * n;
        let nodes = grid.num_nodes();
        let d = grid.dim();
        let theta = scheme.theta();
        let t_next = t_prev + dt;
        let mut op = OdeOperator {
            size: n,
            theta,
            dt,
            lhs_inv: vec![0.0; nodes * nn],
            explicit: vec![0.0; if theta < 1.0 { nodes * nn } else { 0 }],
            g_next: vec![0.0; nodes * nn],
            g_prev: vec![0.0; if theta < 1.0 { nodes * nn } else { 0 }],
        };
        let mut l = vec![0.0; nn];
        for k in 0..nodes {
            let p = grid.point(k);
            let x = &p[..d];
            set.sample_macro(CoefficientId::L, t_next, x, &mut l);
            let lhs = nodal::identity_plus(n, theta * dt, &l);
            let inv = nodal::invert(n, &lhs).ok_or(Error::Step { t: t_next, dt, node: k })?;
            op.lhs_inv[k * nn..(k + 1) * nn].copy_from_slice(&inv);
            set.sample_macro(CoefficientId::G, t_next, x, &mut op.g_next[k * nn..(k + 1) * nn]);
            if theta < 1.0 {
                set.sample_macro(CoefficientId::L, t_prev, x, &mut l);
                let e = nodal::identity_plus(n, -(1.0 - theta) * dt, &l);
                op.explicit[k * nn..(k + 1) * nn].copy_from_slice(&e);
                set.sample_macro(CoefficientId::G, t_prev, x, &mut op.g_prev[k * nn..(k + 1) * nn]);
            }
        }
        Ok(op)
    }

    /// `v_prev` is only read by Crank-Nicolson.
    pub fn apply(&self, u_prev: &Field, v_prev: &Field, v_next: &Field) -> Field {
        let n = self.size;
        let nn = n * n;
        let mut out = Field::zeros(u_prev.num_nodes(), n);
        let mut rhs = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for k in 0..u_prev.num_nodes() {
            let blk = k * nn..(k + 1) * nn;
            if self.theta < 1.0 {
                nodal::matvec(n, &self.explicit[blk.clone()], u_prev.node(k), &mut rhs);
                nodal::matvec(n, &self.g_prev[blk.clone()], v_prev.node(k), &mut tmp);
                for a in 0..n {
                    rhs[a] += self.dt * (1.0 - self.theta) * tmp[a];
                }
            } else {
                rhs.copy_from_slice(u_prev.node(k));
            }
            nodal::matvec(n, &self.g_next[blk.clone()], v_next.node(k), &mut tmp);
            for a in 0..n {
                rhs[a] += self.dt * self.theta * tmp[a];
            }
            nodal::matvec(n, &self.lhs_inv[blk], &rhs, out.node_mut(k));
        }
        out
    }
}
