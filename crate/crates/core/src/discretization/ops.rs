//! Conservative finite-volume stencils for `-div(a grad w + b w)` and the
//! nodal difference/quadrature helpers built on the same grids.

use super::field::Field;
use super::grid::Grid;
use super::sparse::CsrMatrix;
use crate::error::{Error, Result};

/// Diffusion and drift sampled at face midpoints.
///
/// Face `(axis, node)` joins `node` to its forward neighbour along `axis`.
/// Faces past a Dirichlet boundary do not exist and hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxCoefficients {
    pub ncomp: usize,
    pub dim: usize,
    pub nodes: usize,
    /// Layout `[axis][node]`.
    pub diffusion: Vec<f64>,
    /// Layout `[axis][node][alpha][beta]`.
    pub drift: Option<Vec<f64>>,
}

impl FluxCoefficients {
    /// `f(axis, face_point, &mut diffusion, drift_block)` is called for every existing face.
    pub fn sample<G: Grid + ?Sized>(
        grid: &G,
        ncomp: usize,
        with_drift: bool,
        mut f: impl FnMut(usize, &[f64], &mut f64, &mut [f64]),
    ) -> Self {
        let (d, nodes) = (grid.dim(), grid.num_nodes());
        let nn = ncomp * ncomp;
        let mut diffusion = vec![0.0; d * nodes];
        let mut drift = vec![0.0; if with_drift { d * nodes * nn } else { 0 }];
        let mut scratch = vec![0.0; nn];
        for axis in 0..d {
            for node in 0..nodes {
                if grid.neighbor(node, axis, true).is_none() {
                    continue;
                }
                let p = grid.face_point(node, axis);
                let slot = axis * nodes + node;
                let block = if with_drift { &mut drift[slot * nn..(slot + 1) * nn] } else { &mut scratch[..] };
                f(axis, &p[..d], &mut diffusion[slot], block);
            }
        }
        FluxCoefficients { ncomp, dim: d, nodes, diffusion, drift: with_drift.then_some(drift) }
    }

    pub fn diffusion(&self, axis: usize, node: usize) -> f64 {
        self.diffusion[axis * self.nodes + node]
    }

    pub fn drift(&self, axis: usize, node: usize) -> Option<&[f64]> {
        let nn = self.ncomp * self.ncomp;
        let slot = axis * self.nodes + node;
        self.drift.as_ref().map(|b| &b[slot * nn..(slot + 1) * nn])
    }

    fn flux(&self, h: f64, axis: usize, lower: usize, upper: usize, w: &Field, alpha: usize) -> f64 {
        let a = self.diffusion(axis, lower);
        let mut f = a * (w.get(upper, alpha) - w.get(lower, alpha)) / h;
        if let Some(b) = self.drift(axis, lower) {
            let n = self.ncomp;
            for beta in 0..n {
                f += b[alpha * n + beta] * 0.5 * (w.get(upper, beta) + w.get(lower, beta));
            }
        }
        f
    }
}

/// Stencil of `-div(a grad w + b w)`; see [`assemble_operator`].
pub fn assemble_div_flux<G: Grid + ?Sized>(grid: &G, flux: &FluxCoefficients) -> Result<CsrMatrix> {
    assemble_operator(grid, flux, None)
}

/// Assembles `R w - div(a grad w + b w)` with nodal `ncomp x ncomp` reaction
/// blocks `R`.
///
/// On Dirichlet grids boundary rows are identity rows and couplings to
/// boundary columns are dropped (homogeneous data); periodic grids wrap.
/// Unknowns are ordered node-major: `node * ncomp + component`.
pub fn assemble_operator<G: Grid + ?Sized>(
    grid: &G,
    flux: &FluxCoefficients,
    reaction: Option<&Field>,
) -> Result<CsrMatrix> {
    let n = flux.ncomp;
    let nodes = grid.num_nodes();
    let h = grid.h();
    let inv_h2 = 1.0 / (h * h);
    let half_inv_h = 0.5 / h;
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(nodes * n * (1 + 4 * grid.dim() * n));

    let keep = |node: usize| grid.periodic() || !grid.is_boundary(node);
    let check = |a: f64, node: usize, axis: usize| -> Result<()> {
        if a > 0.0 {
            Ok(())
        } else {
            Err(Error::Assembly { node, reason: format!("non-positive diffusion {a} on face along axis {axis}") })
        }
    };

    for k in 0..nodes {
        if !keep(k) {
            for alpha in 0..n {
                trip.push((k * n + alpha, k * n + alpha, 1.0));
            }
            continue;
        }
        if let Some(r) = reaction {
            let block = r.node(k);
            for alpha in 0..n {
                for beta in 0..n {
                    let v = block[alpha * n + beta];
                    if v != 0.0 {
                        trip.push((k * n + alpha, k * n + beta, v));
                    }
                }
            }
        }
        for axis in 0..grid.dim() {
            let kp = grid.neighbor(k, axis, true).expect("interior node has a forward neighbour");
            let km = grid.neighbor(k, axis, false).expect("interior node has a backward neighbour");
            let ap = flux.diffusion(axis, k);
            let am = flux.diffusion(axis, km);
            check(ap, k, axis)?;
            check(am, km, axis)?;
            for alpha in 0..n {
                let row = k * n + alpha;
                let cp = ap * inv_h2;
                let cm = am * inv_h2;
                trip.push((row, row, cp));
                trip.push((row, row, cm));
                if keep(kp) {
                    trip.push((row, kp * n + alpha, -cp));
                }
                if keep(km) {
                    trip.push((row, km * n + alpha, -cm));
                }
                if let Some(bp) = flux.drift(axis, k) {
                    let bm = flux.drift(axis, km).unwrap();
                    for beta in 0..n {
                        let p = bp[alpha * n + beta] * half_inv_h;
                        let m = bm[alpha * n + beta] * half_inv_h;
                        if p != 0.0 {
                            trip.push((row, k * n + beta, -p));
                            if keep(kp) {
                                trip.push((row, kp * n + beta, -p));
                            }
                        }
                        if m != 0.0 {
                            trip.push((row, k * n + beta, m));
                            if keep(km) {
                                trip.push((row, km * n + beta, m));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(nodes * n, nodes * n, trip))
}

/// Applies `R w - div(a grad w + b w)` to a full nodal field, using boundary
/// values as given. Dirichlet boundary nodes get zero output.
pub fn apply_operator<G: Grid + ?Sized>(
    grid: &G,
    flux: &FluxCoefficients,
    reaction: Option<&Field>,
    w: &Field,
) -> Field {
    let n = flux.ncomp;
    let h = grid.h();
    let mut out = Field::zeros(grid.num_nodes(), n);
    for k in 0..grid.num_nodes() {
        if !grid.periodic() && grid.is_boundary(k) {
            continue;
        }
        for alpha in 0..n {
            let mut acc = 0.0;
            if let Some(r) = reaction {
                let block = r.node(k);
                for beta in 0..n {
                    acc += block[alpha * n + beta] * w.get(k, beta);
                }
            }
            for axis in 0..grid.dim() {
                let kp = grid.neighbor(k, axis, true).unwrap();
                let km = grid.neighbor(k, axis, false).unwrap();
                let fp = flux.flux(h, axis, k, kp, w, alpha);
                let fm = flux.flux(h, axis, km, k, w, alpha);
                acc -= (fp - fm) / h;
            }
            out.values[k * n + alpha] = acc;
        }
    }
    out
}

/// Nodal gradient; output layout `[component][axis]`.
///
/// Central differences in the interior and on periodic grids, one-sided
/// second-order differences on Dirichlet faces.
pub fn fd_gradient<G: Grid + ?Sized>(grid: &G, field: &Field) -> Field {
    let d = grid.dim();
    let nc = field.ncomp;
    let h = grid.h();
    let mut out = Field::zeros(grid.num_nodes(), nc * d);
    for k in 0..grid.num_nodes() {
        for axis in 0..d {
            let fwd = grid.neighbor(k, axis, true);
            let bwd = grid.neighbor(k, axis, false);
            for c in 0..nc {
                let g = match (bwd, fwd) {
                    (Some(m), Some(p)) => (field.get(p, c) - field.get(m, c)) / (2.0 * h),
                    (None, Some(p)) => {
                        let pp = grid.neighbor(p, axis, true).unwrap();
                        (4.0 * (field.get(p, c) - field.get(k, c)) - (field.get(pp, c) - field.get(k, c))) / (2.0 * h)
                    }
                    (Some(m), None) => {
                        let mm = grid.neighbor(m, axis, false).unwrap();
                        (4.0 * (field.get(k, c) - field.get(m, c)) - (field.get(k, c) - field.get(mm, c))) / (2.0 * h)
                    }
                    (None, None) => unreachable!("grids have at least three points per axis"),
                };
                out.values[k * nc * d + c * d + axis] = g;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L2,
    Mean,
}

/// Trapezoid (Dirichlet grid) or rectangle (periodic grid) quadrature of a
/// scalar nodal field.
pub fn integrate_field<G: Grid + ?Sized>(grid: &G, values: &[f64], norm: Norm) -> f64 {
    let w = grid.weights();
    match norm {
        Norm::L2 => w.iter().zip(values).map(|(w, v)| w * v * v).sum::<f64>().sqrt(),
        Norm::Mean => {
            let total: f64 = w.iter().sum();
            w.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / total
        }
    }
}
