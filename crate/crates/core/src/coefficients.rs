//! Problem coefficients on the unit box with periodic microstructure.
//!
//! Every coefficient is a tensor-valued sampler `c(t, x, y)` where `x` lives in
//! `Omega = (0,1)^d` and `y` in the unit cell `Y = (0,1)^d`; samplers with a `y`
//! argument are 1-periodic in every component of `y`. The fine-scale problem sees
//! the trace `c(t, x, x/eps)`.
//!
//! Tensor layouts (row-major, flattened):
//!
//! | id  | shape       | notes                              |
//! |-----|-------------|------------------------------------|
//! | M   | N x N       | diagonal, positive                 |
//! | E   | d x d       | diagonal, positive                 |
//! | D   | d x N x N   | drift, index `[i][alpha][beta]`    |
//! | H   | N           | source                             |
//! | K   | N x N       |                                    |
//! | J   | d x N x N   | index `[i][alpha][beta]`           |
//! | L   | N x N       | no `y` dependence                  |
//! | G   | N x N       | no `y` dependence, invertible      |
//! | U*  | N           | initial datum, depends on `x` only |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoefficientId {
    M,
    E,
    D,
    H,
    K,
    J,
    L,
    G,
    UStar,
}

impl CoefficientId {
    pub const ALL: [CoefficientId; 9] = [
        CoefficientId::M,
        CoefficientId::E,
        CoefficientId::D,
        CoefficientId::H,
        CoefficientId::K,
        CoefficientId::J,
        CoefficientId::L,
        CoefficientId::G,
        CoefficientId::UStar,
    ];

    /// Whether the coefficient takes a periodic micro argument.
    pub fn has_y(self) -> bool {
        !matches!(self, CoefficientId::L | CoefficientId::G | CoefficientId::UStar)
    }

    pub fn shape(self, dim: usize, size: usize) -> Vec<usize> {
        use CoefficientId::*;
        match self {
            M | K | L | G => vec![size, size],
            E => vec![dim, dim],
            D | J => vec![dim, size, size],
            H | UStar => vec![size],
        }
    }

    pub fn name(self) -> &'static str {
        use CoefficientId::*;
        match self {
            M => "M",
            E => "E",
            D => "D",
            H => "H",
            K => "K",
            J => "J",
            L => "L",
            G => "G",
            UStar => "U_star",
        }
    }
}

impl fmt::Display for CoefficientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoefficientId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use CoefficientId::*;
        Ok(match s {
            "M" => M,
            "E" => E,
            "D" => D,
            "H" => H,
            "K" => K,
            "J" => J,
            "L" => L,
            "G" => G,
            "U_star" | "Ustar" | "U*" => UStar,
            other => return Err(Error::Config(format!("unknown coefficient `{other}`"))),
        })
    }
}

/// Smooth macroscopic profile `(base + amp * prod_i sin(pi k_i x_i)) * exp(-rate t)`.
///
/// An empty `k` means `k_i = 1` on every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxProfile {
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub amp: f64,
    #[serde(default)]
    pub k: Vec<f64>,
    #[serde(default)]
    pub rate: f64,
}

impl TxProfile {
    pub fn constant(base: f64) -> Self {
        TxProfile { base, amp: 0.0, k: Vec::new(), rate: 0.0 }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let mut space = self.base;
        if self.amp != 0.0 {
            let prod: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &xi)| {
                    let k = self.k.get(i).copied().unwrap_or(if self.k.is_empty() { 1.0 } else { 0.0 });
                    if k == 0.0 {
                        1.0
                    } else {
                        (PI * k * xi).sin()
                    }
                })
                .product();
            space += self.amp * prod;
        }
        if self.rate != 0.0 {
            space * (-self.rate * t).exp()
        } else {
            space
        }
    }

    pub fn t_dependent(&self) -> bool {
        self.rate != 0.0
    }
}

/// Periodic cell profile `mean + amp * sin(2 pi k.y + phase)` with integer wave vector.
///
/// An empty `k` means `k = e_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YProfile {
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub amp: f64,
    #[serde(default)]
    pub k: Vec<i64>,
    #[serde(default)]
    pub phase: f64,
}

impl YProfile {
    pub fn eval(&self, y: &[f64]) -> f64 {
        if self.amp == 0.0 {
            return self.mean;
        }
        let arg: f64 = if self.k.is_empty() {
            y.first().copied().unwrap_or(0.0)
        } else {
            y.iter().zip(&self.k).map(|(yi, &k)| k as f64 * yi).sum()
        };
        self.mean + self.amp * (2.0 * PI * arg + self.phase).sin()
    }

    pub fn y_dependent(&self) -> bool {
        self.amp != 0.0 && (self.k.is_empty() || self.k.iter().any(|&k| k != 0))
    }
}

/// Scalar coefficient families selectable from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScalarFamily {
    Constant { value: f64 },
    Periodic(YProfile),
    Separable { tx: TxProfile, y: YProfile },
    Smooth(TxProfile),
}

impl ScalarFamily {
    pub fn eval(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        match self {
            ScalarFamily::Constant { value } => *value,
            ScalarFamily::Periodic(p) => p.eval(y),
            ScalarFamily::Separable { tx, y: yp } => tx.eval(t, x) * yp.eval(y),
            ScalarFamily::Smooth(tx) => tx.eval(t, x),
        }
    }

    pub fn y_dependent(&self) -> bool {
        match self {
            ScalarFamily::Periodic(p) => p.y_dependent(),
            ScalarFamily::Separable { y, .. } => y.y_dependent(),
            _ => false,
        }
    }

    pub fn t_dependent(&self) -> bool {
        match self {
            ScalarFamily::Separable { tx, .. } | ScalarFamily::Smooth(tx) => tx.t_dependent(),
            _ => false,
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, ScalarFamily::Constant { value } if *value == 0.0)
    }

    /// Splits into a `(t, x)` factor and a pure cell part when possible.
    fn split(&self) -> (Option<&TxProfile>, ScalarFamily) {
        match self {
            ScalarFamily::Constant { .. } | ScalarFamily::Periodic(_) => (None, self.clone()),
            ScalarFamily::Separable { tx, y } => (Some(tx), ScalarFamily::Periodic(y.clone())),
            ScalarFamily::Smooth(tx) => (Some(tx), ScalarFamily::Constant { value: 1.0 }),
        }
    }
}

type SamplerFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Arbitrary sampler for cases the built-in families do not cover.
#[derive(Clone)]
pub struct CustomSampler {
    f: Arc<SamplerFn>,
    y_dependent: bool,
    t_dependent: bool,
}

impl fmt::Debug for CustomSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSampler")
            .field("y_dependent", &self.y_dependent)
            .field("t_dependent", &self.t_dependent)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
enum Source {
    Families(Vec<ScalarFamily>),
    Custom(CustomSampler),
}

/// A tensor-valued coefficient field.
#[derive(Debug, Clone)]
pub struct TensorField {
    shape: Vec<usize>,
    source: Source,
}

impl TensorField {
    pub fn from_families(shape: Vec<usize>, entries: Vec<ScalarFamily>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if entries.len() != len {
            return Err(Error::Config(format!(
                "tensor of shape {shape:?} needs {len} entries, got {}",
                entries.len()
            )));
        }
        Ok(TensorField { shape, source: Source::Families(entries) })
    }

    pub fn constant(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let entries = values.iter().map(|&value| ScalarFamily::Constant { value }).collect();
        Self::from_families(shape, entries)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        TensorField {
            shape,
            source: Source::Families(vec![ScalarFamily::Constant { value: 0.0 }; len]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![ScalarFamily::Constant { value: 0.0 }; n * n];
        for a in 0..n {
            entries[a * n + a] = ScalarFamily::Constant { value: 1.0 };
        }
        TensorField { shape: vec![n, n], source: Source::Families(entries) }
    }

    /// Square diagonal tensor from its diagonal families.
    pub fn diagonal(diag: Vec<ScalarFamily>) -> Self {
        let n = diag.len();
        let mut entries = vec![ScalarFamily::Constant { value: 0.0 }; n * n];
        for (a, fam) in diag.into_iter().enumerate() {
            entries[a * n + a] = fam;
        }
        TensorField { shape: vec![n, n], source: Source::Families(entries) }
    }

    pub fn custom<F>(shape: Vec<usize>, y_dependent: bool, t_dependent: bool, f: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        TensorField {
            shape,
            source: Source::Custom(CustomSampler { f: Arc::new(f), y_dependent, t_dependent }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        match &self.source {
            Source::Families(entries) => {
                for (o, fam) in out.iter_mut().zip(entries) {
                    *o = fam.eval(t, x, y);
                }
            }
            Source::Custom(c) => (c.f)(t, x, y, out),
        }
    }

    pub fn sample_vec(&self, t: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.sample(t, x, y, &mut out);
        out
    }

    pub fn y_dependent(&self) -> bool {
        match &self.source {
            Source::Families(e) => e.iter().any(ScalarFamily::y_dependent),
            Source::Custom(c) => c.y_dependent,
        }
    }

    pub fn t_dependent(&self) -> bool {
        match &self.source {
            Source::Families(e) => e.iter().any(ScalarFamily::t_dependent),
            Source::Custom(c) => c.t_dependent,
        }
    }

    /// Factorization `c(t,x,y) = f(t,x) * c_hat(y)` with one common scalar factor.
    ///
    /// Returns `None` when the entries carry different `(t, x)` profiles or the
    /// field is a custom sampler.
    pub fn separable_split(&self) -> Option<(Option<TxProfile>, TensorField)> {
        let Source::Families(entries) = &self.source else {
            return None;
        };
        let mut factor: Option<&TxProfile> = None;
        let mut has_unfactored = false;
        let mut unit = Vec::with_capacity(entries.len());
        for fam in entries {
            let (tx, cell) = fam.split();
            match tx {
                Some(p) => match factor {
                    None => factor = Some(p),
                    Some(q) if q == p => {}
                    Some(_) => return None,
                },
                None if !fam.is_zero() => has_unfactored = true,
                None => {}
            }
            unit.push(cell);
        }
        if factor.is_some() && has_unfactored {
            return None;
        }
        Some((
            factor.cloned(),
            TensorField { shape: self.shape.clone(), source: Source::Families(unit) },
        ))
    }
}

/// All coefficients of one problem instance on `Omega = Y = (0,1)^d`.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    dim: usize,
    size: usize,
    fields: [TensorField; 9],
    /// Solve cell problems once and rescale by the common `(t, x)` factor.
    pub separable: bool,
}

fn slot(id: CoefficientId) -> usize {
    CoefficientId::ALL.iter().position(|&c| c == id).unwrap()
}

impl CoefficientSet {
    /// Defaults: `M = E = G = I`, `D = H = K = J = L = 0`, `U* = 0`.
    pub fn new(dim: usize, size: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("dimension must be 1 or 2, got {dim}")));
        }
        if size == 0 {
            return Err(Error::Config("system size must be at least 1".into()));
        }
        use CoefficientId::*;
        let fields = [
            TensorField::identity(size),
            TensorField::identity(dim),
            TensorField::zeros(D.shape(dim, size)),
            TensorField::zeros(H.shape(dim, size)),
            TensorField::zeros(K.shape(dim, size)),
            TensorField::zeros(J.shape(dim, size)),
            TensorField::zeros(L.shape(dim, size)),
            TensorField::identity(size),
            TensorField::zeros(UStar.shape(dim, size)),
        ];
        Ok(CoefficientSet { dim, size, fields, separable: false })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn set(&mut self, id: CoefficientId, field: TensorField) -> Result<()> {
        let want = id.shape(self.dim, self.size);
        if field.shape() != want.as_slice() {
            return Err(Error::Config(format!(
                "{id} must have shape {want:?}, got {:?}",
                field.shape()
            )));
        }
        if !id.has_y() && field.y_dependent() {
            return Err(Error::Config(format!("{id} must not depend on the cell variable")));
        }
        self.fields[slot(id)] = field;
        Ok(())
    }

    pub fn with(mut self, id: CoefficientId, field: TensorField) -> Result<Self> {
        self.set(id, field)?;
        Ok(self)
    }

    pub fn field(&self, id: CoefficientId) -> &TensorField {
        &self.fields[slot(id)]
    }

    pub fn sample(&self, id: CoefficientId, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.fields[slot(id)].sample(t, x, y, out)
    }

    pub fn sample_vec(&self, id: CoefficientId, t: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.fields[slot(id)].sample_vec(t, x, y)
    }

    /// Samples a coefficient without cell variable (`L`, `G`, `U*`).
    pub fn sample_macro(&self, id: CoefficientId, t: f64, x: &[f64], out: &mut [f64]) {
        let y = [0.0; 2];
        self.sample(id, t, x, &y[..self.dim], out)
    }

    pub fn y_dependent(&self, id: CoefficientId) -> bool {
        self.field(id).y_dependent()
    }

    pub fn t_dependent(&self, id: CoefficientId) -> bool {
        self.field(id).t_dependent()
    }

    pub fn any_t_dependent(&self, ids: &[CoefficientId]) -> bool {
        ids.iter().any(|&id| self.t_dependent(id))
    }

    /// Writes `c(t, x, frac(x/eps))` into `out`.
    pub fn eps_trace_into(
        &self,
        id: CoefficientId,
        t: f64,
        x: &[f64],
        eps: f64,
        out: &mut [f64],
    ) {
        let mut y = [0.0; 2];
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = frac(xi / eps);
        }
        self.sample(id, t, x, &y[..x.len()], out)
    }

    /// Value of the eps-trace `c(t, x, frac(x/eps))`.
    pub fn eval_eps_trace(&self, id: CoefficientId, t: f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("eps must be positive, got {eps}")));
        }
        if !id.has_y() {
            return Err(Error::Config(format!("{id} has no periodic argument")));
        }
        self.check_point(x)?;
        let mut out = vec![0.0; self.field(id).len()];
        self.eps_trace_into(id, t, x, eps, &mut out);
        Ok(out)
    }

    /// Cell average `(1/|Y|) int_Y c(t, x, y) dy` by the rectangle rule on a
    /// uniform periodic grid with `quad_n` points per axis. Coefficients without
    /// cell dependence are returned unchanged.
    pub fn y_average(&self, id: CoefficientId, t: f64, x: &[f64], quad_n: usize) -> Result<Vec<f64>> {
        if quad_n < 2 {
            return Err(Error::Domain(format!("quad_n must be at least 2, got {quad_n}")));
        }
        self.check_point(x)?;
        Ok(self.y_average_unchecked(id, t, x, quad_n, 0.0))
    }

    pub(crate) fn y_average_unchecked(
        &self,
        id: CoefficientId,
        t: f64,
        x: &[f64],
        quad_n: usize,
        shift: f64,
    ) -> Vec<f64> {
        let field = self.field(id);
        if !id.has_y() || !field.y_dependent() {
            let mut out = vec![0.0; field.len()];
            let y = [0.0; 2];
            field.sample(t, x, &y[..self.dim], &mut out);
            return out;
        }
        let mut acc = vec![0.0; field.len()];
        let mut buf = vec![0.0; field.len()];
        let h = 1.0 / quad_n as f64;
        let total = quad_n.pow(self.dim as u32);
        let mut y = [0.0; 2];
        for q in 0..total {
            let mut rem = q;
            for yi in y.iter_mut().take(self.dim) {
                *yi = (rem % quad_n) as f64 * h + shift;
                rem /= quad_n;
            }
            field.sample(t, x, &y[..self.dim], &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        let scale = 1.0 / total as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
        acc
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Domain(format!(
                "point has {} components, expected {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|&xi| !(-1e-12..=1.0 + 1e-12).contains(&xi)) {
            return Err(Error::Domain(format!("point {x:?} outside the closed unit box")));
        }
        Ok(())
    }
}

/// Fractional part mapping into `[0, 1)`.
pub fn frac(z: f64) -> f64 {
    let f = z - z.floor();
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

/// Sampling grid used for the sup/inf estimates of the coefficient bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub times: Vec<f64>,
    /// Points per axis on the closed box `[0,1]^d`, endpoints included.
    pub x_points: usize,
    /// Points per axis on the periodic cell.
    pub y_points: usize,
}

impl SamplingGrid {
    pub fn new(times: Vec<f64>, x_points: usize, y_points: usize) -> Self {
        SamplingGrid { times, x_points, y_points }
    }

    /// `n_t` equispaced times on `[0, t_end]`.
    pub fn uniform(t_end: f64, n_t: usize, x_points: usize, y_points: usize) -> Self {
        let times = if n_t <= 1 {
            vec![0.0]
        } else {
            (0..n_t).map(|k| t_end * k as f64 / (n_t - 1) as f64).collect()
        };
        SamplingGrid { times, x_points, y_points }
    }

    pub(crate) fn x_nodes(&self, dim: usize) -> Vec<Vec<f64>> {
        let n = self.x_points.max(1);
        let axis: Vec<f64> = if n == 1 {
            vec![0.5]
        } else {
            (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
        };
        tensor_points(&axis, dim)
    }

    pub(crate) fn y_nodes(&self, dim: usize) -> Vec<Vec<f64>> {
        let n = self.y_points.max(1);
        let axis: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
        tensor_points(&axis, dim)
    }
}

fn tensor_points(axis: &[f64], dim: usize) -> Vec<Vec<f64>> {
    match dim {
        1 => axis.iter().map(|&a| vec![a]).collect(),
        _ => {
            let mut pts = Vec::with_capacity(axis.len() * axis.len());
            for &b in axis {
                for &a in axis {
                    pts.push(vec![a, b]);
                }
            }
            pts
        }
    }
}

/// Pointwise consequences of the structural assumptions, evaluated on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// `M` and `E` diagonal with strictly positive diagonal at every sample.
    pub structure_ok: bool,
    /// `min over (i, beta, alpha)` of `4/(d N^2 sup(1/m_alpha) sup(1/e_i)) - sup|D_{i beta alpha}|^2`.
    pub drift_margin: f64,
    pub g_min_det: f64,
    pub samples_used: usize,
    pub grid: SamplingGrid,
    pub failures: Vec<String>,
}

/// Determinants smaller than this are treated as singular.
pub const G_DET_FLOOR: f64 = 1e-10;

impl AssumptionReport {
    pub fn passes(&self) -> bool {
        self.structure_ok && self.drift_margin > 0.0 && self.g_min_det > G_DET_FLOOR
    }
}

/// Sampled sup/inf bounds shared by the assumption check and the energy certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBounds {
    /// `sup 1/m_alpha` per component (infinite when some sample is non-positive).
    pub inv_m_sup: Vec<f64>,
    /// `sup 1/e_i` per axis.
    pub inv_e_sup: Vec<f64>,
    /// `sup |D_{i alpha beta}|`, layout `[i][alpha][beta]`.
    pub d_sup: Vec<f64>,
    pub h_sup: Vec<f64>,
    pub k_sup: Vec<f64>,
    pub j_sup: Vec<f64>,
    pub g_min_det: f64,
    pub diagonal_ok: bool,
    pub positive_ok: bool,
    pub samples: usize,
}

impl CoefficientBounds {
    pub fn sample(set: &CoefficientSet, grid: &SamplingGrid) -> Self {
        use CoefficientId::*;
        let (d, n) = (set.dim(), set.size());
        let xs = grid.x_nodes(d);
        let ys = grid.y_nodes(d);
        let times = if grid.times.is_empty() { vec![0.0] } else { grid.times.clone() };

        let mut b = CoefficientBounds {
            inv_m_sup: vec![0.0; n],
            inv_e_sup: vec![0.0; d],
            d_sup: vec![0.0; d * n * n],
            h_sup: vec![0.0; n],
            k_sup: vec![0.0; n * n],
            j_sup: vec![0.0; d * n * n],
            g_min_det: f64::INFINITY,
            diagonal_ok: true,
            positive_ok: true,
            samples: 0,
        };
        let mut m = vec![0.0; n * n];
        let mut e = vec![0.0; d * d];
        let mut buf = vec![0.0; d * n * n];
        let mut g = vec![0.0; n * n];

        for &t in &times {
            for x in &xs {
                set.sample_macro(G, t, x, &mut g);
                let det = DMatrix::from_row_slice(n, n, &g).determinant().abs();
                b.g_min_det = b.g_min_det.min(det);
                for y in &ys {
                    b.samples += 1;
                    set.sample(M, t, x, y, &mut m);
                    set.sample(E, t, x, y, &mut e);
                    for a in 0..n {
                        for c in 0..n {
                            let v = m[a * n + c];
                            if a == c {
                                if v > 0.0 {
                                    b.inv_m_sup[a] = b.inv_m_sup[a].max(1.0 / v);
                                } else {
                                    b.positive_ok = false;
                                    b.inv_m_sup[a] = f64::INFINITY;
                                }
                            } else if v != 0.0 {
                                b.diagonal_ok = false;
                            }
                        }
                    }
                    for i in 0..d {
                        for j in 0..d {
                            let v = e[i * d + j];
                            if i == j {
                                if v > 0.0 {
                                    b.inv_e_sup[i] = b.inv_e_sup[i].max(1.0 / v);
                                } else {
                                    b.positive_ok = false;
                                    b.inv_e_sup[i] = f64::INFINITY;
                                }
                            } else if v != 0.0 {
                                b.diagonal_ok = false;
                            }
                        }
                    }
                    set.sample(D, t, x, y, &mut buf);
                    max_abs_into(&mut b.d_sup, &buf);
                    set.sample(J, t, x, y, &mut buf);
                    max_abs_into(&mut b.j_sup, &buf);
                    set.sample(K, t, x, y, &mut buf[..n * n]);
                    max_abs_into(&mut b.k_sup, &buf[..n * n]);
                    set.sample(H, t, x, y, &mut buf[..n]);
                    max_abs_into(&mut b.h_sup, &buf[..n]);
                }
            }
        }
        b
    }
}

fn max_abs_into(acc: &mut [f64], vals: &[f64]) {
    for (a, v) in acc.iter_mut().zip(vals) {
        *a = a.max(v.abs());
    }
}

/// Checks positivity/diagonality of `M`, `E`, the drift bound and the
/// invertibility of `G` on the sampling grid. Never fails; problems are
/// recorded in the report.
pub fn validate_assumptions(set: &CoefficientSet, grid: &SamplingGrid) -> AssumptionReport {
    let b = CoefficientBounds::sample(set, grid);
    let (d, n) = (set.dim(), set.size());
    let mut failures = Vec::new();

    let structure_ok = b.diagonal_ok && b.positive_ok;
    if !b.diagonal_ok {
        failures.push("M or E has a non-zero off-diagonal entry".to_string());
    }
    if !b.positive_ok {
        failures.push("M or E has a non-positive diagonal sample".to_string());
    }

    let drift_margin = if b.positive_ok {
        let mut margin = f64::INFINITY;
        let scale = 4.0 / (d as f64 * (n * n) as f64);
        for i in 0..d {
            for beta in 0..n {
                for alpha in 0..n {
                    let bound = scale / (b.inv_m_sup[alpha] * b.inv_e_sup[i]);
                    let dv = b.d_sup[(i * n + beta) * n + alpha];
                    margin = margin.min(bound - dv * dv);
                }
            }
        }
        margin
    } else {
        f64::NEG_INFINITY
    };
    if !(drift_margin > 0.0) {
        failures.push(format!("drift bound violated: margin {drift_margin:.6e}"));
    }
    if !(b.g_min_det > G_DET_FLOOR) {
        failures.push(format!("G is singular on the grid: min |det G| = {:.3e}", b.g_min_det));
    }

    AssumptionReport {
        structure_ok,
        drift_margin,
        g_min_det: b.g_min_det,
        samples_used: b.samples,
        grid: grid.clone(),
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn periodic(mean: f64, amp: f64, k: &[i64]) -> ScalarFamily {
        ScalarFamily::Periodic(YProfile { mean, amp, k: k.to_vec(), phase: 0.0 })
    }

    fn scalar_set(id: CoefficientId, fam: ScalarFamily) -> CoefficientSet {
        let shape = id.shape(1, 1);
        CoefficientSet::new(1, 1)
            .unwrap()
            .with(id, TensorField::from_families(shape, vec![fam]).unwrap())
            .unwrap()
    }

    #[test]
    fn eps_trace_examples() {
        let set = scalar_set(CoefficientId::H, periodic(0.0, 1.0, &[1]));
        let v = set.eval_eps_trace(CoefficientId::H, 0.0, &[0.25], 0.5).unwrap();
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-15);

        let set = scalar_set(CoefficientId::K, ScalarFamily::Constant { value: 3.5 });
        for (t, x, eps) in [(0.0, 0.1, 0.5), (2.0, 0.9, 0.125)] {
            assert_eq!(set.eval_eps_trace(CoefficientId::K, t, &[x], eps).unwrap(), vec![3.5]);
        }

        let mut set = CoefficientSet::new(1, 1).unwrap();
        set.set(
            CoefficientId::H,
            TensorField::custom(vec![1], true, false, |_, _, y, out| out[0] = y[0]),
        )
        .unwrap();
        let v = set.eval_eps_trace(CoefficientId::H, 0.0, &[0.75], 0.5).unwrap();
        assert_eq!(v[0], 0.5);
    }

    #[test]
    fn eps_trace_errors() {
        let set = CoefficientSet::new(1, 1).unwrap();
        assert!(matches!(
            set.eval_eps_trace(CoefficientId::M, 0.0, &[0.5], 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            set.eval_eps_trace(CoefficientId::M, 0.0, &[0.5], -1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!("Q".parse::<CoefficientId>(), Err(Error::Config(_))));
    }

    #[test]
    fn y_average_examples() {
        let set = CoefficientSet::new(1, 1).unwrap().with(
            CoefficientId::H,
            TensorField::custom(vec![1], true, false, |_, _, y, o| {
                o[0] = (2.0 * PI * y[0]).sin().powi(2)
            }),
        );
        let v = set.unwrap().y_average(CoefficientId::H, 0.0, &[0.3], 64).unwrap();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);

        let set = scalar_set(CoefficientId::K, ScalarFamily::Constant { value: 7.0 });
        assert_eq!(set.y_average(CoefficientId::K, 0.0, &[0.3], 8).unwrap(), vec![7.0]);

        let set = scalar_set(CoefficientId::K, periodic(2.0, 1.0, &[1]));
        let v = set.y_average(CoefficientId::K, 0.0, &[0.3], 16).unwrap();
        assert_abs_diff_eq!(v[0], 2.0, epsilon = 1e-12);

        assert!(set.y_average(CoefficientId::K, 0.0, &[0.3], 1).is_err());
    }

    #[test]
    fn y_average_passes_through_macro_coefficients() {
        let set = CoefficientSet::new(1, 1)
            .unwrap()
            .with(
                CoefficientId::L,
                TensorField::from_families(
                    vec![1, 1],
                    vec![ScalarFamily::Smooth(TxProfile { base: 1.0, amp: 0.5, k: vec![], rate: 0.0 })],
                )
                .unwrap(),
            )
            .unwrap();
        let v = set.y_average(CoefficientId::L, 0.0, &[0.5], 4).unwrap();
        assert_abs_diff_eq!(v[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn macro_coefficients_reject_cell_dependence() {
        let mut set = CoefficientSet::new(1, 1).unwrap();
        let f = TensorField::from_families(vec![1, 1], vec![periodic(1.0, 0.5, &[1])]).unwrap();
        assert!(set.set(CoefficientId::G, f).is_err());
    }

    #[test]
    fn drift_margin_examples() {
        let grid = SamplingGrid::uniform(1.0, 2, 5, 8);
        let set = scalar_set(CoefficientId::D, ScalarFamily::Constant { value: 3.0 });
        let r = validate_assumptions(&set, &grid);
        assert!(r.structure_ok);
        assert_abs_diff_eq!(r.drift_margin, -5.0, epsilon = 1e-14);
        assert!(!r.passes());

        let set = scalar_set(CoefficientId::D, ScalarFamily::Constant { value: 1.0 });
        let r = validate_assumptions(&set, &grid);
        assert_abs_diff_eq!(r.drift_margin, 3.0, epsilon = 1e-14);
        assert!(r.passes());
        assert_eq!(r.samples_used, 2 * 5 * 8);
    }

    #[test]
    fn a2_detects_non_positive_e() {
        let grid = SamplingGrid::uniform(1.0, 2, 5, 8);
        let set = scalar_set(CoefficientId::E, periodic(0.5, 1.0, &[1]));
        let r = validate_assumptions(&set, &grid);
        assert!(!r.structure_ok);
        assert!(!r.passes());
    }

    #[test]
    fn singular_g_is_reported() {
        let grid = SamplingGrid::uniform(1.0, 1, 3, 4);
        let set = scalar_set(CoefficientId::G, ScalarFamily::Constant { value: 0.0 });
        let r = validate_assumptions(&set, &grid);
        assert_eq!(r.g_min_det, 0.0);
        assert!(!r.passes());
    }

    #[test]
    fn separable_split_detects_common_factor() {
        let tx = TxProfile { base: 1.0, amp: 0.5, k: vec![1.0], rate: 0.0 };
        let y = YProfile { mean: 2.0, amp: 1.0, k: vec![1], phase: 0.0 };
        let f = TensorField::diagonal(vec![ScalarFamily::Separable { tx: tx.clone(), y: y.clone() }]);
        let (factor, unit) = f.separable_split().unwrap();
        assert_eq!(factor, Some(tx.clone()));
        let v = unit.sample_vec(0.0, &[0.3], &[0.1]);
        assert_abs_diff_eq!(v[0], y.eval(&[0.1]), epsilon = 1e-15);

        let other = TxProfile { base: 2.0, ..tx.clone() };
        let f = TensorField::diagonal(vec![
            ScalarFamily::Separable { tx, y: y.clone() },
            ScalarFamily::Separable { tx: other, y },
        ]);
        assert!(f.separable_split().is_none());
    }
}
