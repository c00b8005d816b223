use super::grid::Grid;

/// Nodal field with `ncomp` values per node, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub ncomp: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(nodes: usize, ncomp: usize) -> Self {
        Field { ncomp, values: vec![0.0; nodes * ncomp] }
    }

    /// Samples `f(point, out)` at every node of `grid`.
    pub fn from_fn<G: Grid + ?Sized>(grid: &G, ncomp: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut field = Field::zeros(grid.num_nodes(), ncomp);
        let d = grid.dim();
        for node in 0..grid.num_nodes() {
            let p = grid.point(node);
            f(&p[..d], field.node_mut(node));
        }
        field
    }

    pub fn num_nodes(&self) -> usize {
        if self.ncomp == 0 {
            0
        } else {
            self.values.len() / self.ncomp
        }
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.ncomp..(k + 1) * self.ncomp]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.ncomp..(k + 1) * self.ncomp]
    }

    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.values[k * self.ncomp + c]
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.ncomp).copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sub(&self, other: &Field) -> Field {
        Field {
            ncomp: self.ncomp,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        Field {
            ncomp: self.ncomp,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        }
    }

    /// `sqrt(sum_c int |f_c|^2)` with the grid's quadrature weights.
    pub fn l2_norm<G: Grid + ?Sized>(&self, grid: &G) -> f64 {
        self.l2_norm_sq(grid).sqrt()
    }

    pub fn l2_norm_sq<G: Grid + ?Sized>(&self, grid: &G) -> f64 {
        let w = grid.weights();
        (0..self.num_nodes())
            .map(|k| w[k] * self.node(k).iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Per-component means over the grid.
    pub fn mean<G: Grid + ?Sized>(&self, grid: &G) -> Vec<f64> {
        let w = grid.weights();
        let total: f64 = w.iter().sum();
        let mut acc = vec![0.0; self.ncomp];
        for k in 0..self.num_nodes() {
            for (a, v) in acc.iter_mut().zip(self.node(k)) {
                *a += w[k] * v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= total);
        acc
    }
}
