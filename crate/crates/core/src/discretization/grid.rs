use crate::error::{Error, Result};

/// Uniform tensor-product grid on the unit box, either with Dirichlet faces
/// or periodic wrap-around.
///
/// Nodes are numbered with the first axis fastest.
pub trait Grid: Sync {
    fn dim(&self) -> usize;
    /// Points per axis.
    fn n(&self) -> usize;
    fn h(&self) -> f64;
    fn periodic(&self) -> bool;

    fn num_nodes(&self) -> usize {
        self.n().pow(self.dim() as u32)
    }

    fn multi(&self, node: usize) -> [usize; 2] {
        let n = self.n();
        if self.dim() == 1 {
            [node, 0]
        } else {
            [node % n, node / n]
        }
    }

    fn index(&self, multi: [usize; 2]) -> usize {
        if self.dim() == 1 {
            multi[0]
        } else {
            multi[0] + self.n() * multi[1]
        }
    }

    fn point(&self, node: usize) -> [f64; 2] {
        let m = self.multi(node);
        let h = self.h();
        [m[0] as f64 * h, if self.dim() > 1 { m[1] as f64 * h } else { 0.0 }]
    }

    /// Neighbour along `axis`; `None` past a Dirichlet face.
    fn neighbor(&self, node: usize, axis: usize, forward: bool) -> Option<usize> {
        let n = self.n();
        let mut m = self.multi(node);
        let k = m[axis];
        m[axis] = if forward {
            if k + 1 < n {
                k + 1
            } else if self.periodic() {
                0
            } else {
                return None;
            }
        } else if k > 0 {
            k - 1
        } else if self.periodic() {
            n - 1
        } else {
            return None;
        };
        Some(self.index(m))
    }

    fn is_boundary(&self, node: usize) -> bool {
        if self.periodic() {
            return false;
        }
        let m = self.multi(node);
        let last = self.n() - 1;
        m[..self.dim()].iter().any(|&k| k == 0 || k == last)
    }

    /// Midpoint of the face between `node` and its forward neighbour along `axis`.
    fn face_point(&self, node: usize, axis: usize) -> [f64; 2] {
        let mut p = self.point(node);
        p[axis] += 0.5 * self.h();
        p
    }

    /// Quadrature weights: trapezoid on Dirichlet grids, rectangle on periodic ones.
    fn weights(&self) -> Vec<f64> {
        let n = self.n();
        let h = self.h();
        let axis: Vec<f64> = (0..n)
            .map(|k| {
                if !self.periodic() && (k == 0 || k == n - 1) {
                    0.5 * h
                } else {
                    h
                }
            })
            .collect();
        (0..self.num_nodes())
            .map(|node| {
                let m = self.multi(node);
                (0..self.dim()).map(|i| axis[m[i]]).product()
            })
            .collect()
    }
}

/// Vertex-centred grid on the closed box `[0,1]^d` with homogeneous
/// Dirichlet data on the box faces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroGrid {
    dim: usize,
    n: usize,
    h: f64,
}

impl MacroGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if n < 3 {
            return Err(Error::Config(format!("macro grid needs at least 3 points per axis, got {n}")));
        }
        Ok(MacroGrid { dim, n, h: 1.0 / (n - 1) as f64 })
    }

    pub fn interior_count(&self) -> usize {
        (self.n - 2).pow(self.dim as u32)
    }

    /// Whether every node of `coarse` is a node of `self`.
    pub fn contains(&self, coarse: &MacroGrid) -> bool {
        self.dim == coarse.dim && (self.n - 1) % (coarse.n - 1) == 0
    }

    /// Fine-grid node coinciding with a node of a nested coarse grid.
    pub fn restrict_index(&self, coarse: &MacroGrid, coarse_node: usize) -> usize {
        let stride = (self.n - 1) / (coarse.n - 1);
        let m = coarse.multi(coarse_node);
        self.index([m[0] * stride, m[1] * stride])
    }
}

impl Grid for MacroGrid {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n(&self) -> usize {
        self.n
    }
    fn h(&self) -> f64 {
        self.h
    }
    fn periodic(&self) -> bool {
        false
    }
}

/// Periodic grid on the unit cell; node `k` sits at `k h_y`, no duplicated endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGrid {
    dim: usize,
    n: usize,
    h: f64,
}

impl CellGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if n < 4 {
            return Err(Error::Config(format!("cell grid needs at least 4 points per axis, got {n}")));
        }
        Ok(CellGrid { dim, n, h: 1.0 / n as f64 })
    }
}

impl Grid for CellGrid {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n(&self) -> usize {
        self.n
    }
    fn h(&self) -> f64 {
        self.h
    }
    fn periodic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_grid_spacing_and_boundary() {
        let g = MacroGrid::new(2, 5).unwrap();
        assert_eq!(g.h() * 4.0, 1.0);
        assert_eq!(g.num_nodes(), 25);
        let boundary = (0..25).filter(|&k| g.is_boundary(k)).count();
        assert_eq!(boundary, 16);
        assert_eq!(g.interior_count(), 9);
        assert!(MacroGrid::new(1, 2).is_err());
    }

    #[test]
    fn cell_grid_wraps() {
        let g = CellGrid::new(2, 4).unwrap();
        let corner = g.index([3, 3]);
        assert_eq!(g.neighbor(corner, 0, true), Some(g.index([0, 3])));
        assert_eq!(g.neighbor(corner, 1, true), Some(g.index([3, 0])));
        assert_eq!(g.neighbor(0, 0, false), Some(g.index([3, 0])));
        assert!((0..16).all(|k| !g.is_boundary(k)));
    }

    #[test]
    fn weights_sum_to_unit_volume() {
        for g in [MacroGrid::new(1, 9).unwrap(), MacroGrid::new(2, 7).unwrap()] {
            let s: f64 = g.weights().iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
        let c = CellGrid::new(2, 8).unwrap();
        assert!((c.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn nested_restriction() {
        let fine = MacroGrid::new(1, 17).unwrap();
        let coarse = MacroGrid::new(1, 5).unwrap();
        assert!(fine.contains(&coarse));
        assert_eq!(fine.restrict_index(&coarse, 2), 8);
        assert!(!MacroGrid::new(1, 16).unwrap().contains(&coarse));
    }
}
