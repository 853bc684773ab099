//! Exact solvers for constant-coefficient problems on the box, built from the
//! closed-form eigenvectors of the 1D second-difference matrices.
//!
//! The cell-centered Neumann Laplacian (pressure) and the no-slip vector
//! Laplacian (one velocity component at a time) are both Kronecker sums of
//! 1D tridiagonal matrices, so `(c0 + c1 L)^{-1}` diagonalizes axis by axis.

use std::f64::consts::PI;

use crate::field::VectorField;
use crate::grid::{Shape, StaggeredGrid};

/// Boundary closure of a 1D second-difference matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Closure {
    /// Cell-centered unknowns, zero flux at both ends.
    Neumann,
    /// Node unknowns strictly inside, zero value on the end nodes.
    DirichletNodes,
    /// Cell-centered unknowns, reflected ghost (zero value half a cell out).
    DirichletCells,
    /// Single point without a stencil (padding axis in 2D).
    Trivial,
}

/// Orthonormal eigenbasis of a 1D second-difference matrix.
#[derive(Debug, Clone)]
pub struct Basis1D {
    pub len: usize,
    /// Row-major `len x len`; column `k` is the `k`-th eigenvector.
    pub q: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

impl Basis1D {
    /// `cells` is the number of cells along the axis, `h` the spacing.
    pub fn new(closure: Closure, cells: usize, h: f64) -> Self {
        let n = cells as f64;
        let ih2 = 1.0 / (h * h);
        let symbol = |k: f64| -(2.0 - 2.0 * (PI * k / n).cos()) * ih2;
        match closure {
            Closure::Trivial => Self {
                len: 1,
                q: vec![1.0],
                eigenvalues: vec![0.0],
            },
            Closure::Neumann => {
                let m = cells;
                let mut q = vec![0.0; m * m];
                for i in 0..m {
                    for k in 0..m {
                        let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                        q[i * m + k] = s * (PI * k as f64 * (i as f64 + 0.5) / n).cos();
                    }
                }
                let eigenvalues = (0..m).map(|k| symbol(k as f64)).collect();
                Self { len: m, q, eigenvalues }
            }
            Closure::DirichletNodes => {
                let m = cells - 1;
                let mut q = vec![0.0; m * m];
                for j in 0..m {
                    for k in 0..m {
                        q[j * m + k] = (2.0 / n).sqrt()
                            * (PI * (k + 1) as f64 * (j + 1) as f64 / n).sin();
                    }
                }
                let eigenvalues = (0..m).map(|k| symbol((k + 1) as f64)).collect();
                Self { len: m, q, eigenvalues }
            }
            Closure::DirichletCells => {
                let m = cells;
                let mut q = vec![0.0; m * m];
                for i in 0..m {
                    for k in 0..m {
                        let s = if k + 1 == m { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                        q[i * m + k] =
                            s * (PI * (k + 1) as f64 * (i as f64 + 0.5) / n).sin();
                    }
                }
                let eigenvalues = (0..m).map(|k| symbol((k + 1) as f64)).collect();
                Self { len: m, q, eigenvalues }
            }
        }
    }
}

/// `(c0 I + c1 L)^{-1}` on a (sub-)block of a 3-index array, where `L` is
/// the Kronecker sum of the per-axis 1D operators.
#[derive(Debug, Clone)]
pub struct SeparableSolver {
    shape: Shape,
    start: [usize; 3],
    bases: [Basis1D; 3],
}

impl SeparableSolver {
    pub fn new(shape: Shape, start: [usize; 3], bases: [Basis1D; 3]) -> Self {
        for a in 0..3 {
            assert!(start[a] + bases[a].len <= shape.0[a]);
        }
        Self { shape, start, bases }
    }

    /// Neumann pressure Laplacian on cell centers.
    pub fn pressure(grid: &StaggeredGrid) -> Self {
        let bases = std::array::from_fn(|a| {
            if a < grid.dim() {
                Basis1D::new(Closure::Neumann, grid.cells[a], grid.h[a])
            } else {
                Basis1D::new(Closure::Trivial, 1, 1.0)
            }
        });
        Self::new(grid.cell_shape(), [0; 3], bases)
    }

    /// No-slip Laplacian acting on velocity component `a` (interior faces).
    pub fn velocity_component(grid: &StaggeredGrid, a: usize) -> Self {
        let bases = std::array::from_fn(|b| {
            if b >= grid.dim() {
                Basis1D::new(Closure::Trivial, 1, 1.0)
            } else if b == a {
                Basis1D::new(Closure::DirichletNodes, grid.cells[b], grid.h[b])
            } else {
                Basis1D::new(Closure::DirichletCells, grid.cells[b], grid.h[b])
            }
        });
        let mut start = [0; 3];
        start[a] = 1;
        Self::new(grid.face_shape(a), start, bases)
    }

    fn block(&self) -> [usize; 3] {
        [self.bases[0].len, self.bases[1].len, self.bases[2].len]
    }

    fn gather(&self, x: &[f64]) -> Vec<f64> {
        let b = Shape(self.block());
        let mut out = vec![0.0; b.len()];
        for (n, i) in b.iter().enumerate() {
            let src = [i[0] + self.start[0], i[1] + self.start[1], i[2] + self.start[2]];
            out[n] = x[self.shape.index(src)];
        }
        out
    }

    fn scatter(&self, y: &[f64], x: &mut [f64]) {
        let b = Shape(self.block());
        for (n, i) in b.iter().enumerate() {
            let dst = [i[0] + self.start[0], i[1] + self.start[1], i[2] + self.start[2]];
            x[self.shape.index(dst)] = y[n];
        }
    }

    /// Applies `Q^T` (forward) or `Q` (backward) along one axis in place.
    fn transform(&self, buf: &mut [f64], axis: usize, forward: bool) {
        let block = Shape(self.block());
        let basis = &self.bases[axis];
        let m = basis.len;
        if m == 1 {
            return;
        }
        let stride = block.strides()[axis];
        let mut line = vec![0.0; m];
        let mut out = vec![0.0; m];
        let mut outer = block.0;
        outer[axis] = 1;
        for base in Shape(outer).iter() {
            let b0 = block.index(base);
            for (j, l) in line.iter_mut().enumerate() {
                *l = buf[b0 + j * stride];
            }
            for (k, o) in out.iter_mut().enumerate() {
                let mut s = 0.0;
                if forward {
                    for j in 0..m {
                        s += basis.q[j * m + k] * line[j];
                    }
                } else {
                    for j in 0..m {
                        s += basis.q[k * m + j] * line[j];
                    }
                }
                *o = s;
            }
            for (j, o) in out.iter().enumerate() {
                buf[b0 + j * stride] = *o;
            }
        }
    }

    /// Solves `(c0 I + c1 L) x = b` on the block; entries outside the block
    /// are set to zero. Singular modes (zero denominator) are projected out.
    pub fn solve(&self, c0: f64, c1: f64, b: &[f64], x: &mut [f64]) {
        let mut buf = self.gather(b);
        for a in 0..3 {
            self.transform(&mut buf, a, true);
        }
        let block = Shape(self.block());
        for (n, i) in block.iter().enumerate() {
            let lam: f64 = (0..3).map(|a| self.bases[a].eigenvalues[i[a]]).sum();
            let d = c0 + c1 * lam;
            buf[n] = if d.abs() > 1e-300 && d.abs() > 1e-13 * (c0.abs() + (c1 * lam).abs()) {
                buf[n] / d
            } else {
                0.0
            };
        }
        for a in 0..3 {
            self.transform(&mut buf, a, false);
        }
        x.iter_mut().for_each(|v| *v = 0.0);
        self.scatter(&buf, x);
    }

    /// Smallest and largest eigenvalue of `-L` on the block.
    pub fn spectrum_bounds(&self) -> (f64, f64) {
        let lo: f64 = self
            .bases
            .iter()
            .map(|b| b.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        let hi: f64 = self
            .bases
            .iter()
            .map(|b| b.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
            .sum();
        (-lo, -hi)
    }
}

/// Per-component solvers for `(c0 I - c1 Δ)` on a whole vector field.
#[derive(Debug, Clone)]
pub struct VectorHelmholtz {
    comps: Vec<SeparableSolver>,
    offsets: [usize; 4],
}

impl VectorHelmholtz {
    pub fn new(grid: &StaggeredGrid) -> Self {
        Self {
            comps: (0..grid.dim())
                .map(|a| SeparableSolver::velocity_component(grid, a))
                .collect(),
            offsets: VectorField::layout(grid),
        }
    }

    /// `x = (c0 I - c1 Δ)^{-1} b` componentwise; boundary faces of `x` are zero.
    pub fn solve(&self, c0: f64, c1: f64, b: &[f64], x: &mut [f64]) {
        let off = self.offsets;
        for (a, s) in self.comps.iter().enumerate() {
            s.solve(c0, -c1, &b[off[a]..off[a + 1]], &mut x[off[a]..off[a + 1]]);
        }
    }

    /// Smallest eigenvalue of `-Δ` over all components (no divergence constraint).
    pub fn min_eigenvalue(&self) -> f64 {
        self.comps
            .iter()
            .map(|s| s.spectrum_bounds().0)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.comps
            .iter()
            .map(|s| s.spectrum_bounds().1)
            .fold(0.0, f64::max)
    }
}
