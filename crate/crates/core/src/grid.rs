//! Box domains and the MAC staggered grid that discretizes them.
//!
//! Cells are addressed by a three-index `[i, j, k]`; in two dimensions the
//! last axis has a single cell and zero-width stencils. Arrays are stored
//! row-major with the last axis fastest ("axis-major" order).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CELLS: usize = 4;

/// Axis-aligned box `[0, L_0] x ... x [0, L_{d-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub dim: usize,
    pub lengths: Vec<f64>,
    /// Index of the vertical axis; gravity points along its negative direction.
    pub gravity_axis: usize,
}

impl BoxDomain {
    pub fn new(lengths: &[f64], gravity_axis: usize) -> Result<Self> {
        let dim = lengths.len();
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidDomain(format!(
                "dimension must be 2 or 3, got {dim}"
            )));
        }
        if let Some((a, l)) = lengths
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::InvalidDomain(format!(
                "length of axis {a} must be positive, got {l}"
            )));
        }
        if gravity_axis >= dim {
            return Err(Error::InvalidDomain(format!(
                "gravity axis {gravity_axis} out of range for dimension {dim}"
            )));
        }
        Ok(Self {
            dim,
            lengths: lengths.to_vec(),
            gravity_axis,
        })
    }

    /// Unit square with the vertical along the second axis.
    pub fn unit_square() -> Self {
        Self::new(&[1.0, 1.0], 1).expect("unit square is valid")
    }

    pub fn unit_cube() -> Self {
        Self::new(&[1.0, 1.0, 1.0], 2).expect("unit cube is valid")
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }
}

/// Shape of a 3-index array (unused trailing axes have extent 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape(pub [usize; 3]);

impl Shape {
    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [self.0[1] * self.0[2], self.0[2], 1]
    }

    #[inline]
    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.0[1] + i[1]) * self.0[2] + i[2]
    }

    #[inline]
    pub fn unravel(&self, mut idx: usize) -> [usize; 3] {
        let k = idx % self.0[2];
        idx /= self.0[2];
        let j = idx % self.0[1];
        [idx / self.0[1], j, k]
    }

    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [n0, n1, n2] = self.0;
        (0..n0).flat_map(move |i| (0..n1).flat_map(move |j| (0..n2).map(move |k| [i, j, k])))
    }
}

/// Uniform MAC grid on a box: scalars at cell centers, the `a`-th velocity
/// component on the faces normal to axis `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaggeredGrid {
    pub domain: BoxDomain,
    pub cells: [usize; 3],
    pub h: [f64; 3],
}

impl StaggeredGrid {
    pub fn new(domain: BoxDomain, cells: &[usize]) -> Result<Self> {
        if cells.len() != domain.dim {
            return Err(Error::InvalidDomain(format!(
                "expected {} cell counts, got {}",
                domain.dim,
                cells.len()
            )));
        }
        if let Some(n) = cells.iter().find(|&&n| n < MIN_CELLS) {
            return Err(Error::InvalidDomain(format!(
                "every axis needs at least {MIN_CELLS} cells, got {n}"
            )));
        }
        let mut c = [1usize; 3];
        let mut h = [1.0f64; 3];
        for a in 0..domain.dim {
            c[a] = cells[a];
            h[a] = domain.lengths[a] / cells[a] as f64;
        }
        Ok(Self { domain, cells: c, h })
    }

    /// `n x n` grid on the unit square, vertical axis 1.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(BoxDomain::unit_square(), &[n, n])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    #[inline]
    pub fn gravity_axis(&self) -> usize {
        self.domain.gravity_axis
    }

    pub fn cell_shape(&self) -> Shape {
        Shape(self.cells)
    }

    /// Shape of the face array holding velocity component `a`.
    pub fn face_shape(&self, a: usize) -> Shape {
        let mut s = self.cells;
        s[a] += 1;
        Shape(s)
    }

    pub fn cell_count(&self) -> usize {
        self.cell_shape().len()
    }

    pub fn face_count(&self, a: usize) -> usize {
        self.face_shape(a).len()
    }

    /// Quadrature weight of one cell (or one face control volume).
    pub fn cell_volume(&self) -> f64 {
        self.h[..self.dim()].iter().product()
    }

    /// Center of cell `c`.
    pub fn cell_center(&self, c: [usize; 3]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for a in 0..self.dim() {
            x[a] = (c[a] as f64 + 0.5) * self.h[a];
        }
        x
    }

    /// Position of face `f` of the `a`-component array.
    pub fn face_center(&self, a: usize, f: [usize; 3]) -> [f64; 3] {
        let mut x = self.cell_center(f);
        x[a] -= 0.5 * self.h[a];
        x
    }

    /// True if face `f` of component `a` lies on the boundary normal to `a`.
    #[inline]
    pub fn is_boundary_face(&self, a: usize, f: [usize; 3]) -> bool {
        f[a] == 0 || f[a] == self.cells[a]
    }

    /// Height (vertical coordinate) of every cell center, in storage order.
    pub fn cell_heights(&self) -> Vec<f64> {
        let g = self.gravity_axis();
        self.cell_shape()
            .iter()
            .map(|c| self.cell_center(c)[g])
            .collect()
    }

    pub fn same_layout(&self, other: &StaggeredGrid) -> bool {
        self.cells == other.cells
            && self.domain.dim == other.domain.dim
            && self.domain.gravity_axis == other.domain.gravity_axis
            && self
                .h
                .iter()
                .zip(other.h.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-14 * a.abs().max(b.abs()))
    }

    /// Smallest active spacing.
    pub fn h_min(&self) -> f64 {
        self.h[..self.dim()]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_times_cells_is_length() {
        let d = BoxDomain::new(&[2.0, 0.7, 1.3], 2).unwrap();
        let g = StaggeredGrid::new(d, &[8, 5, 13]).unwrap();
        for a in 0..3 {
            assert_eq!(g.h[a] * g.cells[a] as f64, g.domain.lengths[a]);
        }
    }

    #[test]
    fn rejects_bad_domains() {
        assert!(BoxDomain::new(&[1.0], 0).is_err());
        assert!(BoxDomain::new(&[1.0, -1.0], 1).is_err());
        assert!(BoxDomain::new(&[1.0, 1.0], 2).is_err());
        assert!(StaggeredGrid::new(BoxDomain::unit_square(), &[3, 8]).is_err());
        assert!(StaggeredGrid::new(BoxDomain::unit_square(), &[8]).is_err());
    }

    #[test]
    fn index_roundtrip() {
        let s = Shape([3, 4, 5]);
        for (n, i) in s.iter().enumerate() {
            assert_eq!(s.index(i), n);
            assert_eq!(s.unravel(n), i);
        }
    }

    #[test]
    fn face_positions() {
        let g = StaggeredGrid::unit_square(4).unwrap();
        assert_eq!(g.face_shape(0).0, [5, 4, 1]);
        assert_eq!(g.face_shape(1).0, [4, 5, 1]);
        let x = g.face_center(1, [1, 0, 0]);
        assert!((x[0] - 0.375).abs() < 1e-15 && x[1].abs() < 1e-15);
        assert!(g.is_boundary_face(1, [1, 4, 0]));
        assert!(!g.is_boundary_face(1, [0, 2, 0]));
    }
}
