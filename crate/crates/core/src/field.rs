//! Cell-centered scalar fields and face-centered (MAC) vector fields.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::StaggeredGrid;
use crate::sum;

/// One value per cell center.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<StaggeredGrid>,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Arc<StaggeredGrid>) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.cell_count()],
        }
    }

    pub fn from_values(grid: &Arc<StaggeredGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cell_count() {
            return Err(Error::GridMismatch(format!(
                "scalar field has {} values, grid has {} cells",
                values.len(),
                grid.cell_count()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(grid: &Arc<StaggeredGrid>, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = grid
            .cell_shape()
            .iter()
            .map(|c| f(grid.cell_center(c)))
            .collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn constant(grid: &Arc<StaggeredGrid>, v: f64) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![v; grid.cell_count()],
        }
    }

    pub fn grid(&self) -> &Arc<StaggeredGrid> {
        &self.grid
    }

    pub fn check_grid(&self, grid: &StaggeredGrid) -> Result<()> {
        if std::ptr::eq(self.grid.as_ref(), grid) || self.grid.same_layout(grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(
                "scalar field was built on a different grid".into(),
            ))
        }
    }

    /// Unweighted L2 inner product with midpoint quadrature.
    pub fn inner(&self, other: &ScalarField) -> f64 {
        self.grid.cell_volume() * sum::dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn mean(&self) -> f64 {
        sum::sum(&self.values) / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn axpy(&mut self, alpha: f64, x: &ScalarField) {
        sum::axpy(alpha, &x.values, &mut self.values);
    }
}

/// MAC vector field: component `a` lives on the faces normal to axis `a`.
///
/// Components are stored back to back in one buffer; `offsets[a]..offsets[a+1]`
/// is the range of component `a`.
#[derive(Debug, Clone)]
pub struct VectorField {
    grid: Arc<StaggeredGrid>,
    pub data: Vec<f64>,
    offsets: [usize; 4],
}

impl VectorField {
    pub fn layout(grid: &StaggeredGrid) -> [usize; 4] {
        let mut off = [0usize; 4];
        for a in 0..3 {
            let n = if a < grid.dim() { grid.face_count(a) } else { 0 };
            off[a + 1] = off[a] + n;
        }
        off
    }

    pub fn zeros(grid: &Arc<StaggeredGrid>) -> Self {
        let offsets = Self::layout(grid);
        Self {
            grid: grid.clone(),
            data: vec![0.0; offsets[3]],
            offsets,
        }
    }

    pub fn from_flat(grid: &Arc<StaggeredGrid>, data: Vec<f64>) -> Result<Self> {
        let offsets = Self::layout(grid);
        if data.len() != offsets[3] {
            return Err(Error::GridMismatch(format!(
                "vector field has {} values, grid has {} faces",
                data.len(),
                offsets[3]
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            data,
            offsets,
        })
    }

    /// Samples component functions at face centers. Boundary-normal faces are
    /// set to zero (no penetration).
    pub fn from_fn(grid: &Arc<StaggeredGrid>, f: impl Fn(usize, [f64; 3]) -> f64) -> Self {
        let mut v = Self::zeros(grid);
        for a in 0..grid.dim() {
            let shape = grid.face_shape(a);
            let comp = v.component_mut(a);
            for (n, fi) in shape.iter().enumerate() {
                if !grid.is_boundary_face(a, fi) {
                    comp[n] = f(a, grid.face_center(a, fi));
                }
            }
        }
        v
    }

    /// Like [`VectorField::from_fn`] but keeps boundary-normal faces.
    pub fn from_fn_all_faces(
        grid: &Arc<StaggeredGrid>,
        f: impl Fn(usize, [f64; 3]) -> f64,
    ) -> Self {
        let mut v = Self::zeros(grid);
        for a in 0..grid.dim() {
            let shape = grid.face_shape(a);
            let comp = v.component_mut(a);
            for (n, fi) in shape.iter().enumerate() {
                comp[n] = f(a, grid.face_center(a, fi));
            }
        }
        v
    }

    pub fn grid(&self) -> &Arc<StaggeredGrid> {
        &self.grid
    }

    pub fn check_grid(&self, grid: &StaggeredGrid) -> Result<()> {
        if std::ptr::eq(self.grid.as_ref(), grid) || self.grid.same_layout(grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(
                "vector field was built on a different grid".into(),
            ))
        }
    }

    pub fn component(&self, a: usize) -> &[f64] {
        &self.data[self.offsets[a]..self.offsets[a + 1]]
    }

    pub fn component_mut(&mut self, a: usize) -> &mut [f64] {
        &mut self.data[self.offsets[a]..self.offsets[a + 1]]
    }

    pub fn offsets(&self) -> [usize; 4] {
        self.offsets
    }

    /// Component along the gravity axis.
    pub fn vertical(&self) -> &[f64] {
        self.component(self.grid.gravity_axis())
    }

    /// Zeroes every boundary-normal face.
    pub fn enforce_no_penetration(&mut self) {
        let grid = self.grid.clone();
        for a in 0..grid.dim() {
            let shape = grid.face_shape(a);
            let comp = self.component_mut(a);
            for (n, fi) in shape.iter().enumerate() {
                if grid.is_boundary_face(a, fi) {
                    comp[n] = 0.0;
                }
            }
        }
    }

    /// Largest magnitude on a boundary-normal face.
    pub fn boundary_normal_max(&self) -> f64 {
        let mut m = 0.0f64;
        for a in 0..self.grid.dim() {
            let shape = self.grid.face_shape(a);
            for (n, fi) in shape.iter().enumerate() {
                if self.grid.is_boundary_face(a, fi) {
                    m = m.max(self.component(a)[n].abs());
                }
            }
        }
        m
    }

    /// Unweighted L2 inner product: sum over faces times the cell volume.
    pub fn inner(&self, other: &VectorField) -> f64 {
        self.grid.cell_volume() * sum::dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// L2 norm of a single component.
    pub fn component_norm(&self, a: usize) -> f64 {
        (self.grid.cell_volume() * sum::norm_sq(self.component(a))).sqrt()
    }

    /// L2 norm of all components except the vertical one.
    pub fn horizontal_norm(&self) -> f64 {
        let g = self.grid.gravity_axis();
        (0..self.grid.dim())
            .filter(|&a| a != g)
            .map(|a| self.component_norm(a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        sum::max_abs(&self.data)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn axpy(&mut self, alpha: f64, x: &VectorField) {
        sum::axpy(alpha, &x.data, &mut self.data);
    }

    pub fn sub(&self, other: &VectorField) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let g = Arc::new(StaggeredGrid::unit_square(4).unwrap());
        let v = VectorField::zeros(&g);
        assert_eq!(v.component(0).len(), 20);
        assert_eq!(v.component(1).len(), 20);
        assert_eq!(v.data.len(), 40);
        assert!(ScalarField::from_values(&g, vec![0.0; 15]).is_err());
        assert!(VectorField::from_flat(&g, vec![0.0; 39]).is_err());
    }

    #[test]
    fn no_penetration_sampling() {
        let g = Arc::new(StaggeredGrid::unit_square(6).unwrap());
        let v = VectorField::from_fn(&g, |_, _| 1.0);
        assert_eq!(v.boundary_normal_max(), 0.0);
        let w = VectorField::from_fn_all_faces(&g, |_, _| 1.0);
        assert_eq!(w.boundary_normal_max(), 1.0);
    }
}
