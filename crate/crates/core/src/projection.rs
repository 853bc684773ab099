//! Discrete Leray projection onto divergence-free, no-penetration fields.
//!
//! `P v = v - G φ` with `D G φ = D v` (homogeneous Neumann, zero-mean φ).
//! Because `G = -D^T` on the MAC grid, `P` is the orthogonal projector in the
//! unweighted L2 inner product. The weighted variant `v - W^{-1} G φ` with
//! `D W^{-1} G φ = D v` is orthogonal in the `W`-weighted inner product and
//! is what the time steppers use for variable density.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::StaggeredGrid;
use crate::krylov::{pcg, CgOptions, CgStats};
use crate::ops;
use crate::separable::SeparableSolver;
use crate::sum;

pub const DEFAULT_POISSON_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Projector {
    grid: Arc<StaggeredGrid>,
    poisson: SeparableSolver,
    opts: CgOptions,
}

impl Projector {
    pub fn new(grid: &Arc<StaggeredGrid>) -> Self {
        Self::with_tolerance(grid, DEFAULT_POISSON_TOL)
    }

    pub fn with_tolerance(grid: &Arc<StaggeredGrid>, tol: f64) -> Self {
        Self {
            grid: grid.clone(),
            poisson: SeparableSolver::pressure(grid),
            opts: CgOptions {
                tol,
                max_iter: 400,
                zero_mean: true,
            },
        }
    }

    pub fn grid(&self) -> &Arc<StaggeredGrid> {
        &self.grid
    }

    pub fn tolerance(&self) -> f64 {
        self.opts.tol
    }

    fn check_input(&self, v: &VectorField) -> Result<()> {
        v.check_grid(&self.grid)?;
        let bn = v.boundary_normal_max();
        if bn > 0.0 {
            return Err(Error::Precondition(format!(
                "projection input has nonzero boundary-normal faces (max {bn:e})"
            )));
        }
        Ok(())
    }

    /// Returns `P v`.
    pub fn project(&self, v: &VectorField) -> Result<VectorField> {
        Ok(self.project_with_potential(v)?.0)
    }

    /// Returns `(P v, φ)` with `P v = v - G φ`.
    pub fn project_with_potential(&self, v: &VectorField) -> Result<(VectorField, ScalarField)> {
        self.check_input(v)?;
        let mut out = v.clone();
        let mut phi = ScalarField::zeros(&self.grid);
        self.project_in_place(&mut out.data, &mut phi.values)?;
        Ok((out, phi))
    }

    /// In-place projection of a flat MAC buffer; `phi` receives the potential.
    pub(crate) fn project_in_place(&self, v: &mut [f64], phi: &mut [f64]) -> Result<CgStats> {
        let grid = &*self.grid;
        let nv = v.len();
        let mut rhs = vec![0.0; grid.cell_count()];
        ops::divergence_into(grid, v, &mut rhs);
        // Solve (-DG) φ = -D v.
        rhs.iter_mut().for_each(|x| *x = -*x);
        phi.iter_mut().for_each(|x| *x = 0.0);
        let mut gbuf = vec![0.0; nv];
        let stats = pcg(
            |x, y| {
                let mut g = vec![0.0; nv];
                ops::gradient_into(grid, x, &mut g);
                ops::divergence_into(grid, &g, y);
                y.iter_mut().for_each(|t| *t = -*t);
            },
            |r, z| self.poisson.solve(0.0, -1.0, r, z),
            &rhs,
            phi,
            self.opts,
        )?;
        ops::gradient_into(grid, phi, &mut gbuf);
        sum::axpy(-1.0, &gbuf, v);
        Ok(stats)
    }

    /// Density-weighted projection: returns `(v - W^{-1} G φ, φ)` where
    /// `D W^{-1} G φ = D v` and `W` holds positive face weights.
    pub fn project_weighted(
        &self,
        v: &VectorField,
        face_weights: &[f64],
    ) -> Result<(VectorField, ScalarField)> {
        self.check_input(v)?;
        let mut out = v.clone();
        let mut phi = ScalarField::zeros(&self.grid);
        self.project_weighted_in_place(&mut out.data, face_weights, &mut phi.values)?;
        Ok((out, phi))
    }

    pub(crate) fn project_weighted_in_place(
        &self,
        v: &mut [f64],
        face_weights: &[f64],
        phi: &mut [f64],
    ) -> Result<CgStats> {
        let grid = &*self.grid;
        if let Some((index, &value)) = face_weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > 0.0))
        {
            return Err(Error::NonpositiveWeight { index, value });
        }
        let nv = v.len();
        let inv_w: Vec<f64> = face_weights.iter().map(|w| 1.0 / w).collect();
        let mean_inv = sum::sum(&inv_w) / inv_w.len() as f64;
        let mut rhs = vec![0.0; grid.cell_count()];
        ops::divergence_into(grid, v, &mut rhs);
        rhs.iter_mut().for_each(|x| *x = -*x);
        phi.iter_mut().for_each(|x| *x = 0.0);
        let mut g = vec![0.0; nv];
        let stats = pcg(
            |x, y| {
                let mut gx = vec![0.0; nv];
                ops::gradient_into(grid, x, &mut gx);
                gx.iter_mut().zip(&inv_w).for_each(|(a, b)| *a *= b);
                ops::divergence_into(grid, &gx, y);
                y.iter_mut().for_each(|t| *t = -*t);
            },
            |r, z| self.poisson.solve(0.0, -mean_inv, r, z),
            &rhs,
            phi,
            self.opts,
        )?;
        ops::gradient_into(grid, phi, &mut g);
        for ((vi, gi), wi) in v.iter_mut().zip(&g).zip(&inv_w) {
            *vi -= gi * wi;
        }
        Ok(stats)
    }
}

/// Convenience wrapper with the default tolerance.
pub fn leray_project(v: &VectorField) -> Result<VectorField> {
    Projector::new(v.grid()).project(v)
}

/// Relative divergence `‖D v‖ / (‖v‖ / h_min)`, the dimensionless measure
/// used by the divergence-free checks.
pub fn relative_divergence(v: &VectorField) -> f64 {
    let n = v.norm();
    if n == 0.0 {
        return 0.0;
    }
    ops::discrete_divergence(v).norm() * v.grid().h_min() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxDomain;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn random_interior(g: &Arc<StaggeredGrid>, rng: &mut Pcg64) -> VectorField {
        let mut v = VectorField::zeros(g);
        v.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        v.enforce_no_penetration();
        v
    }

    fn grids() -> Vec<Arc<StaggeredGrid>> {
        vec![
            Arc::new(StaggeredGrid::unit_square(12).unwrap()),
            Arc::new(
                StaggeredGrid::new(BoxDomain::new(&[2.0, 1.0], 1).unwrap(), &[10, 6]).unwrap(),
            ),
            Arc::new(
                StaggeredGrid::new(BoxDomain::new(&[1.0, 0.8, 1.2], 2).unwrap(), &[5, 4, 6])
                    .unwrap(),
            ),
        ]
    }

    #[test]
    fn divergence_free_input_unchanged() {
        for g in grids() {
            let p = Projector::new(&g);
            let mut rng = Pcg64::seed_from_u64(1);
            let v = p.project(&random_interior(&g, &mut rng)).unwrap();
            let w = p.project(&v).unwrap();
            assert!(w.sub(&v).norm() <= 1e-10 * v.norm());
        }
    }

    #[test]
    fn gradients_are_annihilated() {
        for g in grids() {
            let p = Projector::new(&g);
            let phi = ScalarField::from_fn(&g, |x| (3.0 * x[0]).sin() * x[1] * x[1]);
            let gp = ops::discrete_gradient(&phi);
            assert!(p.project(&gp).unwrap().norm() <= 1e-10 * gp.norm());
        }
    }

    #[test]
    fn random_input_divergence_and_idempotence() {
        for g in grids() {
            let p = Projector::new(&g);
            let mut rng = Pcg64::seed_from_u64(9);
            for _ in 0..10 {
                let v = random_interior(&g, &mut rng);
                let pv = p.project(&v).unwrap();
                let div = ops::discrete_divergence(&pv).norm();
                assert!(div <= 1e-10 * v.norm() / g.h_min(), "div {div}");
                let ppv = p.project(&pv).unwrap();
                assert!(ppv.sub(&pv).norm() <= 1e-10 * v.norm());
            }
        }
    }

    #[test]
    fn self_adjoint() {
        for g in grids() {
            let p = Projector::new(&g);
            let mut rng = Pcg64::seed_from_u64(5);
            let a = random_interior(&g, &mut rng);
            let b = random_interior(&g, &mut rng);
            let l = p.project(&a).unwrap().inner(&b);
            let r = a.inner(&p.project(&b).unwrap());
            assert!((l - r).abs() <= 1e-10 * a.norm() * b.norm());
        }
    }

    #[test]
    fn weighted_projection_is_weighted_orthogonal() {
        let g = Arc::new(StaggeredGrid::unit_square(10).unwrap());
        let p = Projector::new(&g);
        let rho = ScalarField::from_fn(&g, |x| 1.0 + x[1] + 0.3 * (5.0 * x[0]).sin());
        let w = ops::face_weights(&rho);
        let mut rng = Pcg64::seed_from_u64(8);
        let v = random_interior(&g, &mut rng);
        let (pv, _) = p.project_weighted(&v, &w).unwrap();
        assert!(relative_divergence(&pv) < 1e-9);
        // v - Pv is W-orthogonal to every divergence-free field.
        let d = p.project(&random_interior(&g, &mut rng)).unwrap();
        let diff = v.sub(&pv);
        let ip = g.cell_volume() * sum::dot3(&diff.data, &d.data, &w);
        assert!(ip.abs() < 1e-9 * diff.norm() * d.norm());
    }

    #[test]
    fn rejects_boundary_normal_flow() {
        let g = Arc::new(StaggeredGrid::unit_square(6).unwrap());
        let v = VectorField::from_fn_all_faces(&g, |_, _| 1.0);
        assert!(matches!(
            Projector::new(&g).project(&v),
            Err(Error::Precondition(_))
        ));
    }
}
