//! Discrete differential operators on the MAC grid.
//!
//! Divergence and gradient are exact negative adjoints of each other for
//! fields whose boundary-normal faces vanish. The vector Laplacian closes
//! tangential no-slip walls with a reflected ghost value (`ghost = -interior`),
//! which keeps the stencil symmetric and negative definite.

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::StaggeredGrid;
use crate::sum;

/// Cell-centered divergence from face differences.
pub fn discrete_divergence(v: &VectorField) -> ScalarField {
    let grid = v.grid();
    let mut out = ScalarField::zeros(grid);
    divergence_into(grid, &v.data, &mut out.values);
    out
}

pub(crate) fn divergence_into(grid: &StaggeredGrid, v: &[f64], out: &mut [f64]) {
    let off = VectorField::layout(grid);
    let cs = grid.cell_shape();
    out.iter_mut().for_each(|x| *x = 0.0);
    for a in 0..grid.dim() {
        let fs = grid.face_shape(a);
        let step = fs.strides()[a];
        let comp = &v[off[a]..off[a + 1]];
        let inv_h = 1.0 / grid.h[a];
        for (ci, c) in cs.iter().enumerate() {
            let lo = fs.index(c);
            out[ci] += (comp[lo + step] - comp[lo]) * inv_h;
        }
    }
}

/// Face-centered gradient; boundary-normal faces are left at zero.
pub fn discrete_gradient(p: &ScalarField) -> VectorField {
    let grid = p.grid();
    let mut out = VectorField::zeros(grid);
    gradient_into(grid, &p.values, &mut out.data);
    out
}

pub(crate) fn gradient_into(grid: &StaggeredGrid, p: &[f64], out: &mut [f64]) {
    let off = VectorField::layout(grid);
    let cs = grid.cell_shape();
    for a in 0..grid.dim() {
        let fs = grid.face_shape(a);
        let cstep = cs.strides()[a];
        let inv_h = 1.0 / grid.h[a];
        let comp = &mut out[off[a]..off[a + 1]];
        for (n, f) in fs.iter().enumerate() {
            comp[n] = if grid.is_boundary_face(a, f) {
                0.0
            } else {
                let ci = cs.index(f);
                (p[ci] - p[ci - cstep]) * inv_h
            };
        }
    }
}

/// Componentwise 5-point (2D) / 7-point (3D) Laplacian with no-slip closure.
///
/// Acts on interior unknowns only: boundary-normal faces are treated as zero
/// on input and are zero on output.
pub fn discrete_laplacian(v: &VectorField) -> VectorField {
    let grid = v.grid();
    let mut out = VectorField::zeros(grid);
    laplacian_into(grid, &v.data, &mut out.data);
    out
}

pub(crate) fn laplacian_into(grid: &StaggeredGrid, v: &[f64], out: &mut [f64]) {
    let off = VectorField::layout(grid);
    let dim = grid.dim();
    for a in 0..dim {
        let fs = grid.face_shape(a);
        let st = fs.strides();
        let comp = &v[off[a]..off[a + 1]];
        let res = &mut out[off[a]..off[a + 1]];
        let n = fs.0;
        for (idx, f) in fs.iter().enumerate() {
            if grid.is_boundary_face(a, f) {
                res[idx] = 0.0;
                continue;
            }
            let x = comp[idx];
            let mut acc = 0.0;
            for b in 0..dim {
                let ih2 = 1.0 / (grid.h[b] * grid.h[b]);
                let (lo, hi) = if b == a {
                    // Dirichlet nodes: the wall faces carry zero.
                    let lo = if f[b] == 1 { 0.0 } else { comp[idx - st[b]] };
                    let hi = if f[b] + 1 == n[b] - 1 { 0.0 } else { comp[idx + st[b]] };
                    (lo, hi)
                } else {
                    let lo = if f[b] == 0 { -x } else { comp[idx - st[b]] };
                    let hi = if f[b] + 1 == n[b] { -x } else { comp[idx + st[b]] };
                    (lo, hi)
                };
                acc += (lo - 2.0 * x + hi) * ih2;
            }
            res[idx] = acc;
        }
    }
}

/// `∫|∇v|²` assembled as a sum of squared differences, including the wall
/// contributions of the no-slip closure. Equals `-<Δv, v>` identically.
pub fn h1_seminorm_sq(v: &VectorField) -> f64 {
    let grid = v.grid();
    let off = VectorField::layout(grid);
    let dim = grid.dim();
    let mut parts = Vec::with_capacity(dim * dim);
    for a in 0..dim {
        let fs = grid.face_shape(a);
        let st = fs.strides();
        let comp = &v.data[off[a]..off[a + 1]];
        let n = fs.0;
        for b in 0..dim {
            let ih2 = 1.0 / (grid.h[b] * grid.h[b]);
            let mut terms = Vec::with_capacity(fs.len());
            for (idx, f) in fs.iter().enumerate() {
                if grid.is_boundary_face(a, f) {
                    // Link from the wall node to the first interior node.
                    if b == a && f[a] == 0 {
                        let next = comp[idx + st[a]];
                        if n[a] > 2 {
                            terms.push(next * next);
                        }
                    }
                    continue;
                }
                let x = comp[idx];
                if b == a {
                    let hi = if f[b] + 1 == n[b] - 1 { 0.0 } else { comp[idx + st[b]] };
                    terms.push((hi - x) * (hi - x));
                } else {
                    if f[b] == 0 {
                        terms.push(2.0 * x * x);
                    }
                    if f[b] + 1 == n[b] {
                        terms.push(2.0 * x * x);
                    } else {
                        let d = comp[idx + st[b]] - x;
                        terms.push(d * d);
                    }
                }
            }
            parts.push(ih2 * sum::sum(&terms));
        }
    }
    grid.cell_volume() * sum::sum(&parts)
}

/// Cell-centered average of the vertical velocity component.
pub fn vertical_to_cells(grid: &StaggeredGrid, v: &VectorField) -> ScalarField {
    let mut out = ScalarField::zeros(v.grid());
    vertical_to_cells_into(grid, &v.data, &mut out.values);
    out
}

pub(crate) fn vertical_to_cells_into(grid: &StaggeredGrid, v: &[f64], out: &mut [f64]) {
    let g = grid.gravity_axis();
    let off = VectorField::layout(grid);
    let fs = grid.face_shape(g);
    let step = fs.strides()[g];
    let comp = &v[off[g]..off[g + 1]];
    for (ci, c) in grid.cell_shape().iter().enumerate() {
        let lo = fs.index(c);
        out[ci] = 0.5 * (comp[lo] + comp[lo + step]);
    }
}

/// Adjoint of [`vertical_to_cells`]: spreads a cell field onto interior
/// vertical faces (boundary faces get zero). The result only has a vertical
/// component.
pub fn cells_to_vertical(s: &ScalarField) -> VectorField {
    let grid = s.grid();
    let mut out = VectorField::zeros(grid);
    add_cells_to_vertical(grid, &s.values, 1.0, &mut out.data);
    out
}

/// `out_vertical += scale * I^T s`.
pub(crate) fn add_cells_to_vertical(grid: &StaggeredGrid, s: &[f64], scale: f64, out: &mut [f64]) {
    let g = grid.gravity_axis();
    let off = VectorField::layout(grid);
    let fs = grid.face_shape(g);
    let cstep = grid.cell_shape().strides()[g];
    let cs = grid.cell_shape();
    let comp = &mut out[off[g]..off[g + 1]];
    for (n, f) in fs.iter().enumerate() {
        if !grid.is_boundary_face(g, f) {
            let ci = cs.index(f);
            comp[n] += scale * 0.5 * (s[ci - cstep] + s[ci]);
        }
    }
}

/// Face weights obtained from a cell field by averaging the two adjacent
/// cells (boundary faces take the single adjacent cell).
pub fn face_weights(w: &ScalarField) -> Vec<f64> {
    let grid = w.grid();
    let off = VectorField::layout(grid);
    let cs = grid.cell_shape();
    let mut out = vec![0.0; off[3]];
    for a in 0..grid.dim() {
        let fs = grid.face_shape(a);
        let cstep = cs.strides()[a];
        let n = grid.cells[a];
        for (idx, f) in fs.iter().enumerate() {
            let val = if f[a] == 0 {
                w.values[cs.index(f)]
            } else if f[a] == n {
                let mut c = f;
                c[a] -= 1;
                w.values[cs.index(c)]
            } else {
                let ci = cs.index(f);
                0.5 * (w.values[ci - cstep] + w.values[ci])
            };
            out[off[a] + idx] = val;
        }
    }
    out
}

/// Weighted L2 inner product `∫ w a·b` with the weight averaged to faces.
pub fn weighted_inner(a: &VectorField, b: &VectorField, w: &ScalarField) -> Result<f64> {
    let grid = a.grid();
    b.check_grid(grid)?;
    w.check_grid(grid)?;
    if let Some((index, &value)) = w.values.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
        return Err(Error::NonpositiveWeight { index, value });
    }
    let fw = face_weights(w);
    Ok(grid.cell_volume() * sum::dot3(&a.data, &b.data, &fw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxDomain;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;
    use std::sync::Arc;

    fn grid2(n: usize) -> Arc<StaggeredGrid> {
        Arc::new(StaggeredGrid::unit_square(n).unwrap())
    }

    fn grid3() -> Arc<StaggeredGrid> {
        let d = BoxDomain::new(&[1.0, 0.8, 1.2], 2).unwrap();
        Arc::new(StaggeredGrid::new(d, &[5, 4, 6]).unwrap())
    }

    fn random_interior(g: &Arc<StaggeredGrid>, rng: &mut Pcg64) -> VectorField {
        let mut v = VectorField::zeros(g);
        v.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        v.enforce_no_penetration();
        v
    }

    fn random_scalar(g: &Arc<StaggeredGrid>, rng: &mut Pcg64) -> ScalarField {
        let mut s = ScalarField::zeros(g);
        s.values.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        s
    }

    #[test]
    fn divergence_examples() {
        let g = grid2(8);
        let c = VectorField::from_fn_all_faces(&g, |a, _| if a == 0 { 1.0 } else { 0.0 });
        assert!(discrete_divergence(&c).values.iter().all(|x| *x == 0.0));

        let lin = VectorField::from_fn_all_faces(&g, |a, x| if a == 0 { x[0] } else { -x[1] });
        assert!(discrete_divergence(&lin).values.iter().all(|x| x.abs() < 1e-13));

        let ones = VectorField::from_fn_all_faces(&g, |a, x| if a == 0 { x[0] } else { 0.0 });
        assert!(discrete_divergence(&ones)
            .values
            .iter()
            .all(|x| (x - 1.0).abs() < 1e-13));
    }

    #[test]
    fn gradient_examples() {
        let g = grid2(8);
        let c = ScalarField::constant(&g, 3.0);
        assert_eq!(discrete_gradient(&c).max_abs(), 0.0);

        let z = ScalarField::from_fn(&g, |x| x[1]);
        let gz = discrete_gradient(&z);
        assert_eq!(sum::max_abs(gz.component(0)), 0.0);
        let fs = g.face_shape(1);
        for (n, f) in fs.iter().enumerate() {
            let want = if g.is_boundary_face(1, f) { 0.0 } else { 1.0 };
            assert!((gz.component(1)[n] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_div_duality_random() {
        let mut rng = Pcg64::seed_from_u64(7);
        for g in [grid2(9), grid3()] {
            for _ in 0..100 {
                let p = random_scalar(&g, &mut rng);
                let v = random_interior(&g, &mut rng);
                let lhs = discrete_gradient(&p).inner(&v);
                let rhs = p.inner(&discrete_divergence(&v));
                assert!((lhs + rhs).abs() < 1e-12 * p.norm() * v.norm());
            }
        }
    }

    #[test]
    fn laplacian_symmetric_negative() {
        let mut rng = Pcg64::seed_from_u64(11);
        for g in [grid2(7), grid3()] {
            assert_eq!(discrete_laplacian(&VectorField::zeros(&g)).max_abs(), 0.0);
            for _ in 0..100 {
                let u = random_interior(&g, &mut rng);
                let w = random_interior(&g, &mut rng);
                let a = discrete_laplacian(&u).inner(&w);
                let b = u.inner(&discrete_laplacian(&w));
                assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
                assert!(discrete_laplacian(&u).inner(&u) < 0.0);
            }
        }
    }

    #[test]
    fn seminorm_matches_operator() {
        let mut rng = Pcg64::seed_from_u64(3);
        for g in [grid2(6), grid3()] {
            assert_eq!(h1_seminorm_sq(&VectorField::zeros(&g)), 0.0);
            for _ in 0..50 {
                let u = random_interior(&g, &mut rng);
                let s = h1_seminorm_sq(&u);
                let op = -discrete_laplacian(&u).inner(&u);
                assert!(s > 0.0);
                assert!((s - op).abs() <= 1e-12 * s);
                let s3 = h1_seminorm_sq(&u.scaled(3.0));
                assert!((s3 - 9.0 * s).abs() <= 1e-12 * s3);
            }
        }
    }

    #[test]
    fn interpolation_adjoint() {
        let mut rng = Pcg64::seed_from_u64(5);
        for g in [grid2(6), grid3()] {
            let v = random_interior(&g, &mut rng);
            let s = random_scalar(&g, &mut rng);
            let a = vertical_to_cells(&g, &v).inner(&s);
            let b = v.inner(&cells_to_vertical(&s));
            assert!((a - b).abs() < 1e-13 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn weighted_inner_examples() {
        let g = grid2(16);
        let unit = VectorField::from_fn_all_faces(&g, |_, _| 1.0);
        let one = ScalarField::constant(&g, 1.0);
        // All faces, including the walls, are weighted by one cell volume.
        let faces = unit.data.len() as f64 * g.cell_volume();
        assert!((weighted_inner(&unit, &unit, &one).unwrap() - faces).abs() < 1e-12);

        let interior = VectorField::from_fn(&g, |_, _| 1.0);
        let mut rng = Pcg64::seed_from_u64(1);
        let b = random_interior(&g, &mut rng);
        let w = ScalarField::from_fn(&g, |x| 1.0 + x[1]);
        let ab = weighted_inner(&interior, &b, &w).unwrap();
        assert_eq!(weighted_inner(&interior.scaled(2.0), &b, &w).unwrap(), 2.0 * ab);

        let bad = ScalarField::from_fn(&g, |x| x[0] - 0.5);
        assert!(matches!(
            weighted_inner(&interior, &interior, &bad),
            Err(Error::NonpositiveWeight { .. })
        ));
    }

    /// a = (x(1-x), z(1-z)), w = 1 + z on the unit square:
    /// ∫(1+z)x²(1-x)² = 1/20 and ∫(1+z)z²(1-z)² = 1/20.
    #[test]
    fn weighted_inner_second_order() {
        let exact = 0.1;
        let errs: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&n| {
                let g = grid2(n);
                let a = VectorField::from_fn(&g, |c, x| x[c] * (1.0 - x[c]));
                let w = ScalarField::from_fn(&g, |x| 1.0 + x[1]);
                (weighted_inner(&a, &a, &w).unwrap() - exact).abs()
            })
            .collect();
        assert!((errs[0] / errs[1]).log2() > 1.9, "errors {errs:?}");
        assert!((errs[1] / errs[2]).log2() > 1.9, "errors {errs:?}");
    }
}
