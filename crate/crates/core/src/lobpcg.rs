//! Block LOBPCG for the largest eigenpairs of a symmetric pencil `A x = θ M x`
//! restricted to the range of a projector.
//!
//! Only products with `A`, the diagonal of `M`, the projector and a
//! preconditioner are needed. Rayleigh-Ritz uses SVQB orthonormalization so
//! nearly dependent search directions are dropped instead of breaking the
//! Cholesky factorization.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LobpcgOptions {
    /// Relative residual target for the leading pair:
    /// `‖r‖_{M⁻¹} ≤ tol · max(|θ|, scale)` with `‖x‖_M = 1`.
    pub tol: f64,
    pub max_iter: usize,
    /// Return early once the leading Ritz value exceeds this value (it is a
    /// certified lower bound of the largest eigenvalue).
    pub stop_above: Option<f64>,
}

impl Default for LobpcgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 4000,
            stop_above: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LobpcgOutcome {
    /// Ritz values, largest first.
    pub values: Vec<f64>,
    /// `M`-normalized Ritz vectors matching `values`.
    pub vectors: Vec<Vec<f64>>,
    /// Relative residuals matching `values`.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const DROP_TOL: f64 = 1e-12;

fn mdot(m: &[f64], a: &[f64], b: &[f64]) -> f64 {
    sum::dot3(a, b, m)
}

fn m_normalize(m: &[f64], x: &mut [f64]) -> f64 {
    let n = mdot(m, x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// `M⁻¹`-norm of a residual.
fn inv_m_norm(m: &[f64], r: &[f64]) -> f64 {
    r.iter().zip(m).map(|(ri, mi)| ri * ri / mi).sum::<f64>().sqrt()
}

/// Coefficients `C` with `Cᵀ G C = I` on the numerically independent part of
/// the Gram matrix `G`.
fn svqb(gram: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = gram.nrows();
    let d: Vec<f64> = (0..m).map(|i| 1.0 / gram[(i, i)].max(1e-300).sqrt()).collect();
    let scaled = DMatrix::from_fn(m, m, |i, j| d[i] * gram[(i, j)] * d[j]);
    let eig = SymmetricEigen::new(scaled);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(lmax > 0.0) {
        return None;
    }
    let keep: Vec<usize> = (0..m)
        .filter(|&j| eig.eigenvalues[j] > DROP_TOL * lmax)
        .collect();
    let mut c = DMatrix::zeros(m, keep.len());
    for (col, &j) in keep.iter().enumerate() {
        let s = 1.0 / eig.eigenvalues[j].sqrt();
        for i in 0..m {
            c[(i, col)] = d[i] * eig.eigenvectors[(i, j)] * s;
        }
    }
    Some(c)
}

fn combine(basis: &[&Vec<f64>], coef: &DMatrix<f64>, col: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
    let n = basis[0].len();
    let mut out = vec![0.0; n];
    for i in rows {
        let c = coef[(i, col)];
        if c != 0.0 {
            sum::axpy(c, basis[i], &mut out);
        }
    }
    out
}

/// Computes the `start.len()` largest eigenpairs.
///
/// * `apply_a(x, y)` writes `y = A x`.
/// * `mass` is the diagonal of `M` (positive).
/// * `project(x)` maps `x` into the constraint subspace in place.
/// * `precond(θ, r, w)` writes an approximation of `(θ M - A)⁻¹ r`.
/// * `scale` sets the absolute floor of the residual test.
pub fn lobpcg_max(
    mut apply_a: impl FnMut(&[f64], &mut [f64]),
    mass: &[f64],
    mut project: impl FnMut(&mut [f64]) -> Result<()>,
    mut precond: impl FnMut(f64, &[f64], &mut [f64]),
    start: Vec<Vec<f64>>,
    opts: &LobpcgOptions,
    scale: f64,
) -> Result<LobpcgOutcome> {
    let k = start.len();
    let n = mass.len();
    if k == 0 || start.iter().any(|x| x.len() != n) {
        return Err(Error::Precondition(
            "eigensolver start block is empty or has the wrong length".into(),
        ));
    }
    let mut x = start;
    for xi in x.iter_mut() {
        project(xi)?;
    }
    // Initial Rayleigh-Ritz on the start block.
    {
        let refs: Vec<&Vec<f64>> = x.iter().collect();
        let gm = DMatrix::from_fn(k, k, |i, j| mdot(mass, refs[i], refs[j]));
        let c = svqb(&gm).filter(|c| c.ncols() == k).ok_or_else(|| {
            Error::Precondition("eigensolver start vectors are linearly dependent".into())
        })?;
        x = (0..k).map(|j| combine(&refs, &c, j, 0..k)).collect();
    }

    let mut ax: Vec<Vec<f64>> = vec![vec![0.0; n]; k];
    let mut p: Vec<Vec<f64>> = Vec::new();
    let mut ap: Vec<Vec<f64>> = Vec::new();
    let mut theta = vec![0.0; k];
    let mut res = vec![f64::INFINITY; k];

    for iter in 0..=opts.max_iter {
        for j in 0..k {
            apply_a(&x[j], &mut ax[j]);
            theta[j] = sum::dot(&x[j], &ax[j]) / mdot(mass, &x[j], &x[j]);
        }
        let mut r: Vec<Vec<f64>> = (0..k)
            .map(|j| {
                let mut rj = ax[j].clone();
                for ((ri, xi), mi) in rj.iter_mut().zip(&x[j]).zip(mass) {
                    *ri -= theta[j] * mi * xi;
                }
                rj
            })
            .collect();
        for j in 0..k {
            project(&mut r[j])?;
            res[j] = inv_m_norm(mass, &r[j]) / mdot(mass, &x[j], &x[j]).sqrt() / theta[j].abs().max(scale);
        }
        let done = res[0] <= opts.tol;
        let certified = opts.stop_above.map_or(false, |t| theta[0] > t);
        if done || certified || iter == opts.max_iter {
            if !done && !certified {
                return Err(Error::EigenStagnation {
                    iterations: iter,
                    residual: res[0],
                });
            }
            for xj in x.iter_mut() {
                m_normalize(mass, xj);
            }
            return Ok(LobpcgOutcome {
                values: theta,
                vectors: x,
                residuals: res,
                iterations: iter,
                converged: done,
            });
        }

        let mut w: Vec<Vec<f64>> = Vec::with_capacity(k);
        for j in 0..k {
            let mut wj = vec![0.0; n];
            precond(theta[j], &r[j], &mut wj);
            project(&mut wj)?;
            if m_normalize(mass, &mut wj) > 0.0 {
                w.push(wj);
            }
        }
        let mut aw: Vec<Vec<f64>> = vec![vec![0.0; n]; w.len()];
        for (wj, awj) in w.iter().zip(aw.iter_mut()) {
            apply_a(wj, awj);
        }
        for (pj, apj) in p.iter_mut().zip(ap.iter_mut()) {
            let s = m_normalize(mass, pj);
            if s > 0.0 {
                apj.iter_mut().for_each(|v| *v /= s);
            }
        }

        let basis: Vec<&Vec<f64>> = x.iter().chain(&w).chain(&p).collect();
        let abasis: Vec<&Vec<f64>> = ax.iter().chain(&aw).chain(&ap).collect();
        let m = basis.len();
        let gm = DMatrix::from_fn(m, m, |i, j| mdot(mass, basis[i], basis[j]));
        let mut ga = DMatrix::from_fn(m, m, |i, j| sum::dot(basis[i], abasis[j]));
        ga = (&ga + ga.transpose()) * 0.5;
        let c = svqb(&gm).ok_or(Error::EigenStagnation {
            iterations: iter,
            residual: res[0],
        })?;
        if c.ncols() < k {
            return Err(Error::EigenStagnation {
                iterations: iter,
                residual: res[0],
            });
        }
        let h = c.transpose() * &ga * &c;
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut y = DMatrix::zeros(m, k);
        for (col, &j) in order.iter().take(k).enumerate() {
            let u = eig.eigenvectors.column(j);
            let yc = &c * u;
            y.set_column(col, &yc);
        }
        let new_x: Vec<Vec<f64>> = (0..k).map(|j| combine(&basis, &y, j, 0..m)).collect();
        let new_p: Vec<Vec<f64>> = (0..k).map(|j| combine(&basis, &y, j, k..m)).collect();
        let new_ap: Vec<Vec<f64>> = (0..k).map(|j| combine(&abasis, &y, j, k..m)).collect();
        x = new_x;
        for xj in x.iter_mut() {
            project(xj)?;
            m_normalize(mass, xj);
        }
        p = new_p;
        ap = new_ap;
    }
    unreachable!("loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    /// Diagonal pencil with a known spectrum and a projector removing the
    /// first coordinate.
    #[test]
    fn diagonal_pencil_with_projection() {
        let n = 200;
        let a: Vec<f64> = (0..n).map(|i| if i == 0 { 100.0 } else { -(i as f64) }).collect();
        let m: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let mut rng = Pcg64::seed_from_u64(3);
        let start: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let out = lobpcg_max(
            |x, y| y.iter_mut().zip(x).zip(&a).for_each(|((yi, xi), ai)| *yi = ai * xi),
            &m,
            |x| {
                x[0] = 0.0;
                Ok(())
            },
            |th, r, w| {
                for i in 0..n {
                    w[i] = r[i] / (th * m[i] - a[i]).abs().max(1e-3);
                }
            },
            start,
            &LobpcgOptions::default(),
            1.0,
        )
        .unwrap();
        // Largest eigenvalues of a_i/m_i over i ≥ 1 are -1/2 and -2/3.
        assert!(out.converged);
        assert!((out.values[0] + 0.5).abs() < 1e-12, "{:?}", out.values);
        assert!((out.values[1] + 2.0 / 3.0).abs() < 1e-6);
        assert!(out.vectors[0][0] == 0.0);
    }

    #[test]
    fn stops_when_certified() {
        let n = 50;
        let a: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 * 0.01).collect();
        let m = vec![1.0; n];
        let start = vec![vec![1.0; n], (0..n).map(|i| i as f64).collect()];
        let out = lobpcg_max(
            |x, y| y.iter_mut().zip(x).zip(&a).for_each(|((yi, xi), ai)| *yi = ai * xi),
            &m,
            |_| Ok(()),
            |_, r, w| w.copy_from_slice(r),
            start,
            &LobpcgOptions {
                stop_above: Some(0.0),
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        assert!(!out.converged);
        assert!(out.values[0] > 0.0 && out.values[0] <= 1.0);
    }
}
