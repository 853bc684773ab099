//! Preconditioned conjugate gradients for the symmetric solves.

use crate::error::{Error, Result};
use crate::sum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Relative residual target `‖b - Ax‖ ≤ tol ‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Remove the constant component from residuals (singular Neumann problems).
    pub zero_mean: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
            zero_mean: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn remove_mean(x: &mut [f64]) {
    let m = sum::sum(x) / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= m);
}

/// Solves `A x = b` for symmetric positive (semi)definite `A`, starting from
/// the incoming `x`. A zero right-hand side returns `x = 0` without iterating.
pub fn pcg(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    mut precond: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    opts: CgOptions,
) -> Result<CgStats> {
    let n = b.len();
    let mut rhs = b.to_vec();
    if opts.zero_mean {
        remove_mean(&mut rhs);
    }
    let bnorm = sum::norm_sq(&rhs).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(&rhs) {
        *ri = bi - *ri;
    }
    if opts.zero_mean {
        remove_mean(&mut r);
    }
    let mut rel = sum::norm_sq(&r).sqrt() / bnorm;
    if rel <= opts.tol {
        return Ok(CgStats {
            iterations: 0,
            relative_residual: rel,
        });
    }
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    if opts.zero_mean {
        remove_mean(&mut z);
    }
    let mut p = z.clone();
    let mut rz = sum::dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=opts.max_iter {
        apply(&p, &mut ap);
        let pap = sum::dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NoConvergence {
                solver: "pcg (indefinite operator)",
                iterations: it,
                residual: rel,
            });
        }
        let alpha = rz / pap;
        sum::axpy(alpha, &p, x);
        sum::axpy(-alpha, &ap, &mut r);
        if opts.zero_mean {
            remove_mean(&mut r);
        }
        rel = sum::norm_sq(&r).sqrt() / bnorm;
        if rel <= opts.tol {
            if opts.zero_mean {
                remove_mean(x);
            }
            return Ok(CgStats {
                iterations: it,
                relative_residual: rel,
            });
        }
        precond(&r, &mut z);
        if opts.zero_mean {
            remove_mean(&mut z);
        }
        let rz_new = sum::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(Error::NoConvergence {
        solver: "pcg",
        iterations: opts.max_iter,
        residual: rel,
    })
}
