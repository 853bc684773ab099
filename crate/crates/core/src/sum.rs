//! Fixed-order pairwise reductions.
//!
//! Every reduction in the crate goes through these helpers so that results
//! are bit-reproducible for a given input length.

const LEAF: usize = 64;

pub fn sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    sum(&xs[..mid]) + sum(&xs[mid..])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= LEAF {
        let mut s = 0.0;
        for (x, y) in a.iter().zip(b) {
            s += x * y;
        }
        return s;
    }
    let mid = a.len() / 2;
    dot(&a[..mid], &b[..mid]) + dot(&a[mid..], &b[mid..])
}

/// `sum_i w_i a_i b_i`.
pub fn dot3(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    debug_assert!(a.len() == b.len() && a.len() == w.len());
    if a.len() <= LEAF {
        let mut s = 0.0;
        for ((x, y), z) in a.iter().zip(b).zip(w) {
            s += x * y * z;
        }
        return s;
    }
    let mid = a.len() / 2;
    dot3(&a[..mid], &b[..mid], &w[..mid]) + dot3(&a[mid..], &b[mid..], &w[mid..])
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
