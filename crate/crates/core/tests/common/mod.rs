//! Dense reference computations shared by the integration tests.
//!
//! Every matrix is assembled by probing the public operators with unit
//! vectors; the divergence-free subspace is an explicit null-space basis of
//! the divergence matrix, so none of the iterative machinery is involved.

#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rtspectra::ops;
use rtspectra::{DensityProfile, PhysicalParams, ScalarField, StaggeredGrid, VectorField};

pub struct DenseProblem {
    pub grid: Arc<StaggeredGrid>,
    /// Flat indices of the interior (non boundary-normal) faces.
    pub interior: Vec<usize>,
    /// Orthonormal basis of the discrete divergence-free interior fields.
    pub q: DMatrix<f64>,
    pub buoyancy: DMatrix<f64>,
    pub laplacian: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    /// Interpolation of vertical faces to cells, restricted to interior faces.
    pub interp: DMatrix<f64>,
    pub drho: Vec<f64>,
    pub params: PhysicalParams,
}

fn unit(grid: &Arc<StaggeredGrid>, idx: usize) -> VectorField {
    let mut v = VectorField::zeros(grid);
    v.data[idx] = 1.0;
    v
}

pub fn interior_faces(grid: &Arc<StaggeredGrid>) -> Vec<usize> {
    let off = VectorField::layout(grid);
    let mut out = Vec::new();
    for a in 0..grid.dim() {
        for (n, f) in grid.face_shape(a).iter().enumerate() {
            if !grid.is_boundary_face(a, f) {
                out.push(off[a] + n);
            }
        }
    }
    out
}

impl DenseProblem {
    pub fn new(grid: &Arc<StaggeredGrid>, profile: &DensityProfile, params: PhysicalParams) -> Self {
        let interior = interior_faces(grid);
        let m = interior.len();
        let nc = grid.cell_count();
        let gax = grid.gravity_axis();
        let rho = ScalarField::from_fn(grid, |x| profile.rho(x[gax]));
        let drho: Vec<f64> = ScalarField::from_fn(grid, |x| profile.drho(x[gax])).values;
        let w = ops::face_weights(&rho);

        let mut div = DMatrix::zeros(nc, m);
        let mut lap = DMatrix::zeros(m, m);
        let mut interp = DMatrix::zeros(nc, m);
        for (j, &fj) in interior.iter().enumerate() {
            let e = unit(grid, fj);
            let d = ops::discrete_divergence(&e);
            let l = ops::discrete_laplacian(&e);
            let c = ops::vertical_to_cells(grid, &e);
            for i in 0..nc {
                div[(i, j)] = d.values[i];
                interp[(i, j)] = c.values[i];
            }
            for (i, &fi) in interior.iter().enumerate() {
                lap[(i, j)] = l.data[fi];
            }
        }
        let dd = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(drho.clone()));
        let buoyancy = interp.transpose() * dd * &interp * params.g;
        let mass = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            m,
            interior.iter().map(|&f| w[f]),
        ));

        let dtd = div.transpose() * &div;
        let eig = SymmetricEigen::new(dtd);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let null: Vec<usize> = (0..m).filter(|&j| eig.eigenvalues[j] < 1e-10 * top).collect();
        let mut q = DMatrix::zeros(m, null.len());
        for (c, &j) in null.iter().enumerate() {
            q.set_column(c, &eig.eigenvectors.column(j));
        }
        Self {
            grid: grid.clone(),
            interior,
            q,
            buoyancy,
            laplacian: lap,
            mass,
            interp,
            drho,
            params,
        }
    }

    /// Precomputes `L⁻¹ QᵀBQ L⁻ᵀ` and `L⁻¹ QᵀΔQ L⁻ᵀ` with `LLᵀ = QᵀMQ`.
    pub fn reduced(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let qt = self.q.transpose();
        let mr = &qt * &self.mass * &self.q;
        let chol = mr.cholesky().expect("reduced mass is SPD");
        let linv = chol.l().try_inverse().unwrap();
        let b = &linv * (&qt * &self.buoyancy * &self.q) * linv.transpose();
        let l = &linv * (&qt * &self.laplacian * &self.q) * linv.transpose();
        (sym(b), sym(l))
    }

    /// All eigenvalues of the reduced pencil at `s`, descending.
    pub fn alpha_spectrum(&self, s: f64) -> Vec<f64> {
        let (b, l) = self.reduced();
        spectrum(&(b + l * (s * self.params.mu)))
    }

    pub fn alpha(&self, s: f64) -> f64 {
        self.alpha_spectrum(s)[0]
    }

    /// Fixed point of `s² = α(s)` by tabulating `α` on `points` values of
    /// `s ∈ [0, s_max]` and intersecting the piecewise-linear interpolant.
    pub fn tabulated_fixed_point(&self, s_max: f64, points: usize) -> f64 {
        let (b, l) = self.reduced();
        let mu = self.params.mu;
        let phi = |s: f64| s * s - spectrum(&(&b + &l * (s * mu)))[0];
        let mut s0 = 0.0;
        let mut f0 = phi(0.0);
        for i in 1..points {
            let s1 = s_max * i as f64 / (points - 1) as f64;
            let f1 = phi(s1);
            if f0 < 0.0 && f1 >= 0.0 {
                return s0 - f0 * (s1 - s0) / (f1 - f0);
            }
            s0 = s1;
            f0 = f1;
        }
        f64::NAN
    }

    /// Largest eigenvalue of the coupled dual pencil.
    pub fn lambda_n(&self) -> f64 {
        let nc = self.grid.cell_count();
        let k = self.q.ncols();
        let g = self.params.g;
        let iq = &self.interp * &self.q;
        let lq = self.q.transpose() * &self.laplacian * &self.q * (self.params.mu / g);
        let mq = self.q.transpose() * &self.mass * &self.q / g;
        let n = nc + k;
        let mut a = DMatrix::zeros(n, n);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..nc {
            m[(i, i)] = 1.0 / self.drho[i];
            for j in 0..k {
                a[(i, nc + j)] = -iq[(i, j)];
                a[(nc + j, i)] = -iq[(i, j)];
            }
        }
        for i in 0..k {
            for j in 0..k {
                a[(nc + i, nc + j)] = lq[(i, j)];
                m[(nc + i, nc + j)] = mq[(i, j)];
            }
        }
        let chol = sym(m).cholesky().expect("dual mass is SPD");
        let linv = chol.l().try_inverse().unwrap();
        spectrum(&sym(&linv * a * linv.transpose()))[0]
    }
}

pub fn sym(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

pub fn spectrum(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().cloned().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

pub fn unit_grid(n: usize) -> Arc<StaggeredGrid> {
    Arc::new(StaggeredGrid::unit_square(n).unwrap())
}

pub fn default_params() -> PhysicalParams {
    PhysicalParams::new(0.1, 1.0).unwrap()
}
