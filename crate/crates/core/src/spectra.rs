//! Energy functionals and the constrained maximization problems
//! `α(s) = sup E(v, s) / J(v)` and `Λ_N = sup E_N / J_N` on the discrete
//! divergence-free subspace.
//!
//! With `B = g Iᵀ diag(ρ̄') I` (buoyancy), `L = Δ` and `M = diag(ρ̄ on faces)`,
//! `α(s)` is the largest eigenvalue of `P (B + sμL) v = α P M v`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::StaggeredGrid;
use crate::lobpcg::{lobpcg_max, LobpcgOptions, LobpcgOutcome};
use crate::ops;
use crate::profile::{Background, Classification, DensityProfile, PhysicalParams};
use crate::projection::{relative_divergence, Projector};
use crate::separable::VectorHelmholtz;
use crate::sum;

/// Relative divergence above which an input is treated as not projected.
pub const DIVERGENCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenOptions {
    /// Relative Ritz residual target.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Relative residual of the Poisson solves inside the projector.
    pub poisson_tol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 4000,
            seed: 0x5eed,
            poisson_tol: 1e-12,
        }
    }
}

/// Quadrature values of the three integrals entering `E(v, s)` and `J(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// `g ∫ ρ̄' v₃²`
    pub buoyancy: f64,
    /// `μ ∫ |∇v|²`
    pub dissipation: f64,
    /// `∫ ρ̄ |v|²`
    pub mass: f64,
}

impl EnergyBreakdown {
    pub fn value(&self, s: f64) -> f64 {
        self.buoyancy - s * self.dissipation
    }
}

/// Maximizer of one of the constrained problems.
#[derive(Debug, Clone)]
pub struct EigenSolution {
    pub eigenvalue: f64,
    /// Divergence-free, no-slip, normalized to `J = 1` (or `J_N = 1`).
    pub velocity: VectorField,
    /// Zero-mean Lagrange multiplier `p` with `A v - θ M v = ∇p`.
    pub pressure: ScalarField,
    /// `ρ̃ = -ρ̄' v₃ / √α` for the primal problem (zero when `α ≤ 0`); the
    /// density unknown for the dual problem.
    pub density_mode: ScalarField,
    /// Relative Ritz residual.
    pub residual_norm: f64,
    /// Second Ritz value of the block (near-degeneracy indicator).
    pub second_eigenvalue: f64,
    pub iterations: usize,
    /// Dual problem only: `‖ρ̃ + ρ̄' v₃/Λ_N‖ / ‖ρ̃‖`.
    pub elimination_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BumpCertificate {
    pub c3: f64,
    pub c4: f64,
    pub field: VectorField,
    /// Bump center per axis.
    pub center: Vec<f64>,
    /// Bump half-width per axis.
    pub radius: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBracket {
    pub s_upper: f64,
    /// `c₅` with `g∫ρ̄'v₃² ≤ c₅∫|∇v|²`.
    pub c5: f64,
    /// `(s, α(s))` evaluated while searching.
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSample {
    pub s: f64,
    pub alpha: f64,
    pub residual: f64,
    /// Dissipation over mass of the maximizer (a Lipschitz slope for α).
    pub dissipation_ratio: f64,
    pub second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCurve {
    pub samples: Vec<AlphaSample>,
    /// `(c₃, c₄)` of the bump certificate when the profile is unstable.
    pub certified_lower: Option<(f64, f64)>,
    pub s_upper: Option<f64>,
    /// `g · max(ρ̄'/ρ̄)` over cells.
    pub upper_bound: f64,
    pub eigen_tol: f64,
}

impl AlphaCurve {
    /// Largest Lipschitz slope seen over the maximizers.
    pub fn lipschitz_estimate(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.dissipation_ratio)
            .fold(0.0, f64::max)
    }

    fn slack(&self, a: f64) -> f64 {
        self.eigen_tol * a.abs().max(self.upper_bound.abs()).max(1.0)
    }

    pub fn is_nonincreasing(&self) -> bool {
        self.samples
            .windows(2)
            .all(|w| w[1].alpha <= w[0].alpha + self.slack(w[0].alpha))
    }

    pub fn lipschitz_holds(&self) -> bool {
        let k = self.lipschitz_estimate();
        self.samples.windows(2).all(|w| {
            (w[0].alpha - w[1].alpha).abs() <= k * (w[1].s - w[0].s).abs() + self.slack(w[0].alpha)
        })
    }

    pub fn lower_bound_holds(&self) -> bool {
        match self.certified_lower {
            Some((c3, c4)) => self
                .samples
                .iter()
                .all(|x| x.alpha >= c3 - c4 * x.s - self.slack(x.alpha)),
            None => true,
        }
    }

    pub fn upper_bound_holds(&self) -> bool {
        self.samples
            .iter()
            .all(|x| x.alpha <= self.upper_bound + self.slack(x.alpha))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,alpha,residual,c3_minus_c4s,upper_bound\n");
        for x in &self.samples {
            let lower = self
                .certified_lower
                .map(|(c3, c4)| format!("{:.17e}", c3 - c4 * x.s))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.6e},{},{:.17e}\n",
                x.s, x.alpha, x.residual, lower, self.upper_bound
            ));
        }
        out
    }
}

/// Precomputed operators for one grid, profile and parameter set.
#[derive(Debug, Clone)]
pub struct Spectra {
    pub grid: Arc<StaggeredGrid>,
    pub background: Background,
    pub params: PhysicalParams,
    pub opts: EigenOptions,
    projector: Projector,
    helmholtz: VectorHelmholtz,
    /// `g · max|ρ̄'/ρ̄|`, the natural rate scale of `α`.
    omega: f64,
}

fn f_bump(t: f64) -> f64 {
    if t.abs() < 1.0 {
        let u = 1.0 - t * t;
        u * u * u
    } else {
        0.0
    }
}

impl Spectra {
    pub fn new(
        grid: &Arc<StaggeredGrid>,
        profile: &DensityProfile,
        params: PhysicalParams,
        opts: EigenOptions,
    ) -> Result<Self> {
        let background = Background::new(grid, profile)?;
        Self::from_background(background, params, opts)
    }

    pub fn from_background(
        background: Background,
        params: PhysicalParams,
        opts: EigenOptions,
    ) -> Result<Self> {
        let params = PhysicalParams::new(params.mu, params.g)?;
        if !(opts.tol > 0.0 && opts.poisson_tol > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tol",
                reason: "solver tolerances must be positive".into(),
            });
        }
        let grid = background.grid.clone();
        let omega = params.g
            * background
                .rho
                .values
                .iter()
                .zip(&background.drho.values)
                .map(|(r, d)| (d / r).abs())
                .fold(0.0, f64::max);
        Ok(Self {
            projector: Projector::with_tolerance(&grid, opts.poisson_tol),
            helmholtz: VectorHelmholtz::new(&grid),
            grid,
            background,
            params,
            opts,
            omega,
        })
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn helmholtz(&self) -> &VectorHelmholtz {
        &self.helmholtz
    }

    /// `g · max|ρ̄'/ρ̄|` over cells.
    pub fn rate_scale(&self) -> f64 {
        self.omega
    }

    fn check_velocity(&self, v: &VectorField) -> Result<()> {
        v.check_grid(&self.grid)?;
        let bn = v.boundary_normal_max();
        if bn > 0.0 {
            return Err(Error::Precondition(format!(
                "velocity has nonzero boundary-normal faces (max {bn:e})"
            )));
        }
        let d = relative_divergence(v);
        if d > DIVERGENCE_TOL {
            return Err(Error::NotDivergenceFree(d));
        }
        Ok(())
    }

    /// `y = B x` (buoyancy operator only).
    pub(crate) fn apply_buoyancy(&self, x: &[f64], y: &mut [f64]) {
        let grid = &*self.grid;
        let mut cells = vec![0.0; grid.cell_count()];
        ops::vertical_to_cells_into(grid, x, &mut cells);
        cells
            .iter_mut()
            .zip(&self.background.drho.values)
            .for_each(|(c, d)| *c *= d);
        ops::add_cells_to_vertical(grid, &cells, self.params.g, y);
    }

    /// `y = (B + sμΔ) x`.
    pub fn apply_a(&self, s: f64, x: &[f64], y: &mut [f64]) {
        ops::laplacian_into(&self.grid, x, y);
        let c = s * self.params.mu;
        y.iter_mut().for_each(|v| *v *= c);
        self.apply_buoyancy(x, y);
    }

    pub fn energy(&self, v: &VectorField) -> Result<EnergyBreakdown> {
        self.check_velocity(v)?;
        Ok(self.energy_unchecked(v))
    }

    fn energy_unchecked(&self, v: &VectorField) -> EnergyBreakdown {
        let vol = self.grid.cell_volume();
        let mut cells = vec![0.0; self.grid.cell_count()];
        ops::vertical_to_cells_into(&self.grid, &v.data, &mut cells);
        EnergyBreakdown {
            buoyancy: self.params.g * vol * sum::dot3(&cells, &cells, &self.background.drho.values),
            dissipation: self.params.mu * ops::h1_seminorm_sq(v),
            mass: vol * sum::dot3(&v.data, &v.data, &self.background.face_rho),
        }
    }

    fn random_start(&self, rng: &mut Pcg64) -> Vec<f64> {
        let n = VectorField::layout(&self.grid)[3];
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = vec![0.0; n];
        let lmin = self.helmholtz.min_eigenvalue();
        self.helmholtz.solve(lmin, 1.0, &noise, &mut x);
        x
    }

    fn start_block(&self, warm: Option<&VectorField>) -> Vec<Vec<f64>> {
        let mut rng = Pcg64::seed_from_u64(self.opts.seed);
        let first = match warm {
            Some(w) => w.data.clone(),
            None => self.random_start(&mut rng),
        };
        vec![first, self.random_start(&mut rng)]
    }

    fn lobpcg_opts(&self, stop_above: Option<f64>) -> LobpcgOptions {
        LobpcgOptions {
            tol: self.opts.tol,
            max_iter: self.opts.max_iter,
            stop_above,
        }
    }

    fn residual_floor(&self, s: f64) -> f64 {
        let stokes = s * self.params.mu * self.helmholtz.min_eigenvalue()
            / self.background.bounds.rho_max.max(f64::MIN_POSITIVE);
        self.omega.max(stokes).max(1e-300)
    }

    fn run_primal(
        &self,
        s: f64,
        warm: Option<&VectorField>,
        stop_above: Option<f64>,
    ) -> Result<LobpcgOutcome> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::InvalidParameter {
                name: "s",
                reason: format!("alpha requires s >= 0, got {s}"),
            });
        }
        let mu = self.params.mu;
        let rho_mean = self.background.rho_mean();
        let omega = self.omega;
        let nc = self.grid.cell_count();
        lobpcg_max(
            |x, y| self.apply_a(s, x, y),
            &self.background.face_rho,
            |x| {
                let mut phi = vec![0.0; nc];
                self.projector.project_in_place(x, &mut phi).map(|_| ())
            },
            |theta, r, w| {
                let c0 = rho_mean * (theta.abs() + 0.1 * omega).max(1e-12);
                self.helmholtz.solve(c0, s * mu, r, w);
            },
            self.start_block(warm),
            &self.lobpcg_opts(stop_above),
            self.residual_floor(s),
        )
    }

    /// Normalizes to unit `J`, fixes the sign and recovers the multiplier.
    fn finish_primal(&self, s: f64, out: LobpcgOutcome) -> Result<EigenSolution> {
        let alpha = out.values[0];
        let mut v = VectorField::from_flat(&self.grid, out.vectors[0].clone())?;
        let vol = self.grid.cell_volume();
        v.scale(1.0 / vol.sqrt());
        fix_sign(&mut v);
        let mut w = vec![0.0; v.data.len()];
        self.apply_a(s, &v.data, &mut w);
        for ((wi, vi), mi) in w.iter_mut().zip(&v.data).zip(&self.background.face_rho) {
            *wi -= alpha * mi * vi;
        }
        let mut phi = vec![0.0; self.grid.cell_count()];
        self.projector.project_in_place(&mut w, &mut phi)?;
        let mean = sum::sum(&phi) / phi.len() as f64;
        phi.iter_mut().for_each(|p| *p -= mean);
        let density = if alpha > 0.0 {
            self.density_from_velocity(&v, alpha.sqrt())
        } else {
            ScalarField::zeros(&self.grid)
        };
        Ok(EigenSolution {
            eigenvalue: alpha,
            velocity: v,
            pressure: ScalarField::from_values(&self.grid, phi)?,
            density_mode: density,
            residual_norm: out.residuals[0],
            second_eigenvalue: out.values[1],
            iterations: out.iterations,
            elimination_gap: None,
        })
    }

    /// `ρ̃ = -ρ̄' v₃ / λ` at cell centers.
    pub fn density_from_velocity(&self, v: &VectorField, lambda: f64) -> ScalarField {
        let mut cells = ops::vertical_to_cells(&self.grid, v);
        cells
            .values
            .iter_mut()
            .zip(&self.background.drho.values)
            .for_each(|(c, d)| *c *= -d / lambda);
        cells
    }

    /// `α(s)` and its maximizer; `warm` seeds the first start vector.
    pub fn alpha(&self, s: f64, warm: Option<&VectorField>) -> Result<(f64, EigenSolution)> {
        let out = self.run_primal(s, warm, None)?;
        let sol = self.finish_primal(s, out)?;
        Ok((sol.eigenvalue, sol))
    }

    /// Decides the sign of `α(s)`. A positive Ritz value certifies `α(s) > 0`
    /// without full convergence; otherwise the solve runs to tolerance.
    /// Returns the (lower-bound or converged) value and whether it is certified
    /// positive.
    pub fn alpha_sign(&self, s: f64, warm: Option<&VectorField>) -> Result<(f64, bool)> {
        let margin = self.opts.tol * self.omega.max(1e-300);
        let out = self.run_primal(s, warm, Some(margin))?;
        let v = out.values[0];
        Ok((v, v > margin))
    }

    /// Compactly supported divergence-free test field centered in the
    /// strongest unstable layer, with `c₃ = buoyancy/mass`, `c₄ = dissipation/mass`.
    pub fn bump_certificate(&self) -> Result<BumpCertificate> {
        let grid = &self.grid;
        let g = grid.gravity_axis();
        let dim = grid.dim();
        let n = grid.cells[g];
        let h = grid.h[g];
        let profile = &self.background.profile;
        let drho: Vec<f64> = (0..n).map(|k| profile.drho((k as f64 + 0.5) * h)).collect();
        // Maximal runs of cells with ρ̄' > 0, ranked by integrated ρ̄'.
        let mut best: Option<(usize, usize, f64)> = None;
        let mut k = 0;
        while k < n {
            if drho[k] > 0.0 {
                let k0 = k;
                let mut w = 0.0;
                while k < n && drho[k] > 0.0 {
                    w += drho[k];
                    k += 1;
                }
                if best.map_or(true, |b| w > b.2) {
                    best = Some((k0, k - 1, w));
                }
            } else {
                k += 1;
            }
        }
        let (k0, k1, wsum) = best.ok_or(Error::NoUnstableRegion)?;
        let centroid = (k0..=k1)
            .map(|k| drho[k] * (k as f64 + 0.5) * h)
            .sum::<f64>()
            / wsum;
        let half = 0.5 * h;
        let zc = (centroid / half).round() * half;
        let lo = k0 as f64 * h;
        let hi = (k1 + 1) as f64 * h;
        let pad_lo = if k0 == 0 { 0.0 } else { half };
        let pad_hi = if k1 + 1 == n { 0.0 } else { half };
        let rg = (zc - lo - pad_lo).min(hi - zc - pad_hi);
        if !(rg >= 2.0 * h) {
            return Err(Error::Degenerate(format!(
                "unstable layer [{lo}, {hi}] is too thin for a bump on this grid"
            )));
        }
        let mut center = vec![0.0; dim];
        let mut radius = vec![0.0; dim];
        for a in 0..dim {
            if a == g {
                center[a] = zc;
                radius[a] = rg;
            } else {
                center[a] = 0.5 * grid.domain.lengths[a];
                radius[a] = 0.5 * grid.domain.lengths[a];
            }
        }
        let ha = if g == 0 { 1 } else { 0 };
        let psi = |xa: f64, xg: f64| {
            f_bump((xa - center[ha]) / radius[ha]) * f_bump((xg - center[g]) / radius[g])
        };
        let extra = |x: [f64; 3]| {
            (0..dim)
                .filter(|&b| b != g && b != ha)
                .map(|b| f_bump((x[b] - center[b]) / radius[b]))
                .product::<f64>()
        };
        let mut v = VectorField::zeros(grid);
        for a in [ha, g] {
            let shape = grid.face_shape(a);
            let comp = v.component_mut(a);
            for (idx, f) in shape.iter().enumerate() {
                let x = grid.face_center(a, f);
                comp[idx] = if a == ha {
                    let xa = f[ha] as f64 * grid.h[ha];
                    let z0 = f[g] as f64 * grid.h[g];
                    (psi(xa, z0 + grid.h[g]) - psi(xa, z0)) / grid.h[g]
                } else {
                    let z = f[g] as f64 * grid.h[g];
                    let x0 = f[ha] as f64 * grid.h[ha];
                    -(psi(x0 + grid.h[ha], z) - psi(x0, z)) / grid.h[ha]
                } * extra(x);
            }
        }
        let e = self.energy_unchecked(&v);
        let c3 = e.buoyancy / e.mass;
        if !(c3 > 0.0) {
            return Err(Error::NoUnstableRegion);
        }
        Ok(BumpCertificate {
            c3,
            c4: e.dissipation / e.mass,
            field: v,
            center,
            radius,
        })
    }

    /// `c₅ = g · max(ρ̄'⁺) / λ_min(-Δ)`.
    pub fn c5(&self) -> f64 {
        let pos = self
            .background
            .drho
            .values
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        self.params.g * pos / self.helmholtz.min_eigenvalue()
    }

    /// Smallest power-of-two multiple `ŝ = (c₅/μ)·2^k` with `α(ŝ) ≤ 0`.
    pub fn s_upper_bracket(&self) -> Result<UpperBracket> {
        let c5 = self.c5();
        let mut samples = Vec::new();
        if c5 == 0.0 {
            return Ok(UpperBracket {
                s_upper: 0.0,
                c5,
                samples,
            });
        }
        let base = c5 / self.params.mu;
        let mut k: i32 = -5;
        let mut warm: Option<VectorField> = None;
        let eval = |k: i32, warm: &mut Option<VectorField>, samples: &mut Vec<(f64, f64)>| {
            let s = base * 2f64.powi(k);
            let (a, sol) = self.alpha(s, warm.as_ref())?;
            samples.push((s, a));
            *warm = Some(sol.velocity);
            Ok::<_, Error>((s, a))
        };
        let (s, a) = eval(k, &mut warm, &mut samples)?;
        if a <= 0.0 {
            // Walk down to the minimal power-of-two bracket.
            let mut s_up = s;
            for _ in 0..40 {
                k -= 1;
                let (s2, a2) = eval(k, &mut warm, &mut samples)?;
                if a2 > 0.0 {
                    break;
                }
                s_up = s2;
            }
            return Ok(UpperBracket {
                s_upper: s_up,
                c5,
                samples,
            });
        }
        loop {
            k += 1;
            let (s2, a2) = eval(k, &mut warm, &mut samples)?;
            if a2 <= 0.0 || k >= 0 {
                if a2 > 0.0 {
                    return Err(Error::Bracket(format!(
                        "alpha({s2:e}) = {a2:e} > 0 beyond the analytic bound"
                    )));
                }
                return Ok(UpperBracket {
                    s_upper: s2,
                    c5,
                    samples,
                });
            }
        }
    }

    fn require_uniform(&self) -> Result<()> {
        let min = self.background.drho.min();
        if self.background.classification != Classification::UniformlyUnstable || !(min > 0.0) {
            return Err(Error::Precondition(format!(
                "dual energy needs a uniformly unstable profile (classification {:?}, min ρ̄' = {min:e})",
                self.background.classification
            )));
        }
        Ok(())
    }

    /// `(E_N, J_N)` for a density mode and a velocity.
    pub fn energy_n(&self, rho: &ScalarField, v: &VectorField) -> Result<(f64, f64)> {
        self.require_uniform()?;
        rho.check_grid(&self.grid)?;
        self.check_velocity(v)?;
        let vol = self.grid.cell_volume();
        let g = self.params.g;
        let iv = ops::vertical_to_cells(&self.grid, v);
        let inv: Vec<f64> = self.background.drho.values.iter().map(|d| 1.0 / d).collect();
        let e = -self.params.mu / g * ops::h1_seminorm_sq(v) - 2.0 * vol * sum::dot(&rho.values, &iv.values);
        let j = vol * sum::dot3(&rho.values, &rho.values, &inv)
            + vol * sum::dot3(&v.data, &v.data, &self.background.face_rho) / g;
        Ok((e, j))
    }

    /// Largest eigenvalue of the coupled dual pencil on `(ρ̃, v)`.
    pub fn lambda_n(&self, warm: Option<&EigenSolution>) -> Result<(f64, EigenSolution)> {
        self.require_uniform()?;
        let grid = &*self.grid;
        let nc = grid.cell_count();
        let nv = VectorField::layout(grid)[3];
        let g = self.params.g;
        let mu = self.params.mu;
        let drho = &self.background.drho.values;
        let mut mass = Vec::with_capacity(nc + nv);
        mass.extend(drho.iter().map(|d| 1.0 / d));
        mass.extend(self.background.face_rho.iter().map(|w| w / g));
        let rho_mean = self.background.rho_mean();
        let rate = self.omega.sqrt();

        let apply = |x: &[f64], y: &mut [f64]| {
            let (xc, xv) = x.split_at(nc);
            let (yc, yv) = y.split_at_mut(nc);
            ops::vertical_to_cells_into(grid, xv, yc);
            yc.iter_mut().for_each(|t| *t = -*t);
            ops::laplacian_into(grid, xv, yv);
            yv.iter_mut().for_each(|t| *t *= mu / g);
            ops::add_cells_to_vertical(grid, xc, -1.0, yv);
        };
        let mut rng = Pcg64::seed_from_u64(self.opts.seed);
        let mut start = Vec::new();
        if let Some(w) = warm {
            let mut x = w.density_mode.values.clone();
            x.extend_from_slice(&w.velocity.data);
            start.push(x);
        }
        while start.len() < 2 {
            let mut x: Vec<f64> = self.random_start(&mut rng);
            let mut cells = vec![0.0; nc];
            ops::vertical_to_cells_into(grid, &x, &mut cells);
            cells.iter_mut().zip(drho).for_each(|(c, d)| *c *= -d / rate);
            cells.append(&mut x);
            start.push(cells);
        }
        let out = lobpcg_max(
            apply,
            &mass,
            |x| {
                let mut phi = vec![0.0; nc];
                self.projector
                    .project_in_place(&mut x[nc..], &mut phi)
                    .map(|_| ())
            },
            |theta, r, w| {
                let sigma = theta.abs().max(0.1 * rate).max(1e-12);
                for ((wi, ri), d) in w[..nc].iter_mut().zip(&r[..nc]).zip(drho) {
                    *wi = d * ri / sigma;
                }
                self.helmholtz
                    .solve(sigma * rho_mean / g, mu / g, &r[nc..], &mut w[nc..]);
            },
            start,
            &self.lobpcg_opts(None),
            rate.max(1e-300),
        )?;
        let lam = out.values[0];
        let vol = grid.cell_volume();
        let mut x = out.vectors[0].clone();
        x.iter_mut().for_each(|t| *t /= vol.sqrt());
        let mut v = VectorField::from_flat(&self.grid, x[nc..].to_vec())?;
        let mut rho = ScalarField::from_values(&self.grid, x[..nc].to_vec())?;
        if fix_sign(&mut v) {
            rho.scale(-1.0);
        }
        // Multiplier from the velocity row of the dual system.
        let mut wv = vec![0.0; nv];
        ops::laplacian_into(grid, &v.data, &mut wv);
        wv.iter_mut().for_each(|t| *t *= mu / g);
        ops::add_cells_to_vertical(grid, &rho.values, -1.0, &mut wv);
        for ((wi, vi), m) in wv.iter_mut().zip(&v.data).zip(&self.background.face_rho) {
            *wi -= lam * m / g * vi;
        }
        let mut phi = vec![0.0; nc];
        self.projector.project_in_place(&mut wv, &mut phi)?;
        let mean = sum::sum(&phi) / phi.len() as f64;
        phi.iter_mut().for_each(|p| *p -= mean);
        let elim = {
            let mut d = self.density_from_velocity(&v, lam);
            d.axpy(-1.0, &rho);
            d.norm() / rho.norm().max(f64::MIN_POSITIVE)
        };
        Ok((
            lam,
            EigenSolution {
                eigenvalue: lam,
                velocity: v,
                pressure: ScalarField::from_values(&self.grid, phi)?,
                density_mode: rho,
                residual_norm: out.residuals[0],
                second_eigenvalue: out.values[1],
                iterations: out.iterations,
                elimination_gap: Some(elim),
            },
        ))
    }

    /// Samples `α` at the given points (sorted ascending internally).
    /// `threads > 1` splits the points into contiguous chunks solved
    /// concurrently; each chunk warm-starts sequentially.
    pub fn alpha_curve(&self, s_values: &[f64], threads: usize) -> Result<AlphaCurve> {
        let mut s_sorted = s_values.to_vec();
        s_sorted.sort_by(f64::total_cmp);
        let threads = threads.max(1).min(s_sorted.len().max(1));
        let chunk = s_sorted.len().div_ceil(threads).max(1);
        let run_chunk = |pts: &[f64]| -> Result<Vec<AlphaSample>> {
            let mut warm: Option<VectorField> = None;
            let mut out = Vec::with_capacity(pts.len());
            for &s in pts {
                let (a, sol) = self.alpha(s, warm.as_ref())?;
                let e = self.energy_unchecked(&sol.velocity);
                out.push(AlphaSample {
                    s,
                    alpha: a,
                    residual: sol.residual_norm,
                    dissipation_ratio: e.dissipation / e.mass,
                    second: sol.second_eigenvalue,
                });
                warm = Some(sol.velocity);
            }
            Ok(out)
        };
        let parts: Vec<Result<Vec<AlphaSample>>> = if threads == 1 {
            vec![run_chunk(&s_sorted)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = s_sorted
                    .chunks(chunk)
                    .map(|c| scope.spawn(move || run_chunk(c)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("alpha worker panicked"))
                    .collect()
            })
        };
        let mut samples = Vec::with_capacity(s_sorted.len());
        for p in parts {
            samples.extend(p?);
        }
        let certified_lower = if self.background.drho.max() > 0.0 {
            self.bump_certificate().ok().map(|b| (b.c3, b.c4))
        } else {
            None
        };
        Ok(AlphaCurve {
            samples,
            certified_lower,
            s_upper: None,
            upper_bound: self.background.alpha_upper_bound(self.params.g),
            eigen_tol: self.opts.tol,
        })
    }
}

/// Makes the largest-magnitude vertical face value positive. Returns true
/// when the field was flipped.
pub fn fix_sign(v: &mut VectorField) -> bool {
    let vert = v.vertical();
    let mut best = 0.0f64;
    let mut val = 0.0;
    for &x in vert {
        if x.abs() > best {
            best = x.abs();
            val = x;
        }
    }
    if val < 0.0 {
        v.scale(-1.0);
        true
    } else {
        false
    }
}

pub fn energy_e(
    v: &VectorField,
    s: f64,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<(f64, EnergyBreakdown)> {
    let sp = Spectra::new(v.grid(), profile, params, EigenOptions::default())?;
    let e = sp.energy(v)?;
    Ok((e.value(s), e))
}

pub fn alpha(
    s: f64,
    grid: &Arc<StaggeredGrid>,
    profile: &DensityProfile,
    params: PhysicalParams,
    opts: EigenOptions,
) -> Result<(f64, EigenSolution)> {
    Spectra::new(grid, profile, params, opts)?.alpha(s, None)
}

pub fn bump_certificate(
    profile: &DensityProfile,
    params: PhysicalParams,
    grid: &Arc<StaggeredGrid>,
) -> Result<BumpCertificate> {
    Spectra::new(grid, profile, params, EigenOptions::default())?.bump_certificate()
}

pub fn s_upper_bracket(
    grid: &Arc<StaggeredGrid>,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<UpperBracket> {
    Spectra::new(grid, profile, params, EigenOptions::default())?.s_upper_bracket()
}

pub fn energy_en(
    rho: &ScalarField,
    v: &VectorField,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<(f64, f64)> {
    Spectra::new(v.grid(), profile, params, EigenOptions::default())?.energy_n(rho, v)
}

pub fn lambda_n(
    grid: &Arc<StaggeredGrid>,
    profile: &DensityProfile,
    params: PhysicalParams,
    opts: EigenOptions,
) -> Result<(f64, EigenSolution)> {
    Spectra::new(grid, profile, params, opts)?.lambda_n(None)
}
