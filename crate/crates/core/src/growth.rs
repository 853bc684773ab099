//! The growth rate `Λ` as the fixed point `Λ² = α(Λ)`, certified against the
//! boundary-value problem and the dual characterization `Λ_N`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::grid::StaggeredGrid;
use crate::profile::{Classification, DensityProfile, PhysicalParams};
use crate::spectra::{EigenOptions, EigenSolution, Spectra};
use crate::sum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthOptions {
    pub eigen: EigenOptions,
    /// Stop when `|Λ² − α(Λ)| ≤ tol · max(1, Λ²)`.
    pub fixed_point_tol: f64,
    pub max_bisections: usize,
    /// Also solve the dual pencil when the profile is uniformly unstable.
    pub cross_check: bool,
    /// Evaluate `φ` at `0.9Λ` and `1.1Λ`.
    pub uniqueness_check: bool,
}

impl Default for GrowthOptions {
    fn default() -> Self {
        Self {
            eigen: EigenOptions::default(),
            fixed_point_tol: 1e-8,
            max_bisections: 200,
            cross_check: true,
            uniqueness_check: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nondegeneracy {
    pub v3_nonzero: bool,
    pub horizontal_nonzero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Unstable,
    NoPositiveGrowthRate,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthRateResult {
    pub verdict: Verdict,
    pub lambda: Option<f64>,
    pub alpha_at_lambda: Option<f64>,
    /// `α(0)`, or a certified positive lower bound of it.
    pub alpha_zero: f64,
    pub fixed_point_residual: Option<f64>,
    /// Ritz residual of the final eigensolve.
    pub residual: Option<f64>,
    pub pde_residual: Option<f64>,
    pub flags: Option<Nondegeneracy>,
    pub bracket_history: Vec<(f64, f64)>,
    pub s_upper: Option<f64>,
    /// `φ(0.9Λ)` and `φ(1.1Λ)`.
    pub phi_around: Option<(f64, f64)>,
    pub lambda_n: Option<f64>,
    pub lambda_vs_lambda_n_gap: Option<f64>,
    pub elimination_gap: Option<f64>,
    pub classification: Classification,
    pub grid: StaggeredGrid,
    pub profile: DensityProfile,
    pub params: PhysicalParams,
    pub options: GrowthOptions,
    /// Eigenfield at `s = Λ` with `pressure = q̃` and `density_mode = ρ̃`.
    #[serde(skip)]
    pub eigen: Option<EigenSolution>,
}

impl GrowthRateResult {
    /// True when every certificate computed for this result holds.
    pub fn certificates_pass(&self, pde_tol: f64, cross_tol: f64) -> bool {
        let Some(lambda) = self.lambda else {
            return true;
        };
        let fp = self
            .fixed_point_residual
            .map_or(false, |r| r <= self.options.fixed_point_tol * lambda.powi(2).max(1.0));
        let pde = self.pde_residual.map_or(false, |r| r <= pde_tol);
        let flags = self
            .flags
            .map_or(false, |f| f.v3_nonzero && f.horizontal_nonzero);
        let cross = self
            .lambda_vs_lambda_n_gap
            .map_or(true, |g| g <= cross_tol * lambda);
        let unique = self.phi_around.map_or(true, |(lo, hi)| lo < 0.0 && hi > 0.0);
        fp && pde && flags && cross && unique
    }
}

/// `‖ΛμΔv + Bv − Λ²ρ̄v − Λ∇q̃‖ / ‖Λ²ρ̄v‖` with `q̃` recovered by projecting
/// the first three terms.
pub fn pde_residual_with(sp: &Spectra, v: &VectorField, lambda: f64) -> Result<f64> {
    v.check_grid(&sp.grid)?;
    let w_face = &sp.background.face_rho;
    let mass_norm = sum::dot3(&v.data, &v.data, &sp.background.face_rho).sqrt();
    if !(lambda > 0.0) || mass_norm == 0.0 {
        return Err(Error::Degenerate(
            "PDE residual needs a nonzero field and Λ > 0".into(),
        ));
    }
    let mut w = vec![0.0; v.data.len()];
    sp.apply_a(lambda, &v.data, &mut w);
    let l2 = lambda * lambda;
    for ((wi, vi), mi) in w.iter_mut().zip(&v.data).zip(w_face) {
        *wi -= l2 * mi * vi;
    }
    let wf = VectorField::from_flat(&sp.grid, w)?;
    let (pw, _) = sp.projector().project_with_potential(&wf)?;
    let denom: f64 = v
        .data
        .iter()
        .zip(w_face)
        .map(|(vi, mi)| (l2 * mi * vi).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(sum::norm_sq(&pw.data).sqrt() / denom)
}

pub fn pde_residual(
    sol: &EigenSolution,
    lambda: f64,
    grid: &Arc<StaggeredGrid>,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<f64> {
    let sp = Spectra::new(grid, profile, params, EigenOptions::default())?;
    pde_residual_with(&sp, &sol.velocity, lambda)
}

/// Relative threshold for the nondegeneracy flags.
pub const NONDEGENERACY_TOL: f64 = 1e-8;

pub fn check_nondegeneracy(v: &VectorField) -> Nondegeneracy {
    let total = v.norm();
    let g = v.grid().gravity_axis();
    Nondegeneracy {
        v3_nonzero: total > 0.0 && v.component_norm(g) >= NONDEGENERACY_TOL * total,
        horizontal_nonzero: total > 0.0 && v.horizontal_norm() >= NONDEGENERACY_TOL * total,
    }
}

/// Internal stopping target as a fraction of `fixed_point_tol`.
const POLISH: f64 = 1e-3;

/// Fixed-point solver bound to one discretized problem.
pub struct GrowthSolver {
    pub spectra: Spectra,
    pub opts: GrowthOptions,
}

impl GrowthSolver {
    pub fn new(
        grid: &Arc<StaggeredGrid>,
        profile: &DensityProfile,
        params: PhysicalParams,
        opts: GrowthOptions,
    ) -> Result<Self> {
        if !(opts.fixed_point_tol > 0.0) {
            return Err(Error::InvalidParameter {
                name: "fixed_point_tol",
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            spectra: Spectra::new(grid, profile, params, opts.eigen)?,
            opts,
        })
    }

    fn empty_result(&self, verdict: Verdict, alpha_zero: f64) -> GrowthRateResult {
        let sp = &self.spectra;
        GrowthRateResult {
            verdict,
            lambda: None,
            alpha_at_lambda: None,
            alpha_zero,
            fixed_point_residual: None,
            residual: None,
            pde_residual: None,
            flags: None,
            bracket_history: Vec::new(),
            s_upper: None,
            phi_around: None,
            lambda_n: None,
            lambda_vs_lambda_n_gap: None,
            elimination_gap: None,
            classification: sp.background.classification,
            grid: (*sp.grid).clone(),
            profile: sp.background.profile.clone(),
            params: sp.params,
            options: self.opts,
            eigen: None,
        }
    }

    pub fn solve(&self) -> Result<GrowthRateResult> {
        let sp = &self.spectra;
        let classification = sp.background.classification;
        if sp.background.drho.max() <= 0.0 {
            // Buoyancy is nonpositive on every cell, so α(s) ≤ 0 for all s.
            let (a0, _) = sp.alpha(0.0, None)?;
            return Ok(self.empty_result(Verdict::NoPositiveGrowthRate, a0));
        }
        let (a0, positive) = sp.alpha_sign(0.0, None)?;
        if !positive {
            if classification.is_unstable() {
                return Err(Error::Bracket(format!(
                    "alpha(0) = {a0:e} is not positive although the profile is {classification:?}; the grid is likely under-resolved"
                )));
            }
            return Ok(self.empty_result(Verdict::NoPositiveGrowthRate, a0));
        }

        let ub = sp.s_upper_bracket()?;
        let mut history: Vec<(f64, f64)> = vec![(0.0, a0)];
        history.extend(ub.samples.iter().cloned());
        let bound = sp.background.alpha_upper_bound(sp.params.g);
        let mut lo = 0.0f64;
        let mut f_lo = Some(-a0);
        let mut hi = ub.s_upper.min(bound.sqrt());
        let mut f_hi: Option<f64> = None;
        for &(s, a) in &history[1..] {
            let phi = s * s - a;
            if phi < 0.0 {
                if s >= lo {
                    lo = s;
                    f_lo = Some(phi);
                }
            } else if s <= hi {
                hi = s;
                f_hi = Some(phi);
            }
        }
        // Safeguarded Illinois iteration on the bracket. It keeps going past
        // the reported tolerance so the boundary-value residual, which divides
        // the fixed-point error by Λ², stays well inside its own budget.
        let tol = self.opts.fixed_point_tol;
        let target = |s: f64| POLISH * tol * (s * s).max(1.0);
        let mut warm: Option<VectorField> = None;
        let mut best: Option<(f64, f64, EigenSolution)> = None;
        let mut last_side = 0i8;
        for _ in 0..self.opts.max_bisections {
            let mid = 0.5 * (lo + hi);
            let s = match (f_lo, f_hi) {
                (Some(fl), Some(fh)) if fh > fl => {
                    let t = lo - fl * (hi - lo) / (fh - fl);
                    let margin = 1e-3 * (hi - lo);
                    if t > lo + margin && t < hi - margin {
                        t
                    } else {
                        mid
                    }
                }
                _ => mid,
            };
            let (a, sol) = sp.alpha(s, warm.as_ref())?;
            history.push((s, a));
            let phi = s * s - a;
            if best.as_ref().map_or(true, |(_, bp, _)| phi.abs() < *bp) {
                best = Some((s, phi.abs(), sol.clone()));
            }
            if phi.abs() <= target(s) || (hi - lo) <= 4.0 * f64::EPSILON * hi {
                break;
            }
            if phi < 0.0 {
                lo = s;
                f_lo = Some(phi);
                if last_side == -1 {
                    f_hi = f_hi.map(|f| 0.5 * f);
                }
                last_side = -1;
            } else {
                hi = s;
                f_hi = Some(phi);
                if last_side == 1 {
                    f_lo = f_lo.map(|f| 0.5 * f);
                }
                last_side = 1;
            }
            warm = Some(sol.velocity);
        }
        let (lambda, mut sol) = match best {
            Some((s, p, sol)) if p <= tol * (s * s).max(1.0) => (s, sol),
            _ => {
                return Err(Error::Bracket(format!(
                    "fixed-point search did not reach |s² − α(s)| ≤ {tol:e} within {} steps (bracket [{lo}, {hi}])",
                    self.opts.max_bisections
                )))
            }
        };
        let alpha = sol.eigenvalue;
        sol.pressure.scale(1.0 / lambda);
        sol.density_mode = sp.density_from_velocity(&sol.velocity, lambda);
        let pde = pde_residual_with(sp, &sol.velocity, lambda)?;
        let flags = check_nondegeneracy(&sol.velocity);

        let phi_around = if self.opts.uniqueness_check {
            let (a_lo, _) = sp.alpha(0.9 * lambda, Some(&sol.velocity))?;
            let (a_hi, _) = sp.alpha(1.1 * lambda, Some(&sol.velocity))?;
            Some((
                (0.9 * lambda).powi(2) - a_lo,
                (1.1 * lambda).powi(2) - a_hi,
            ))
        } else {
            None
        };

        let (lambda_n, gap, elim) = if self.opts.cross_check
            && classification == Classification::UniformlyUnstable
            && sp.background.drho.min() > 0.0
        {
            let (ln, dual) = sp.lambda_n(Some(&self.dual_warm_start(&sol)))?;
            (Some(ln), Some((lambda - ln).abs()), dual.elimination_gap)
        } else {
            (None, None, None)
        };

        let mut res = self.empty_result(Verdict::Unstable, a0);
        res.lambda = Some(lambda);
        res.alpha_at_lambda = Some(alpha);
        res.fixed_point_residual = Some((lambda * lambda - alpha).abs());
        res.residual = Some(sol.residual_norm);
        res.pde_residual = Some(pde);
        res.flags = Some(flags);
        res.bracket_history = history;
        res.s_upper = Some(ub.s_upper);
        res.phi_around = phi_around;
        res.lambda_n = lambda_n;
        res.lambda_vs_lambda_n_gap = gap;
        res.elimination_gap = elim;
        res.eigen = Some(sol);
        Ok(res)
    }

    /// The primal maximizer scaled to `J_N = 1` seeds the dual eigensolve.
    fn dual_warm_start(&self, sol: &EigenSolution) -> EigenSolution {
        let mut w = sol.clone();
        if let Ok((_, j)) = self.spectra.energy_n(&w.density_mode, &w.velocity) {
            if j > 0.0 {
                let s = 1.0 / j.sqrt();
                w.velocity.scale(s);
                w.density_mode.scale(s);
            }
        }
        w
    }
}

pub fn solve_growth_rate(
    grid: &Arc<StaggeredGrid>,
    profile: &DensityProfile,
    params: PhysicalParams,
    opts: GrowthOptions,
) -> Result<GrowthRateResult> {
    GrowthSolver::new(grid, profile, params, opts)?.solve()
}

/// `|Λ − Λ_N|` on one grid.
pub fn cross_check_lambda_n(
    grid: &Arc<StaggeredGrid>,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<f64> {
    let solver = GrowthSolver::new(
        grid,
        profile,
        params,
        GrowthOptions {
            cross_check: true,
            uniqueness_check: false,
            ..Default::default()
        },
    )?;
    if solver.spectra.background.classification != Classification::UniformlyUnstable {
        return Err(Error::Precondition(
            "Λ_N is only defined for uniformly unstable profiles".into(),
        ));
    }
    let res = solver.solve()?;
    res.lambda_vs_lambda_n_gap
        .ok_or_else(|| Error::Precondition("no growth rate to compare".into()))
}
