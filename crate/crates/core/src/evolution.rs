//! Time stepping of the linearized and nonlinear perturbation equations
//! around a steady profile, with per-step energy monitors.
//!
//! Both steppers are first-order operator splits on the MAC grid: a density
//! update, an implicit viscous solve, then a density-weighted projection.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::StaggeredGrid;
use crate::krylov::{pcg, CgOptions};
use crate::ops;
use crate::profile::{Background, DensityProfile, PhysicalParams};
use crate::projection::{relative_divergence, Projector};
use crate::separable::VectorHelmholtz;
use crate::snapshot::Snapshot;
use crate::spectra::EigenSolution;
use crate::sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Linear,
    Nonlinear,
}

/// Density transport scheme of the nonlinear stepper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Advection {
    /// Donor-cell upwinding in advective form.
    #[default]
    Upwind,
    /// Backtracking along the cell-center velocity with multilinear
    /// interpolation (convex, so bounds hold without clamping).
    SemiLagrangian,
}

/// `(ϱ, u, q)` at time `t`.
#[derive(Debug, Clone)]
pub struct SimState {
    pub t: f64,
    pub step: usize,
    pub rho_pert: ScalarField,
    pub velocity: VectorField,
    pub pressure: ScalarField,
    pub mode: Mode,
}

impl SimState {
    pub fn zero(grid: &Arc<StaggeredGrid>, mode: Mode) -> Self {
        Self {
            t: 0.0,
            step: 0,
            rho_pert: ScalarField::zeros(grid),
            velocity: VectorField::zeros(grid),
            pressure: ScalarField::zeros(grid),
            mode,
        }
    }

    pub fn new(rho_pert: ScalarField, velocity: VectorField, mode: Mode) -> Result<Self> {
        velocity.check_grid(rho_pert.grid())?;
        let grid = rho_pert.grid().clone();
        Ok(Self {
            t: 0.0,
            step: 0,
            rho_pert,
            velocity,
            pressure: ScalarField::zeros(&grid),
            mode,
        })
    }

    pub fn grid(&self) -> &Arc<StaggeredGrid> {
        self.rho_pert.grid()
    }

    /// `‖(ϱ, u)‖_{L²}`.
    pub fn l2_norm(&self) -> f64 {
        (self.rho_pert.norm().powi(2) + self.velocity.norm().powi(2)).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.rho_pert.scale(s);
        out.velocity.scale(s);
        out.pressure.scale(s);
        out
    }
}

/// Initial state from an eigenfield `(ρ̃, ṽ)` scaled to `‖(ϱ, u)‖ = amplitude`.
pub fn eigenmode_state(sol: &EigenSolution, amplitude: f64, mode: Mode) -> Result<SimState> {
    let s = SimState::new(sol.density_mode.clone(), sol.velocity.clone(), mode)?;
    let n = s.l2_norm();
    if n == 0.0 {
        return Err(Error::Degenerate("eigenfield is zero".into()));
    }
    Ok(s.scaled(amplitude / n))
}

/// Seeded random initial data: white noise in `ϱ` and projected white noise
/// in `u`, scaled to `‖(ϱ, u)‖ = amplitude`.
pub fn random_state(
    grid: &Arc<StaggeredGrid>,
    seed: u64,
    amplitude: f64,
    mode: Mode,
) -> Result<SimState> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let rho = ScalarField::from_values(
        grid,
        (0..grid.cell_count()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let mut v = VectorField::zeros(grid);
    v.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    v.enforce_no_penetration();
    let v = Projector::with_tolerance(grid, 1e-13).project(&v)?;
    let s = SimState::new(rho, v, mode)?;
    let n = s.l2_norm();
    Ok(s.scaled(amplitude / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepperOptions {
    /// Relative tolerance of the viscous and pressure solves.
    pub solver_tol: f64,
    pub advection: Advection,
    /// Allowed overshoot of the total-density bounds per step, relative to
    /// `max |ρ|`.
    pub max_principle_tol: f64,
}

impl Default for StepperOptions {
    fn default() -> Self {
        Self {
            solver_tol: 1e-12,
            advection: Advection::Upwind,
            max_principle_tol: 1e-10,
        }
    }
}

/// Stepper bound to one grid, profile and parameter set.
pub struct Stepper {
    pub grid: Arc<StaggeredGrid>,
    pub background: Background,
    pub params: PhysicalParams,
    pub opts: StepperOptions,
    projector: Projector,
    helmholtz: VectorHelmholtz,
}

/// Relative divergence accepted on input states.
pub const INPUT_DIVERGENCE_TOL: f64 = 1e-8;

impl Stepper {
    pub fn new(
        grid: &Arc<StaggeredGrid>,
        profile: &DensityProfile,
        params: PhysicalParams,
        opts: StepperOptions,
    ) -> Result<Self> {
        let params = PhysicalParams::new(params.mu, params.g)?;
        if !(opts.solver_tol > 0.0 && opts.max_principle_tol >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "solver_tol",
                reason: "tolerances must be positive".into(),
            });
        }
        Ok(Self {
            grid: grid.clone(),
            background: Background::new(grid, profile)?,
            params,
            opts,
            projector: Projector::with_tolerance(grid, opts.solver_tol),
            helmholtz: VectorHelmholtz::new(grid),
        })
    }

    fn check_state(&self, s: &SimState) -> Result<()> {
        s.rho_pert.check_grid(&self.grid)?;
        s.velocity.check_grid(&self.grid)?;
        let bn = s.velocity.boundary_normal_max();
        if bn > 0.0 {
            return Err(Error::Precondition(format!(
                "velocity has nonzero boundary-normal faces (max {bn:e})"
            )));
        }
        let d = relative_divergence(&s.velocity);
        if d > INPUT_DIVERGENCE_TOL {
            return Err(Error::NotDivergenceFree(d));
        }
        Ok(())
    }

    fn check_dt(dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must be positive and finite, got {dt}"),
            });
        }
        Ok(())
    }

    /// Solves `(W - dt μ Δ) x = b` on interior faces.
    fn viscous_solve(&self, w: &[f64], dt: f64, b: &[f64]) -> Result<Vec<f64>> {
        let c1 = dt * self.params.mu;
        let grid = &*self.grid;
        let n = b.len();
        let wmean = sum::sum(w) / n as f64;
        let mut x = vec![0.0; n];
        // Start from the mass-only solution.
        for ((xi, bi), wi) in x.iter_mut().zip(b).zip(w) {
            *xi = bi / wi;
        }
        pcg(
            |x, y| {
                ops::laplacian_into(grid, x, y);
                for ((yi, xi), wi) in y.iter_mut().zip(x).zip(w) {
                    *yi = wi * xi - c1 * *yi;
                }
            },
            |r, z| self.helmholtz.solve(wmean, c1, r, z),
            b,
            &mut x,
            CgOptions {
                tol: self.opts.solver_tol,
                max_iter: 500,
                zero_mean: false,
            },
        )?;
        Ok(x)
    }

    /// Viscous solve with face weights `w` and buoyancy from `rho_pert`, then
    /// the `w`-weighted projection. Returns `(u, q)`.
    fn momentum(
        &self,
        w: &[f64],
        dt: f64,
        mut rhs: Vec<f64>,
        rho_pert: &[f64],
    ) -> Result<(VectorField, ScalarField)> {
        ops::add_cells_to_vertical(&self.grid, rho_pert, -dt * self.params.g, &mut rhs);
        let mut u = self.viscous_solve(w, dt, &rhs)?;
        let mut phi = vec![0.0; self.grid.cell_count()];
        self.projector.project_weighted_in_place(&mut u, w, &mut phi)?;
        let mean = sum::sum(&phi) / phi.len() as f64;
        phi.iter_mut().for_each(|p| *p = (*p - mean) / dt);
        Ok((
            VectorField::from_flat(&self.grid, u)?,
            ScalarField::from_values(&self.grid, phi)?,
        ))
    }

    /// One step of the linearized system:
    /// `ϱ ← ϱ - dt ρ̄' u₃`, `(ρ̄ - dt μ Δ) u* = ρ̄ u - dt g ϱ e₃`, then the
    /// `ρ̄`-weighted projection.
    pub fn step_linear(&self, s: &SimState, dt: f64) -> Result<SimState> {
        Self::check_dt(dt)?;
        self.check_state(s)?;
        let grid = &*self.grid;
        let mut iu = vec![0.0; grid.cell_count()];
        ops::vertical_to_cells_into(grid, &s.velocity.data, &mut iu);
        let rho: Vec<f64> = s
            .rho_pert
            .values
            .iter()
            .zip(&iu)
            .zip(&self.background.drho.values)
            .map(|((r, u3), d)| r - dt * d * u3)
            .collect();
        let w = &self.background.face_rho;
        let rhs: Vec<f64> = s.velocity.data.iter().zip(w).map(|(u, m)| m * u).collect();
        let (velocity, pressure) = self.momentum(w, dt, rhs, &rho)?;
        Ok(SimState {
            t: s.t + dt,
            step: s.step + 1,
            rho_pert: ScalarField::from_values(&self.grid, rho)?,
            velocity,
            pressure,
            mode: Mode::Linear,
        })
    }

    /// Total density `ρ̄ + ϱ`.
    pub fn total_density(&self, s: &SimState) -> ScalarField {
        let mut out = self.background.rho.clone();
        out.axpy(1.0, &s.rho_pert);
        out
    }

    /// `safety · min(h² ρ_min / μ, h / ‖u‖∞)`.
    pub fn stable_dt(&self, s: &SimState, safety: f64) -> f64 {
        let h = self.grid.h_min();
        let rho_min = self.total_density(s).min();
        let visc = h * h * rho_min / self.params.mu;
        let umax = s.velocity.max_abs();
        let cfl = if umax > 0.0 { h / umax } else { f64::INFINITY };
        safety * visc.min(cfl)
    }

    /// One step of the nonlinear perturbed system: transport of the total
    /// density, explicit upwind momentum advection with implicit viscosity,
    /// and the projection weighted by the new density.
    pub fn step_nonlinear(&self, s: &SimState, dt: f64) -> Result<SimState> {
        Self::check_dt(dt)?;
        self.check_state(s)?;
        let rho = self.total_density(s);
        if rho.min() <= 0.0 {
            return Err(Error::DensityBounds(format!(
                "total density must stay positive (min {})",
                rho.min()
            )));
        }
        let new_rho = match self.opts.advection {
            Advection::Upwind => self.advect_upwind(&rho.values, &s.velocity.data, dt)?,
            Advection::SemiLagrangian => self.advect_semi_lagrangian(&rho.values, &s.velocity, dt),
        };
        let (lo, hi) = (rho.min(), rho.max());
        let tol = self.opts.max_principle_tol * lo.abs().max(hi.abs());
        let (nlo, nhi) = new_rho
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if nlo < lo - tol || nhi > hi + tol {
            return Err(Error::DensityBounds(format!(
                "density left [{lo}, {hi}] (now [{nlo}, {nhi}]) at t = {}",
                s.t
            )));
        }
        let new_rho = ScalarField::from_values(&self.grid, new_rho)?;
        let w = ops::face_weights(&new_rho);
        let adv = self.momentum_advection(&s.velocity);
        let rhs: Vec<f64> = s
            .velocity
            .data
            .iter()
            .zip(&adv)
            .zip(&w)
            .map(|((u, a), m)| m * (u - dt * a))
            .collect();
        let mut pert = new_rho.clone();
        pert.axpy(-1.0, &self.background.rho);
        let (velocity, pressure) = self.momentum(&w, dt, rhs, &pert.values)?;
        Ok(SimState {
            t: s.t + dt,
            step: s.step + 1,
            rho_pert: pert,
            velocity,
            pressure,
            mode: Mode::Nonlinear,
        })
    }

    /// Advective-form donor cell: `ρ_c += dt/h Σ_inflow |u_f| (ρ_nbr - ρ_c)`.
    /// Each update is a convex combination as long as the inflow Courant sum
    /// stays below one, which is checked.
    fn advect_upwind(&self, rho: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        let grid = &*self.grid;
        let cs = grid.cell_shape();
        let cst = cs.strides();
        let off = VectorField::layout(grid);
        let mut out = rho.to_vec();
        let mut worst: f64 = 0.0;
        for (ci, c) in cs.iter().enumerate() {
            let mut courant = 0.0;
            let mut delta = 0.0;
            for a in 0..grid.dim() {
                let fs = grid.face_shape(a);
                let comp = &u[off[a]..off[a + 1]];
                let lo = fs.index(c);
                let k = dt / grid.h[a];
                let ul = comp[lo];
                if ul > 0.0 && c[a] > 0 {
                    courant += k * ul;
                    delta += k * ul * (rho[ci - cst[a]] - rho[ci]);
                }
                let uh = comp[lo + fs.strides()[a]];
                if uh < 0.0 && c[a] + 1 < grid.cells[a] {
                    courant -= k * uh;
                    delta -= k * uh * (rho[ci + cst[a]] - rho[ci]);
                }
            }
            worst = worst.max(courant);
            out[ci] += delta;
        }
        if worst > 1.0 {
            return Err(Error::DensityBounds(format!(
                "inflow Courant number {worst:.3} exceeds 1 (CFL breach)"
            )));
        }
        Ok(out)
    }

    fn advect_semi_lagrangian(&self, rho: &[f64], u: &VectorField, dt: f64) -> Vec<f64> {
        let grid = &*self.grid;
        let cs = grid.cell_shape();
        let dim = grid.dim();
        let mut out = vec![0.0; rho.len()];
        for (ci, c) in cs.iter().enumerate() {
            let x = grid.cell_center(c);
            // Backtrack to a position in cell-index coordinates, clamped to
            // the cell-center hull.
            let mut pos = [0.0f64; 3];
            for a in 0..dim {
                let fs = grid.face_shape(a);
                let comp = u.component(a);
                let lo = fs.index(c);
                let ua = 0.5 * (comp[lo] + comp[lo + fs.strides()[a]]);
                let xd = x[a] - dt * ua;
                pos[a] = (xd / grid.h[a] - 0.5).clamp(0.0, (grid.cells[a] - 1) as f64);
            }
            let mut base = [0usize; 3];
            let mut frac = [0.0f64; 3];
            for a in 0..dim {
                let b = (pos[a].floor() as usize).min(grid.cells[a].saturating_sub(2));
                base[a] = b;
                frac[a] = pos[a] - b as f64;
            }
            let mut acc = 0.0;
            for corner in 0..(1usize << dim) {
                let mut idx = base;
                let mut wgt = 1.0;
                for a in 0..dim {
                    if corner >> a & 1 == 1 {
                        idx[a] += 1;
                        wgt *= frac[a];
                    } else {
                        wgt *= 1.0 - frac[a];
                    }
                }
                if wgt != 0.0 {
                    acc += wgt * rho[cs.index(idx)];
                }
            }
            out[ci] = acc;
        }
        out
    }

    /// First-order upwind `(u·∇)u` on the faces of each component. Transverse
    /// velocities are four-face averages; walls use the no-slip reflection.
    fn momentum_advection(&self, u: &VectorField) -> Vec<f64> {
        let grid = &*self.grid;
        let dim = grid.dim();
        let off = VectorField::layout(grid);
        let mut out = vec![0.0; u.data.len()];
        for a in 0..dim {
            let fs = grid.face_shape(a);
            let st = fs.strides();
            let comp = u.component(a);
            for (idx, f) in fs.iter().enumerate() {
                if grid.is_boundary_face(a, f) {
                    continue;
                }
                let x = comp[idx];
                let mut acc = 0.0;
                for b in 0..dim {
                    let vb = if b == a {
                        x
                    } else {
                        let bs = grid.face_shape(b);
                        let bcomp = u.component(b);
                        let mut lo_cell = f;
                        lo_cell[a] -= 1;
                        let mut s = 0.0;
                        for c in [lo_cell, f] {
                            let i = bs.index(c);
                            s += bcomp[i] + bcomp[i + bs.strides()[b]];
                        }
                        0.25 * s
                    };
                    if vb == 0.0 {
                        continue;
                    }
                    let n = fs.0[b];
                    let ih = 1.0 / grid.h[b];
                    let d = if vb > 0.0 {
                        let lo = if f[b] == 0 { -x } else { comp[idx - st[b]] };
                        (x - lo) * ih
                    } else {
                        let hi = if f[b] + 1 == n { -x } else { comp[idx + st[b]] };
                        (hi - x) * ih
                    };
                    acc += vb * d;
                }
                out[off[a] + idx] = acc;
            }
        }
        out
    }

    /// Kinetic weights on faces: `ρ̄` in linear mode, the total density in
    /// nonlinear mode.
    fn kinetic_weights(&self, s: &SimState) -> Vec<f64> {
        match s.mode {
            Mode::Linear => self.background.face_rho.clone(),
            Mode::Nonlinear => ops::face_weights(&self.total_density(s)),
        }
    }

    /// `∫(g ϱ²/(-ρ̄') + ρ|u|²)`, defined when `ρ̄' < 0` on every cell.
    pub fn lyapunov(&self, s: &SimState) -> Option<f64> {
        let drho = &self.background.drho.values;
        if !(self.background.drho.max() < 0.0) {
            return None;
        }
        let vol = self.grid.cell_volume();
        let pot: Vec<f64> = s
            .rho_pert
            .values
            .iter()
            .zip(drho)
            .map(|(r, d)| self.params.g * r * r / -d)
            .collect();
        let w = self.kinetic_weights(s);
        Some(vol * (sum::sum(&pot) + sum::dot3(&s.velocity.data, &s.velocity.data, &w)))
    }

    /// `∫(ϱ²/ρ̄' + ρ̄|u|²/g)`, defined when `ρ̄' > 0` on every cell.
    pub fn dual_energy(&self, s: &SimState) -> Option<f64> {
        let drho = &self.background.drho.values;
        if !(self.background.drho.min() > 0.0) {
            return None;
        }
        let vol = self.grid.cell_volume();
        let pot: Vec<f64> = s
            .rho_pert
            .values
            .iter()
            .zip(drho)
            .map(|(r, d)| r * r / d)
            .collect();
        let kin = sum::dot3(&s.velocity.data, &s.velocity.data, &self.background.face_rho);
        Some(vol * (sum::sum(&pot) + kin / self.params.g))
    }

    /// `‖(ϱ_t, u_t)‖²` in the Lyapunov metric, from a backward difference.
    fn lyapunov_rate_sq(&self, prev: &SimState, next: &SimState, dt: f64) -> Option<f64> {
        if !(self.background.drho.max() < 0.0) {
            return None;
        }
        let vol = self.grid.cell_volume();
        let dr: Vec<f64> = next
            .rho_pert
            .values
            .iter()
            .zip(&prev.rho_pert.values)
            .zip(&self.background.drho.values)
            .map(|((a, b), d)| self.params.g * (a - b).powi(2) / -d)
            .collect();
        let du: Vec<f64> = next
            .velocity
            .data
            .iter()
            .zip(&prev.velocity.data)
            .map(|(a, b)| a - b)
            .collect();
        let w = self.kinetic_weights(prev);
        Some(vol * (sum::sum(&dr) + sum::dot3(&du, &du, &w)) / (dt * dt))
    }

    /// Monitor record of `next`, with the identity terms measured against
    /// `prev` when given.
    pub fn record(&self, prev: Option<&SimState>, next: &SimState, cumulative: f64) -> StepRecord {
        let u = &next.velocity;
        let grid = &*self.grid;
        let grad_sq = ops::h1_seminorm_sq(u);
        let lap = ops::discrete_laplacian(u).norm();
        let rho_norm = next.rho_pert.norm();
        let u_norm = u.norm();
        let h2 = u_norm + grad_sq.sqrt() + lap;
        let total = self.total_density(next);
        let lyap = self.lyapunov(next);
        let dual = self.dual_energy(next);
        let dissipation = self.params.mu * grad_sq;
        let mut rec = StepRecord {
            step: next.step,
            t: next.t,
            dt: 0.0,
            rho_norm,
            u_norm,
            grad_u_norm: grad_sq.sqrt(),
            lap_u_norm: lap,
            u3_norm: u.component_norm(grid.gravity_axis()),
            horizontal_norm: u.horizontal_norm(),
            ut_norm: None,
            e_h2: (rho_norm * rho_norm + h2 * h2).sqrt(),
            lyapunov: lyap,
            dual_energy: dual,
            dissipation,
            dissipation_integral: cumulative,
            identity_residual: None,
            energy_scale: None,
            dual_growth: None,
            divergence: relative_divergence(u),
            rho_min: total.min(),
            rho_max: total.max(),
        };
        if let Some(p) = prev {
            let dt = next.t - p.t;
            rec.dt = dt;
            rec.ut_norm = Some(u.sub(&p.velocity).norm() / dt);
            rec.dissipation_integral = cumulative + grad_sq * dt;
            if let (Some(l1), Some(l0), Some(k)) =
                (lyap, self.lyapunov(p), self.lyapunov_rate_sq(p, next, dt))
            {
                rec.identity_residual = Some(l1 - l0 + 2.0 * dt * dissipation);
                rec.energy_scale = Some((l0 * k).sqrt() + 2.0 * dissipation);
            }
            if let (Some(d1), Some(d0)) = (dual, self.dual_energy(p)) {
                if d0 > 0.0 {
                    rec.dual_growth = Some(d1 / d0);
                }
            }
        }
        rec
    }

    /// Advances `init` until `opts.t_end` (or `opts.max_steps`), recording
    /// every step. `observe` sees each new state and record and may stop the
    /// run early by returning `false`.
    pub fn run(
        &self,
        init: &SimState,
        opts: &RunOptions,
        mut observe: impl FnMut(&SimState, &StepRecord) -> bool,
        mut sink: Option<&mut dyn Write>,
    ) -> Result<(SimState, MonitorTrace)> {
        self.check_state(init)?;
        let mut trace = MonitorTrace::default();
        let first = self.record(None, init, 0.0);
        if let Some(w) = sink.as_deref_mut() {
            writeln!(w, "{}", StepRecord::csv_header())?;
            writeln!(w, "{}", first.csv_row())?;
        }
        let keep_going = observe(init, &first);
        trace.push(first)?;
        let mut state = init.clone();
        self.checkpoint(opts, &state)?;
        if !keep_going {
            return Ok((state, trace));
        }
        let mut cumulative = 0.0;
        while state.t < opts.t_end * (1.0 - 1e-12) && state.step - init.step < opts.max_steps {
            let mut dt = match opts.dt {
                DtPolicy::Fixed(dt) => dt,
                DtPolicy::Adaptive { safety, dt_max } => self.stable_dt(&state, safety).min(dt_max),
            };
            let remaining = opts.t_end - state.t;
            if dt > remaining {
                dt = remaining;
            }
            let next = match init.mode {
                Mode::Linear => self.step_linear(&state, dt)?,
                Mode::Nonlinear => self.step_nonlinear(&state, dt)?,
            };
            let rec = self.record(Some(&state), &next, cumulative);
            cumulative = rec.dissipation_integral;
            if let Some(w) = sink.as_deref_mut() {
                writeln!(w, "{}", rec.csv_row())?;
            }
            let keep_going = observe(&next, &rec);
            trace.push(rec)?;
            state = next;
            self.checkpoint(opts, &state)?;
            if !keep_going {
                break;
            }
        }
        Ok((state, trace))
    }

    fn checkpoint(&self, opts: &RunOptions, s: &SimState) -> Result<()> {
        if let (Some(every), Some(dir)) = (opts.checkpoint_every, opts.checkpoint_dir.as_ref()) {
            if every > 0 && s.step % every == 0 {
                std::fs::create_dir_all(dir)?;
                Snapshot::Scalar(s.rho_pert.clone())
                    .save(&dir.join(format!("rho_{:06}.rtsf", s.step)))?;
                Snapshot::Vector(s.velocity.clone())
                    .save(&dir.join(format!("u_{:06}.rtsf", s.step)))?;
            }
        }
        Ok(())
    }
}

/// One-call linear step; builds the operators on every call.
pub fn step_linear(
    state: &SimState,
    dt: f64,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<SimState> {
    Stepper::new(state.grid(), profile, params, StepperOptions::default())?.step_linear(state, dt)
}

/// One-call nonlinear step; builds the operators on every call.
pub fn step_nonlinear(
    state: &SimState,
    dt: f64,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<SimState> {
    Stepper::new(state.grid(), profile, params, StepperOptions::default())?
        .step_nonlinear(state, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DtPolicy {
    Fixed(f64),
    /// `safety · min(h² ρ_min / μ, h / ‖u‖∞)`, capped at `dt_max`, recomputed
    /// every step.
    Adaptive { safety: f64, dt_max: f64 },
}

impl DtPolicy {
    pub fn adaptive() -> Self {
        DtPolicy::Adaptive {
            safety: 0.25,
            dt_max: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub t_end: f64,
    pub dt: DtPolicy,
    pub max_steps: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn fixed(t_end: f64, dt: f64) -> Self {
        Self {
            t_end,
            dt: DtPolicy::Fixed(dt),
            max_steps: usize::MAX,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

/// Monitors of one state. Identity terms refer to the step that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub rho_norm: f64,
    pub u_norm: f64,
    pub grad_u_norm: f64,
    pub lap_u_norm: f64,
    pub u3_norm: f64,
    pub horizontal_norm: f64,
    /// `‖(uⁿ - uⁿ⁻¹)/dt‖`.
    pub ut_norm: Option<f64>,
    /// `√(‖ϱ‖² + (‖u‖ + ‖∇u‖ + ‖Δu‖)²)`, the discrete-H² energy.
    pub e_h2: f64,
    pub lyapunov: Option<f64>,
    pub dual_energy: Option<f64>,
    /// `μ‖∇u‖²`.
    pub dissipation: f64,
    /// `∫₀ᵗ ‖∇u‖² dt` (right-endpoint rule).
    pub dissipation_integral: f64,
    /// `Lⁿ⁺¹ - Lⁿ + 2 dt μ‖∇uⁿ⁺¹‖²`.
    pub identity_residual: Option<f64>,
    /// `√(Lⁿ ‖(ϱ_t, u_t)‖²_L) + 2μ‖∇uⁿ⁺¹‖²`, the per-step power scale.
    pub energy_scale: Option<f64>,
    /// `Dⁿ⁺¹ / Dⁿ`.
    pub dual_growth: Option<f64>,
    pub divergence: f64,
    pub rho_min: f64,
    pub rho_max: f64,
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.17e}"))
}

impl StepRecord {
    pub fn l2_norm(&self) -> f64 {
        (self.rho_norm * self.rho_norm + self.u_norm * self.u_norm).sqrt()
    }

    /// `√(‖u‖² + ‖∇u‖²)`.
    pub fn h1_norm(&self) -> f64 {
        (self.u_norm * self.u_norm + self.grad_u_norm * self.grad_u_norm).sqrt()
    }

    pub fn csv_header() -> &'static str {
        "step,t,dt,rho_norm,u_norm,grad_u_norm,lap_u_norm,u3_norm,horizontal_norm,ut_norm,e_h2,lyapunov,dual_energy,dissipation,dissipation_integral,identity_residual,energy_scale,dual_growth,divergence,rho_min,rho_max"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e},{},{},{:.17e},{:.17e},{},{},{},{:.17e},{:.17e},{:.17e}",
            self.step,
            self.t,
            self.dt,
            self.rho_norm,
            self.u_norm,
            self.grad_u_norm,
            self.lap_u_norm,
            self.u3_norm,
            self.horizontal_norm,
            opt(self.ut_norm),
            self.e_h2,
            opt(self.lyapunov),
            opt(self.dual_energy),
            self.dissipation,
            self.dissipation_integral,
            opt(self.identity_residual),
            opt(self.energy_scale),
            opt(self.dual_growth),
            self.divergence,
            self.rho_min,
            self.rho_max
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorTrace {
    pub records: Vec<StepRecord>,
}

impl MonitorTrace {
    /// Appends a record; times must increase strictly.
    pub fn push(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if !(rec.t > last.t) {
                return Err(Error::Precondition(format!(
                    "trace time must increase strictly ({} after {})",
                    rec.t, last.t
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(StepRecord::csv_header());
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

/// Least-squares slope of `ln y` against `t` over `(t, y)` pairs.
pub fn log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(_, y)| !(y > 0.0)) {
        return Err(Error::Degenerate(
            "log-slope fit needs at least two positive samples".into(),
        ));
    }
    let n = points.len() as f64;
    let tm = points.iter().map(|p| p.0).sum::<f64>() / n;
    let lm = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for &(t, y) in points {
        num += (t - tm) * (y.ln() - lm);
        den += (t - tm) * (t - tm);
    }
    if den == 0.0 {
        return Err(Error::Degenerate("all samples at the same time".into()));
    }
    Ok(num / den)
}

/// Minimum number of records inside a fit window.
pub const MIN_WINDOW_RECORDS: usize = 10;

/// Least-squares growth rate of `‖(ϱ, u)‖_{L²}` over records with
/// `t ∈ [window.0, window.1]`.
pub fn measure_growth_rate(trace: &MonitorTrace, window: (f64, f64)) -> Result<f64> {
    let pts: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter(|r| r.t >= window.0 && r.t <= window.1)
        .map(|r| (r.t, r.l2_norm()))
        .collect();
    if pts.len() < MIN_WINDOW_RECORDS {
        return Err(Error::Precondition(format!(
            "growth fit needs at least {MIN_WINDOW_RECORDS} records in the window, got {}",
            pts.len()
        )));
    }
    log_slope(&pts)
}

/// Budget factor of the per-step energy identity: `|r| ≤ 5 dt S`.
pub const IDENTITY_BUDGET: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableDecayReport {
    /// Initial data is zero; the checks hold trivially and `c_estimate` is
    /// undefined.
    pub zero_init: bool,
    /// `max_n |rₙ| / (dtₙ Sₙ)`.
    pub identity_ratio_max: f64,
    /// `Σ |rₙ|` over the run.
    pub identity_residual_sum: f64,
    pub identity_pass: bool,
    pub lyapunov_initial: f64,
    /// `∫₀ᵀ ‖∇u‖² dt`.
    pub dissipation_integral: f64,
    /// `(sup_t ‖(ϱ,u)‖² + ∫‖∇u‖²) / ‖(ϱ₀,u₀)‖²`.
    pub c_estimate: Option<f64>,
    /// The same constant implied by the identity and the norm equivalence
    /// constants of the Lyapunov functional.
    pub c_bound: Option<f64>,
    pub bound_pass: bool,
    /// `‖u(T)‖_{H¹} / ‖u(0)‖_{H¹}`.
    pub h1_ratio: Option<f64>,
    pub decay_pass: bool,
    pub pass: bool,
}

/// Target of the `H¹` decay check.
pub const DECAY_TARGET: f64 = 0.01;

/// Checks the stable-regime identities on a finished run.
pub fn stable_decay_report(
    trace: &MonitorTrace,
    profile: &DensityProfile,
    params: PhysicalParams,
    grid: &Arc<StaggeredGrid>,
) -> Result<StableDecayReport> {
    let bg = Background::new(grid, profile)?;
    if !(bg.drho.max() < 0.0) {
        return Err(Error::Precondition(
            "stable decay report needs ρ̄' < 0 on every cell".into(),
        ));
    }
    let first = trace
        .records
        .first()
        .ok_or_else(|| Error::Precondition("empty trace".into()))?;
    let last = trace.last().unwrap();
    let init_sq = first.l2_norm().powi(2);
    let l0 = first.lyapunov.unwrap_or(0.0);
    let mut ratio_max: f64 = 0.0;
    let mut res_sum = 0.0;
    for r in &trace.records[1..] {
        if let (Some(res), Some(s)) = (r.identity_residual, r.energy_scale) {
            res_sum += res.abs();
            let denom = r.dt * s;
            let ratio = if denom > 0.0 {
                res.abs() / denom
            } else if res == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            ratio_max = ratio_max.max(ratio);
        }
    }
    let identity_pass = ratio_max <= IDENTITY_BUDGET;
    if init_sq == 0.0 {
        return Ok(StableDecayReport {
            zero_init: true,
            identity_ratio_max: ratio_max,
            identity_residual_sum: res_sum,
            identity_pass,
            lyapunov_initial: 0.0,
            dissipation_integral: last.dissipation_integral,
            c_estimate: None,
            c_bound: None,
            bound_pass: true,
            h1_ratio: None,
            decay_pass: true,
            pass: identity_pass,
        });
    }
    let sup_sq = trace
        .records
        .iter()
        .map(|r| r.l2_norm().powi(2))
        .fold(0.0, f64::max);
    let c_est = (sup_sq + last.dissipation_integral) / init_sq;
    // L ≥ m ‖(ϱ,u)‖² with m = min(g/max|ρ̄'|, ρ_min), and 2μ∫‖∇u‖² ≤ L₀ up to
    // the identity residuals.
    let max_abs_drho = bg.drho.values.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let rho_min = trace.records.iter().map(|r| r.rho_min).fold(f64::INFINITY, f64::min);
    let m = (params.g / max_abs_drho).min(rho_min);
    let l_budget = l0 + res_sum;
    let c_bound = (l_budget / m + l_budget / (2.0 * params.mu)) / init_sq;
    let bound_pass = c_est <= c_bound;
    let h0 = first.h1_norm();
    let h1_ratio = if h0 > 0.0 { Some(last.h1_norm() / h0) } else { None };
    let decay_pass = h1_ratio.map_or(true, |r| r <= DECAY_TARGET);
    Ok(StableDecayReport {
        zero_init: false,
        identity_ratio_max: ratio_max,
        identity_residual_sum: res_sum,
        identity_pass,
        lyapunov_initial: l0,
        dissipation_integral: last.dissipation_integral,
        c_estimate: Some(c_est),
        c_bound: Some(c_bound),
        bound_pass,
        h1_ratio,
        decay_pass,
        pass: identity_pass && bound_pass && decay_pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAuditReport {
    pub lambda: f64,
    /// `max_n Dⁿ⁺¹ / (Dⁿ e^{2Λ dt})`.
    pub max_step_ratio: f64,
    /// Least-squares rate of `ln D` over the run, divided by two.
    pub fitted_rate: Option<f64>,
    pub tolerance: f64,
    pub zero_init: bool,
    pub pass: bool,
}

/// Per-step Gronwall check of the dual energy on a linear run.
pub fn dual_energy_audit(trace: &MonitorTrace, lambda: f64, tolerance: f64) -> Result<DualAuditReport> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            reason: "must be positive".into(),
        });
    }
    let mut max_ratio: f64 = 0.0;
    let mut pts = Vec::new();
    let mut zero = true;
    for r in &trace.records {
        let d = r.dual_energy.ok_or_else(|| {
            Error::Precondition("dual energy needs a uniformly unstable profile".into())
        })?;
        if d > 0.0 {
            zero = false;
            pts.push((r.t, d));
        }
        if let Some(gr) = r.dual_growth {
            max_ratio = max_ratio.max(gr / (2.0 * lambda * r.dt).exp());
        }
    }
    let fitted = if pts.len() >= 2 {
        Some(0.5 * log_slope(&pts)?)
    } else {
        None
    };
    Ok(DualAuditReport {
        lambda,
        max_step_ratio: max_ratio,
        fitted_rate: fitted,
        tolerance,
        zero_init: zero,
        pass: zero || max_ratio <= 1.0 + tolerance,
    })
}
