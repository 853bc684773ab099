//! End-to-end studies: escape-time scaling of the nonlinear flow, sharp
//! linear growth, and the stable-regime decay suite.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{
    eigenmode_state, random_state, stable_decay_report, DtPolicy, Mode, MonitorTrace,
    RunOptions, SimState, StableDecayReport, StepRecord, Stepper, StepperOptions,
};
use crate::grid::StaggeredGrid;
use crate::growth::GrowthRateResult;
use crate::profile::{DensityProfile, PhysicalParams};

/// Tracked escape norms of a record: `‖ϱ‖`, `‖u₃‖`, `‖(u₁, u₂)‖`.
pub fn escape_norms(r: &StepRecord) -> [f64; 3] {
    [r.rho_norm, r.u3_norm, r.horizontal_norm]
}

/// Runs `f` over `items` on up to `threads` scoped workers, keeping order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                scope.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeTimeConfig {
    pub profile: DensityProfile,
    pub params: PhysicalParams,
    pub grid: StaggeredGrid,
    /// Initial amplitudes, positive and strictly decreasing.
    pub deltas: Vec<f64>,
    pub epsilon0: f64,
    /// Safety factor of the adaptive time step.
    pub dt_safety: f64,
    /// Upper cap on the time step.
    pub dt_max: f64,
    /// Time budget per run is `budget_factor/Λ · ln(2ε₀/δ)`.
    pub budget_factor: f64,
    pub threads: usize,
    pub stepper: StepperOptions,
}

impl EscapeTimeConfig {
    pub fn new(
        profile: DensityProfile,
        params: PhysicalParams,
        grid: StaggeredGrid,
        deltas: Vec<f64>,
    ) -> Self {
        Self {
            profile,
            params,
            grid,
            deltas,
            epsilon0: 0.05,
            dt_safety: 0.25,
            dt_max: f64::INFINITY,
            budget_factor: 3.0,
            threads: 1,
            stepper: StepperOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidParameter {
                name: "deltas",
                reason: "need at least one positive amplitude".into(),
            });
        }
        if self.deltas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidParameter {
                name: "deltas",
                reason: "amplitudes must be strictly decreasing".into(),
            });
        }
        let dmax = self.deltas[0];
        if !(self.epsilon0 > dmax) {
            return Err(Error::InvalidParameter {
                name: "epsilon0",
                reason: format!("must exceed the largest amplitude {dmax}"),
            });
        }
        if !(self.dt_safety > 0.0 && self.dt_safety <= 1.0 && self.budget_factor > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt_safety",
                reason: "safety must lie in (0, 1] and the budget factor must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Eigenmode normalized to `E = 1` plus the derived thresholds.
#[derive(Debug, Clone)]
pub struct EscapeMode {
    pub state: SimState,
    /// `[‖ρ̃‖, ‖ṽ₃‖, ‖(ṽ₁, ṽ₂)‖]` of the normalized mode.
    pub norms: [f64; 3],
    pub m0: f64,
    pub l2: f64,
}

pub fn escape_mode(stepper: &Stepper, growth: &GrowthRateResult) -> Result<EscapeMode> {
    let eig = growth
        .eigen
        .as_ref()
        .ok_or_else(|| Error::Precondition("growth result has no eigenfield".into()))?;
    let s = eigenmode_state(eig, 1.0, Mode::Nonlinear)?;
    let e = stepper.record(None, &s, 0.0).e_h2;
    let state = s.scaled(1.0 / e);
    let norms = escape_norms(&stepper.record(None, &state, 0.0));
    let m0 = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(m0 > 0.0) {
        return Err(Error::Degenerate(
            "eigenmode has a vanishing density, vertical or horizontal part".into(),
        ));
    }
    let l2 = state.l2_norm();
    Ok(EscapeMode { state, norms, m0, l2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRun {
    pub delta: f64,
    /// First-crossing time of each tracked norm (log-linear interpolation
    /// between steps); `None` if it never crossed.
    pub crossings: [Option<f64>; 3],
    /// `T^δ`: the time by which all three norms have crossed.
    pub escape_time: Option<f64>,
    pub budget: f64,
    pub steps: usize,
    /// Largest `|‖(ϱ,u)(t)‖ / (δ e^{Λt} ‖mode‖) - 1|` while
    /// `‖(ϱ,u)‖ ≤ ε₀/4`.
    pub linearity_deviation: f64,
    #[serde(skip)]
    pub trace: MonitorTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeTimeResult {
    pub runs: Vec<DeltaRun>,
    pub epsilon: f64,
    pub m0: f64,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub lambda_implied: Option<f64>,
    pub lambda_reference: f64,
    /// `|slope·Λ - 1|`.
    pub slope_rel_error: Option<f64>,
    /// `T^{δ/2} - T^{δ}` over `ln 2 / Λ` for consecutive halvings.
    pub halving_ratios: Vec<f64>,
    pub all_crossed: bool,
    pub monotone: bool,
}

impl EscapeTimeResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.all_crossed
            && self.monotone
            && self.slope_rel_error.map_or(false, |e| e <= tol)
    }

    /// Gnuplot-friendly `ln(1/δ) T^δ` table.
    pub fn to_dat(&self) -> String {
        let mut out = String::from("# ln(1/delta) T_delta T_rho T_u3 T_horizontal\n");
        for r in &self.runs {
            let f = |x: Option<f64>| x.map_or("nan".to_string(), |v| format!("{v:.12e}"));
            out.push_str(&format!(
                "{:.12e} {} {} {} {}\n",
                (1.0 / r.delta).ln(),
                f(r.escape_time),
                f(r.crossings[0]),
                f(r.crossings[1]),
                f(r.crossings[2])
            ));
        }
        out
    }
}

/// Evolves `δ · mode` with the nonlinear stepper until all three norms
/// reach `ε = m₀ ε₀` or the budget runs out.
pub fn escape_time_for_delta(
    stepper: &Stepper,
    mode: &EscapeMode,
    delta: f64,
    epsilon0: f64,
    lambda: f64,
    cfg_dt: (f64, f64),
    budget_factor: f64,
) -> Result<DeltaRun> {
    let eps = mode.m0 * epsilon0;
    let init = mode.state.scaled(delta);
    let budget = if 2.0 * epsilon0 > delta {
        budget_factor / lambda * (2.0 * epsilon0 / delta).ln()
    } else {
        0.0
    };
    let mut crossings: [Option<f64>; 3] = [None; 3];
    let mut prev: Option<(f64, [f64; 3])> = None;
    let mut lin_dev: f64 = 0.0;
    let lin_limit = epsilon0 / 4.0;
    let ref_norm = delta * mode.l2;
    let mut observe = |s: &SimState, rec: &StepRecord| {
        let n = escape_norms(rec);
        for k in 0..3 {
            if crossings[k].is_none() && n[k] >= eps {
                crossings[k] = Some(match prev {
                    Some((t0, p)) if p[k] > 0.0 && n[k] > p[k] => {
                        // Log-linear interpolation of the crossing.
                        let f = (eps / p[k]).ln() / (n[k] / p[k]).ln();
                        t0 + f.clamp(0.0, 1.0) * (s.t - t0)
                    }
                    _ => s.t,
                });
            }
        }
        let l2 = rec.l2_norm();
        if l2 <= lin_limit {
            let expected = ref_norm * (lambda * s.t).exp();
            lin_dev = lin_dev.max((l2 / expected - 1.0).abs());
        }
        prev = Some((s.t, n));
        crossings.iter().any(|c| c.is_none())
    };
    let opts = RunOptions {
        t_end: budget,
        dt: DtPolicy::Adaptive {
            safety: cfg_dt.0,
            dt_max: cfg_dt.1,
        },
        max_steps: usize::MAX,
        checkpoint_every: None,
        checkpoint_dir: None,
    };
    let (end, trace) = stepper.run(&init, &opts, &mut observe, None)?;
    let escape = if crossings.iter().all(|c| c.is_some()) {
        crossings.iter().map(|c| c.unwrap()).reduce(f64::max)
    } else {
        None
    };
    Ok(DeltaRun {
        delta,
        crossings,
        escape_time: escape,
        budget,
        steps: end.step,
        linearity_deviation: lin_dev,
        trace,
    })
}

/// Escape-time study for every `δ` in the config, against the growth rate
/// and eigenfield in `growth`.
pub fn run_escape_time(cfg: &EscapeTimeConfig, growth: &GrowthRateResult) -> Result<EscapeTimeResult> {
    cfg.validate()?;
    let lambda = growth
        .lambda
        .ok_or_else(|| Error::Precondition("escape time needs an unstable profile".into()))?;
    if !growth.classification.is_unstable() {
        return Err(Error::Precondition("escape time needs an unstable profile".into()));
    }
    let grid = Arc::new(cfg.grid.clone());
    let stepper = Stepper::new(&grid, &cfg.profile, cfg.params, cfg.stepper)?;
    let mode = escape_mode(&stepper, growth)?;
    let runs: Vec<Result<DeltaRun>> = par_map(&cfg.deltas, cfg.threads, |&d| {
        escape_time_for_delta(
            &stepper,
            &mode,
            d,
            cfg.epsilon0,
            lambda,
            (cfg.dt_safety, cfg.dt_max),
            cfg.budget_factor,
        )
    });
    let mut runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    let all_crossed = runs.iter().all(|r| r.escape_time.is_some());
    let monotone = runs
        .windows(2)
        .all(|w| match (w[0].escape_time, w[1].escape_time) {
            (Some(a), Some(b)) => b > a,
            _ => false,
        });
    let pts: Vec<(f64, f64)> = runs
        .iter()
        .filter_map(|r| r.escape_time.map(|t| ((1.0 / r.delta).ln(), t)))
        .collect();
    let (slope, intercept) = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let xm = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let num: f64 = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
        let s = num / den;
        (Some(s), Some(ym - s * xm))
    } else {
        (None, None)
    };
    let halving_ratios = runs
        .windows(2)
        .filter(|w| ((w[0].delta / w[1].delta) - 2.0).abs() < 1e-9)
        .filter_map(|w| match (w[0].escape_time, w[1].escape_time) {
            (Some(a), Some(b)) => Some((b - a) / (std::f64::consts::LN_2 / lambda)),
            _ => None,
        })
        .collect();
    Ok(EscapeTimeResult {
        epsilon: mode.m0 * cfg.epsilon0,
        m0: mode.m0,
        slope,
        intercept,
        lambda_implied: slope.map(|s| 1.0 / s),
        lambda_reference: lambda,
        slope_rel_error: slope.map(|s| (s * lambda - 1.0).abs()),
        halving_ratios,
        all_crossed,
        monotone,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpGrowthOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Fit window as fractions of `t_end`.
    pub window: (f64, f64),
    pub amplitude: f64,
    pub seed: u64,
    /// Also rerun at `dt/2` to check the stability of `Ĉ`.
    pub dt_halving: bool,
    pub threads: usize,
}

impl Default for SharpGrowthOptions {
    fn default() -> Self {
        Self {
            dt: 0.1,
            t_end: 10.0,
            window: (0.5, 1.0),
            amplitude: 1e-3,
            seed: 1,
            dt_halving: true,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpGrowthReport {
    pub lambda: f64,
    pub eigen_rate: f64,
    pub eigen_rel_error: f64,
    pub random_rates: Vec<f64>,
    pub max_random_rate: f64,
    /// `max_t ‖(ϱ,u)(t)‖ / (e^{Λt}‖(ϱ₀,u₀)‖)` over all runs.
    pub c_hat: f64,
    pub c_hat_half_dt: Option<f64>,
    pub c_hat_change: Option<f64>,
    #[serde(skip)]
    pub eigen_trace: MonitorTrace,
}

impl SharpGrowthReport {
    pub fn passes(&self, rate_tol: f64, c_tol: f64) -> bool {
        self.eigen_rel_error <= rate_tol
            && self.max_random_rate <= self.lambda * (1.0 + rate_tol)
            && self.c_hat.is_finite()
            && self.c_hat_change.map_or(true, |c| c <= c_tol)
    }

    /// `run rate` table, the eigenmode first (index 0).
    pub fn to_dat(&self) -> String {
        let mut out = format!("# run fitted_rate (lambda = {:.12e})\n", self.lambda);
        out.push_str(&format!("0 {:.12e}\n", self.eigen_rate));
        for (i, r) in self.random_rates.iter().enumerate() {
            out.push_str(&format!("{} {:.12e}\n", i + 1, r));
        }
        out
    }
}

fn c_hat_of(trace: &MonitorTrace, lambda: f64) -> f64 {
    let n0 = trace.records[0].l2_norm();
    trace
        .records
        .iter()
        .map(|r| r.l2_norm() / ((lambda * r.t).exp() * n0))
        .fold(0.0, f64::max)
}

struct SharpRun {
    rate: f64,
    c_hat: f64,
    trace: MonitorTrace,
}

fn sharp_run(
    stepper: &Stepper,
    init: &SimState,
    lambda: f64,
    dt: f64,
    opts: &SharpGrowthOptions,
) -> Result<SharpRun> {
    let (_, trace) = stepper.run(init, &RunOptions::fixed(opts.t_end, dt), |_, _| true, None)?;
    let window = (opts.window.0 * opts.t_end, opts.window.1 * opts.t_end);
    let rate = crate::evolution::measure_growth_rate(&trace, window)?;
    Ok(SharpRun {
        rate,
        c_hat: c_hat_of(&trace, lambda),
        trace,
    })
}

/// Linear runs from the eigenmode and `n_random` seeded random states.
pub fn run_sharp_growth(
    growth: &GrowthRateResult,
    n_random: usize,
    opts: &SharpGrowthOptions,
) -> Result<SharpGrowthReport> {
    let lambda = growth
        .lambda
        .ok_or_else(|| Error::Precondition("sharp growth needs an unstable profile".into()))?;
    let eig = growth
        .eigen
        .as_ref()
        .ok_or_else(|| Error::Precondition("growth result has no eigenfield".into()))?;
    let grid = eig.velocity.grid().clone();
    let stepper = Stepper::new(&grid, &growth.profile, growth.params, StepperOptions::default())?;
    let mut inits = vec![eigenmode_state(eig, opts.amplitude, Mode::Linear)?];
    for k in 0..n_random {
        inits.push(random_state(&grid, opts.seed.wrapping_add(k as u64), opts.amplitude, Mode::Linear)?);
    }
    let run_all = |dt: f64| -> Result<Vec<SharpRun>> {
        par_map(&inits, opts.threads, |s| sharp_run(&stepper, s, lambda, dt, opts))
            .into_iter()
            .collect()
    };
    let mut runs = run_all(opts.dt)?;
    let c_hat = runs.iter().map(|r| r.c_hat).fold(0.0, f64::max);
    let c_half = if opts.dt_halving {
        Some(run_all(0.5 * opts.dt)?.iter().map(|r| r.c_hat).fold(0.0, f64::max))
    } else {
        None
    };
    let eigen = runs.remove(0);
    let random_rates: Vec<f64> = runs.iter().map(|r| r.rate).collect();
    Ok(SharpGrowthReport {
        lambda,
        eigen_rate: eigen.rate,
        eigen_rel_error: (eigen.rate / lambda - 1.0).abs(),
        max_random_rate: random_rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        random_rates,
        c_hat,
        c_hat_half_dt: c_half,
        c_hat_change: c_half.map(|c| (c / c_hat - 1.0).abs()),
        eigen_trace: eigen.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityOptions {
    pub amplitudes: Vec<f64>,
    pub t_end: f64,
    pub dt_linear: f64,
    pub dt_safety: f64,
    pub seed: u64,
    /// Upper density bound `K` of the nonlinear hypothesis; defaults to
    /// twice the largest background density.
    pub k_bound: Option<f64>,
    pub nonlinear: bool,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            amplitudes: vec![1e-3, 1e-2, 1e-1],
            t_end: 25.0,
            dt_linear: 0.05,
            dt_safety: 0.25,
            seed: 7,
            k_bound: None,
            nonlinear: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeRun {
    pub amplitude: f64,
    pub report: StableDecayReport,
    pub steps: usize,
    #[serde(skip)]
    pub trace: MonitorTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearScope {
    /// `ρ̄'` is constant: the nonlinear stability statement applies.
    WithinHypothesis,
    /// Executed for information only; no pass/fail.
    BeyondHypothesis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub linear: Vec<AmplitudeRun>,
    pub nonlinear: Vec<AmplitudeRun>,
    pub nonlinear_scope: Option<NonlinearScope>,
    /// `L₀(2a) / L₀(a)` for the first amplitude (exactly 4 for a quadratic
    /// functional).
    pub doubling_ratio: f64,
    pub linear_pass: bool,
    /// `None` when the nonlinear runs are beyond the hypothesis or skipped.
    pub nonlinear_pass: Option<bool>,
}

/// Linear and (when requested) nonlinear decay runs for a stable profile.
pub fn run_stability_suite(
    profile: &DensityProfile,
    params: PhysicalParams,
    grid: &Arc<StaggeredGrid>,
    opts: &StabilityOptions,
) -> Result<StabilityReport> {
    let stepper = Stepper::new(grid, profile, params, StepperOptions::default())?;
    if !(stepper.background.bounds.drho_max < 0.0) {
        return Err(Error::Precondition(
            "stability suite needs a stable profile (sup ρ̄' < 0)".into(),
        ));
    }
    if opts.amplitudes.is_empty() || opts.amplitudes.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidParameter {
            name: "amplitudes",
            reason: "need positive amplitudes".into(),
        });
    }
    let base = |mode| random_state(grid, opts.seed, 1.0, mode);
    let l0 = |a: f64| -> Result<f64> {
        Ok(stepper.lyapunov(&base(Mode::Linear)?.scaled(a)).unwrap_or(0.0))
    };
    let doubling_ratio = l0(2.0 * opts.amplitudes[0])? / l0(opts.amplitudes[0])?;

    let mut linear = Vec::new();
    for &a in &opts.amplitudes {
        let init = base(Mode::Linear)?.scaled(a);
        let (end, trace) =
            stepper.run(&init, &RunOptions::fixed(opts.t_end, opts.dt_linear), |_, _| true, None)?;
        let report = stable_decay_report(&trace, profile, params, grid)?;
        linear.push(AmplitudeRun {
            amplitude: a,
            report,
            steps: end.step,
            trace,
        });
    }
    let linear_pass = linear.iter().all(|r| r.report.pass);

    let mut nonlinear = Vec::new();
    let mut scope = None;
    if opts.nonlinear {
        let k = opts
            .k_bound
            .unwrap_or(2.0 * stepper.background.bounds.rho_max);
        // Check the density band of every initial state before running any.
        let mut inits = Vec::new();
        for &a in &opts.amplitudes {
            let init = base(Mode::Nonlinear)?.scaled(a);
            let total = stepper.total_density(&init);
            if !(total.min() > 0.0 && total.max() <= k) {
                return Err(Error::Precondition(format!(
                    "initial total density [{}, {}] is outside the band (0, {k}] at amplitude {a}",
                    total.min(),
                    total.max()
                )));
            }
            inits.push((a, init));
        }
        scope = Some(if profile.has_constant_gradient() {
            NonlinearScope::WithinHypothesis
        } else {
            NonlinearScope::BeyondHypothesis
        });
        let run_opts = RunOptions {
            t_end: opts.t_end,
            dt: DtPolicy::Adaptive {
                safety: opts.dt_safety,
                dt_max: f64::INFINITY,
            },
            max_steps: usize::MAX,
            checkpoint_every: None,
            checkpoint_dir: None,
        };
        for (a, init) in inits {
            let (end, trace) = stepper.run(&init, &run_opts, |_, _| true, None)?;
            let report = stable_decay_report(&trace, profile, params, grid)?;
            nonlinear.push(AmplitudeRun {
                amplitude: a,
                report,
                steps: end.step,
                trace,
            });
        }
    }
    let nonlinear_pass = match scope {
        Some(NonlinearScope::WithinHypothesis) => Some(nonlinear.iter().all(|r| r.report.pass)),
        _ => None,
    };
    Ok(StabilityReport {
        linear,
        nonlinear,
        nonlinear_scope: scope,
        doubling_ratio,
        linear_pass,
        nonlinear_pass,
    })
}

/// A run directory: `manifest.json`, `result.json`, trace CSVs and `.dat`
/// tables.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        std::fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Io(format!("serializing {name}: {e}")))?;
        std::fs::write(self.path.join(name), text)?;
        Ok(())
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.path.join(name), text)?;
        Ok(())
    }

    pub fn write_trace(&self, name: &str, trace: &MonitorTrace) -> Result<()> {
        self.write_text(name, &trace.to_csv())
    }
}

/// Growth-rate table `t ln‖(ϱ,u)‖` of a trace.
pub fn growth_dat(trace: &MonitorTrace) -> String {
    let mut out = String::from("# t ln_l2_norm\n");
    for r in &trace.records {
        out.push_str(&format!("{:.12e} {:.12e}\n", r.t, r.l2_norm().ln()));
    }
    out
}
