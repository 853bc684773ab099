//! Command pipelines. Each writes its artifacts into the run directory and
//! returns a pass flag plus a JSON summary for the manifest.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rtspectra::evolution::{
    dual_energy_audit, eigenmode_state, measure_growth_rate, random_state, stable_decay_report,
    DtPolicy, Mode, RunOptions, Stepper, StepperOptions,
};
use rtspectra::experiments::{
    growth_dat, run_escape_time, run_sharp_growth, run_stability_suite, EscapeTimeConfig, RunDir,
    SharpGrowthOptions, StabilityOptions,
};
use rtspectra::growth::{solve_growth_rate, GrowthOptions, GrowthRateResult, Verdict};
use rtspectra::snapshot::Snapshot;
use rtspectra::spectra::{EigenOptions, Spectra};
use rtspectra::{Background, Classification, DensityProfile, PhysicalParams, StaggeredGrid};
use serde_json::json;

use crate::config::{Command, InitKind, RunConfig};
use crate::manifest::{write_json_atomic, Outcome, RunManifest, Timer};
use crate::registry::profile_from_spec;
use crate::{exit, CliError};

/// Result of one pipeline.
#[derive(Debug, Clone)]
pub struct Report {
    pub passed: bool,
    pub summary: serde_json::Value,
}

/// Shared state of a run.
pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    /// Directory against which relative table paths resolve.
    pub base: PathBuf,
    pub dir: RunDir,
    pub timer: Timer,
}

impl Ctx<'_> {
    fn params(&self, mu: f64) -> Result<PhysicalParams, CliError> {
        Ok(PhysicalParams::new(mu, self.cfg.params.g)?)
    }

    fn profile(&self, spec: &str) -> Result<DensityProfile, CliError> {
        profile_from_spec(spec, &self.base)
    }

    fn growth_options(&self) -> GrowthOptions {
        let t = &self.cfg.tolerances;
        GrowthOptions {
            eigen: EigenOptions {
                tol: t.eigen,
                poisson_tol: t.poisson,
                ..Default::default()
            },
            fixed_point_tol: t.fixed_point,
            ..Default::default()
        }
    }

    fn stepper_options(&self) -> StepperOptions {
        StepperOptions {
            solver_tol: self.cfg.tolerances.solver,
            advection: self.cfg.evolution.advection.into(),
            max_principle_tol: self.cfg.tolerances.max_principle,
        }
    }

    fn sub(&self, name: &str) -> Result<RunDir, CliError> {
        Ok(RunDir::create(self.dir.path.join(name))?)
    }
}

fn growth_summary(r: &GrowthRateResult, pass: bool) -> serde_json::Value {
    json!({
        "verdict": match r.verdict {
            Verdict::Unstable => "unstable",
            Verdict::NoPositiveGrowthRate => "no positive growth rate",
        },
        "classification": r.classification,
        "lambda": r.lambda,
        "fixed_point_residual": r.fixed_point_residual,
        "pde_residual": r.pde_residual,
        "lambda_n": r.lambda_n,
        "lambda_vs_lambda_n_gap": r.lambda_vs_lambda_n_gap,
        "certificates_pass": pass,
    })
}

fn growth_stage(
    ctx: &mut Ctx,
    dir: &RunDir,
    grid: &Arc<StaggeredGrid>,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<(GrowthRateResult, Report), CliError> {
    let opts = ctx.growth_options();
    let r = ctx
        .timer
        .stage("growth-rate", || solve_growth_rate(grid, profile, params, opts))?;
    dir.write_json("result.json", &r)?;
    let mut dat = String::from("# s alpha(s)\n");
    for (s, a) in &r.bracket_history {
        dat.push_str(&format!("{s:.12e} {a:.12e}\n"));
    }
    dir.write_text("bracket.dat", &dat)?;
    if let Some(eig) = &r.eigen {
        Snapshot::Vector(eig.velocity.clone()).save(&dir.path.join("eigen_u.rtsf"))?;
        Snapshot::Scalar(eig.density_mode.clone()).save(&dir.path.join("eigen_rho.rtsf"))?;
    }
    let cert = ctx.cfg.tolerances.certificate;
    let pass = r.certificates_pass(cert, cert);
    let summary = growth_summary(&r, pass);
    Ok((r, Report { passed: pass, summary }))
}

fn growth_rate(ctx: &mut Ctx) -> Result<Report, CliError> {
    let grid = ctx.cfg.grid()?;
    let profile = ctx.profile(&ctx.cfg.profile)?;
    let params = ctx.params(ctx.cfg.params.mu)?;
    let dir = ctx.dir.clone();
    Ok(growth_stage(ctx, &dir, &grid, &profile, params)?.1)
}

fn alpha_sweep(ctx: &mut Ctx) -> Result<Report, CliError> {
    let cfg = ctx.cfg;
    let grid = cfg.grid()?;
    let profile = ctx.profile(&cfg.profile)?;
    let params = ctx.params(cfg.params.mu)?;
    let sp = Spectra::new(&grid, &profile, params, ctx.growth_options().eigen)?;
    let a = &cfg.alpha_sweep;
    let s_max = if a.s_max > 0.0 {
        a.s_max
    } else {
        let bound = Background::new(&grid, &profile)?.alpha_upper_bound(params.g);
        if bound > 0.0 {
            bound.sqrt()
        } else {
            1.0
        }
    };
    let s: Vec<f64> = (0..a.points)
        .map(|i| a.s_min + (s_max - a.s_min) * i as f64 / (a.points - 1) as f64)
        .collect();
    let curve = ctx
        .timer
        .stage("alpha-sweep", || sp.alpha_curve(&s, cfg.threads))?;
    ctx.dir.write_json("result.json", &curve)?;
    ctx.dir.write_text("alpha.csv", &curve.to_csv())?;
    let mut dat = String::from("# s alpha(s) s^2\n");
    for p in &curve.samples {
        dat.push_str(&format!("{:.12e} {:.12e} {:.12e}\n", p.s, p.alpha, p.s * p.s));
    }
    ctx.dir.write_text("alpha.dat", &dat)?;
    let checks = json!({
        "nonincreasing": curve.is_nonincreasing(),
        "upper_bound": curve.upper_bound_holds(),
        "lower_bound": curve.lower_bound_holds(),
        "lipschitz": curve.lipschitz_holds(),
    });
    let passed = curve.is_nonincreasing()
        && curve.upper_bound_holds()
        && curve.lower_bound_holds()
        && curve.lipschitz_holds();
    Ok(Report {
        passed,
        summary: json!({ "points": curve.samples.len(), "s_max": s_max, "checks": checks }),
    })
}

fn evolve(ctx: &mut Ctx, mode: Mode) -> Result<Report, CliError> {
    let cfg = ctx.cfg;
    let e = &cfg.evolution;
    let grid = cfg.grid()?;
    let profile = ctx.profile(&cfg.profile)?;
    let params = ctx.params(cfg.params.mu)?;
    let stepper = Stepper::new(&grid, &profile, params, ctx.stepper_options())?;
    let class = stepper.background.classification;
    let growth = if class.is_unstable() {
        let opts = GrowthOptions {
            cross_check: false,
            ..ctx.growth_options()
        };
        Some(
            ctx.timer
                .stage("growth-rate", || solve_growth_rate(&grid, &profile, params, opts))?,
        )
    } else {
        None
    };
    let lambda = growth.as_ref().and_then(|g| g.lambda);
    let init = match e.init {
        InitKind::Eigenmode => {
            let eig = growth.as_ref().and_then(|g| g.eigen.as_ref()).ok_or_else(|| {
                CliError::Config {
                    path: "evolution.init".into(),
                    reason: "eigenmode initial data needs an unstable profile; use \"random\"".into(),
                }
            })?;
            eigenmode_state(eig, e.amplitude, mode)?
        }
        InitKind::Random => random_state(&grid, cfg.seed, e.amplitude, mode)?,
    };
    let dt = if e.dt > 0.0 {
        DtPolicy::Fixed(e.dt)
    } else {
        DtPolicy::Adaptive {
            safety: e.dt_safety,
            dt_max: f64::INFINITY,
        }
    };
    let run = RunOptions {
        t_end: e.t_end,
        dt,
        max_steps: usize::MAX,
        checkpoint_every: (e.checkpoint_every > 0).then_some(e.checkpoint_every),
        checkpoint_dir: Some(ctx.dir.path.join("checkpoints")),
    };
    let mut sink = BufWriter::new(File::create(ctx.dir.path.join("trace.csv"))?);
    let (end, trace) = ctx.timer.stage("evolve", || {
        stepper.run(&init, &run, |_, _| true, Some(&mut sink))
    })?;
    drop(sink);
    ctx.dir.write_text("growth.dat", &growth_dat(&trace))?;
    Snapshot::Vector(end.velocity.clone()).save(&ctx.dir.path.join("final_u.rtsf"))?;
    Snapshot::Scalar(end.rho_pert.clone()).save(&ctx.dir.path.join("final_rho.rtsf"))?;

    let mut summary = json!({
        "classification": class,
        "lambda": lambda,
        "steps": end.step,
        "t_end": end.t,
        "final_l2": end.l2_norm(),
        "initial_l2": init.l2_norm(),
    });
    let mut passed = true;
    if let Some(lambda) = lambda {
        let window = (e.fit_window[0] * e.t_end, e.fit_window[1] * e.t_end);
        let rate = measure_growth_rate(&trace, window)?;
        let tol = match mode {
            Mode::Linear => cfg.tolerances.rate,
            Mode::Nonlinear => cfg.tolerances.rate.max(0.05),
        };
        let ok = match e.init {
            InitKind::Eigenmode => (rate / lambda - 1.0).abs() <= tol,
            InitKind::Random => rate <= lambda * (1.0 + tol),
        };
        passed &= ok;
        summary["fitted_rate"] = json!(rate);
        summary["rate_check"] = json!(ok);
        if mode == Mode::Linear && class == Classification::UniformlyUnstable {
            let audit = dual_energy_audit(&trace, lambda, cfg.tolerances.dual_audit)?;
            passed &= audit.pass;
            summary["dual_audit"] = serde_json::to_value(&audit).expect("serializes");
        }
    }
    if class == Classification::Stable {
        let rep = stable_decay_report(&trace, &profile, params, &grid)?;
        let verdict = mode == Mode::Linear || profile.has_constant_gradient();
        if verdict {
            passed &= rep.pass;
        } else {
            summary["scope"] = json!("beyond the constant-gradient hypothesis; no verdict");
        }
        summary["stable_decay"] = serde_json::to_value(&rep).expect("serializes");
    }
    ctx.dir.write_json("result.json", &summary)?;
    Ok(Report { passed, summary })
}

fn escape_time(ctx: &mut Ctx) -> Result<Report, CliError> {
    let cfg = ctx.cfg;
    let grid = cfg.grid()?;
    let profile = ctx.profile(&cfg.profile)?;
    let params = ctx.params(cfg.params.mu)?;
    let opts = GrowthOptions {
        cross_check: false,
        ..ctx.growth_options()
    };
    let g = ctx
        .timer
        .stage("growth-rate", || solve_growth_rate(&grid, &profile, params, opts))?;
    let x = &cfg.escape;
    let mut ec = EscapeTimeConfig::new(profile, params, (*grid).clone(), x.deltas.clone());
    ec.epsilon0 = x.epsilon0;
    ec.budget_factor = x.budget_factor;
    ec.dt_safety = x.dt_safety;
    ec.threads = cfg.threads;
    ec.stepper = ctx.stepper_options();
    let r = ctx.timer.stage("escape-time", || run_escape_time(&ec, &g))?;
    ctx.dir.write_json("result.json", &r)?;
    ctx.dir.write_text("escape.dat", &r.to_dat())?;
    for (i, run) in r.runs.iter().enumerate() {
        ctx.dir.write_trace(&format!("trace_delta{i}.csv"), &run.trace)?;
    }
    let tol = x.slope_tol;
    let linear_ok = r
        .runs
        .last()
        .map_or(false, |run| run.linearity_deviation <= tol);
    let halving_ok = r.halving_ratios.iter().all(|h| (h - 1.0).abs() <= tol);
    let passed = r.passes(tol) && linear_ok && halving_ok;
    let summary = json!({
        "lambda": r.lambda_reference,
        "lambda_implied": r.lambda_implied,
        "slope": r.slope,
        "slope_rel_error": r.slope_rel_error,
        "halving_ratios": r.halving_ratios,
        "all_crossed": r.all_crossed,
        "monotone": r.monotone,
        "linearity_check": linear_ok,
    });
    Ok(Report { passed, summary })
}

fn sharp_growth(
    ctx: &mut Ctx,
    dir: &RunDir,
    g: &GrowthRateResult,
) -> Result<Report, CliError> {
    let s = &ctx.cfg.sharp;
    let opts = SharpGrowthOptions {
        dt: s.dt,
        t_end: s.t_end,
        amplitude: s.amplitude,
        seed: ctx.cfg.seed,
        threads: ctx.cfg.threads,
        ..Default::default()
    };
    let n = s.n_random;
    let rep = ctx
        .timer
        .stage("sharp-growth", || run_sharp_growth(g, n, &opts))?;
    dir.write_json("result.json", &rep)?;
    dir.write_text("rates.dat", &rep.to_dat())?;
    dir.write_trace("eigen_trace.csv", &rep.eigen_trace)?;
    let passed = rep.passes(ctx.cfg.tolerances.rate, 0.05);
    Ok(Report {
        passed,
        summary: json!({
            "lambda": rep.lambda,
            "eigen_rate": rep.eigen_rate,
            "max_random_rate": rep.max_random_rate,
            "c_hat": rep.c_hat,
            "c_hat_change": rep.c_hat_change,
        }),
    })
}

fn stability(
    ctx: &mut Ctx,
    dir: &RunDir,
    profile: &DensityProfile,
    params: PhysicalParams,
) -> Result<Report, CliError> {
    let cfg = ctx.cfg;
    let grid = cfg.grid()?;
    let st = &cfg.stability;
    let opts = StabilityOptions {
        amplitudes: st.amplitudes.clone(),
        t_end: st.t_end,
        dt_linear: st.dt,
        dt_safety: cfg.evolution.dt_safety,
        seed: cfg.seed,
        k_bound: (st.k_bound > 0.0).then_some(st.k_bound),
        nonlinear: st.nonlinear,
    };
    let rep = ctx
        .timer
        .stage("stability-suite", || run_stability_suite(profile, params, &grid, &opts))?;
    dir.write_json("result.json", &rep)?;
    for (i, r) in rep.linear.iter().enumerate() {
        dir.write_trace(&format!("linear_a{i}.csv"), &r.trace)?;
    }
    for (i, r) in rep.nonlinear.iter().enumerate() {
        dir.write_trace(&format!("nonlinear_a{i}.csv"), &r.trace)?;
    }
    let passed = rep.linear_pass && rep.nonlinear_pass != Some(false);
    Ok(Report {
        passed,
        summary: json!({
            "linear_pass": rep.linear_pass,
            "nonlinear_pass": rep.nonlinear_pass,
            "nonlinear_scope": rep.nonlinear_scope,
            "doubling_ratio": rep.doubling_ratio,
        }),
    })
}

fn stability_suite(ctx: &mut Ctx) -> Result<Report, CliError> {
    let profile = ctx.profile(&ctx.cfg.profile)?;
    let params = ctx.params(ctx.cfg.params.mu)?;
    let dir = ctx.dir.clone();
    stability(ctx, &dir, &profile, params)
}

/// growth-rate → cross-check → sharp-growth on the unstable profile, then
/// growth-rate and the stability suite on the stable one.
fn verify_all(ctx: &mut Ctx) -> Result<Report, CliError> {
    let v = ctx.cfg.verify.clone();
    let grid = ctx.cfg.grid()?;
    let unstable = ctx.profile(&v.unstable_profile)?;
    let stable = ctx.profile(&v.stable_profile)?;
    let pu = ctx.params(v.unstable_mu)?;
    let ps = ctx.params(v.stable_mu)?;

    let d = ctx.sub("unstable_growth")?;
    let (g, growth_u) = growth_stage(ctx, &d, &grid, &unstable, pu)?;
    let cross_ok = match g.classification {
        Classification::UniformlyUnstable => g.lambda_vs_lambda_n_gap.is_some(),
        _ => true,
    };
    if g.lambda.is_none() {
        return Err(CliError::Config {
            path: "verify.unstable_profile".into(),
            reason: "has no positive growth rate".into(),
        });
    }
    let d = ctx.sub("sharp_growth")?;
    let sharp = sharp_growth(ctx, &d, &g)?;
    let d = ctx.sub("stable_growth")?;
    let (gs, growth_s) = growth_stage(ctx, &d, &grid, &stable, ps)?;
    let stable_verdict = gs.verdict == Verdict::NoPositiveGrowthRate;
    let d = ctx.sub("stability_suite")?;
    let stab = stability(ctx, &d, &stable, ps)?;
    let passed = growth_u.passed && cross_ok && sharp.passed && growth_s.passed && stable_verdict && stab.passed;
    Ok(Report {
        passed,
        summary: json!({
            "unstable_growth": growth_u.summary,
            "cross_check": cross_ok,
            "sharp_growth": sharp.summary,
            "stable_growth": growth_s.summary,
            "stability_suite": stab.summary,
            "stages_pass": {
                "unstable_growth": growth_u.passed,
                "cross_check": cross_ok,
                "sharp_growth": sharp.passed,
                "stable_growth": growth_s.passed && stable_verdict,
                "stability_suite": stab.passed,
            },
        }),
    })
}

pub fn dispatch(ctx: &mut Ctx) -> Result<Report, CliError> {
    match ctx.cfg.command {
        Command::GrowthRate => growth_rate(ctx),
        Command::AlphaSweep => alpha_sweep(ctx),
        Command::EvolveLinear => evolve(ctx, Mode::Linear),
        Command::EvolveNonlinear => evolve(ctx, Mode::Nonlinear),
        Command::EscapeTime => escape_time(ctx),
        Command::StabilitySuite => stability_suite(ctx),
        Command::VerifyAll => verify_all(ctx),
    }
}

/// Output directory: `out` from the config, else
/// `$RTSPECTRA_OUT/<command>-<unix seconds>`, else `runs/<command>-<unix seconds>`.
pub fn resolve_out(cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &cfg.out {
        return out.clone();
    }
    let root = std::env::var_os("RTSPECTRA_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut dir = root.join(format!("{}-{stamp}", cfg.command.name()));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{}-{stamp}-{k}", cfg.command.name()));
        k += 1;
    }
    dir
}

/// Runs the configured command end to end and writes `manifest.json` (and
/// `failure.json` on error). Returns the process exit code.
pub fn execute(cfg: &RunConfig, base: &Path) -> Result<i32, CliError> {
    let out = resolve_out(cfg);
    let dir = RunDir::create(&out)?;
    let mut ctx = Ctx {
        cfg,
        base: base.to_path_buf(),
        dir,
        timer: Timer::new(),
    };
    let result = dispatch(&mut ctx);
    let (outcome, failure) = match &result {
        Ok(r) => {
            let code = if r.passed {
                exit::PASS
            } else {
                exit::CERTIFICATE_FAILURE
            };
            let status = if r.passed { "pass" } else { "certificate_failure" };
            (
                Outcome {
                    status: status.into(),
                    exit_code: code,
                    summary: r.summary.clone(),
                },
                None,
            )
        }
        Err(e) => {
            let rec = e.record();
            write_json_atomic(&out.join("failure.json"), &rec)?;
            let status = if rec.exit_code == exit::USAGE {
                "usage_error"
            } else {
                "numerical_failure"
            };
            (
                Outcome {
                    status: status.into(),
                    exit_code: rec.exit_code,
                    summary: serde_json::Value::Null,
                },
                Some(rec),
            )
        }
    };
    let code = outcome.exit_code;
    let manifest = RunManifest {
        tool: "rtspectra".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        started_unix: ctx.timer.started_unix,
        wall_time_s: ctx.timer.elapsed(),
        stages: ctx.timer.stages,
        outcome,
        failure,
    };
    write_json_atomic(&out.join("manifest.json"), &manifest)?;
    if let Err(e) = result {
        return Err(e);
    }
    Ok(code)
}
