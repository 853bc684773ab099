//! Run configuration: a TOML document plus `--set key=value` overrides.
//!
//! Every field has a documented default and `normalize` fills the few that
//! depend on other fields, so the serialized config in the manifest is
//! complete.

use std::path::PathBuf;
use std::sync::Arc;

use rtspectra::evolution::Advection;
use rtspectra::{BoxDomain, StaggeredGrid};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GrowthRate,
    AlphaSweep,
    EvolveLinear,
    EvolveNonlinear,
    EscapeTime,
    StabilitySuite,
    VerifyAll,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GrowthRate => "growth-rate",
            Command::AlphaSweep => "alpha-sweep",
            Command::EvolveLinear => "evolve-linear",
            Command::EvolveNonlinear => "evolve-nonlinear",
            Command::EscapeTime => "escape-time",
            Command::StabilitySuite => "stability-suite",
            Command::VerifyAll => "verify-all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    pub mu: f64,
    pub g: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self { mu: 0.1, g: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// `|Λ² − α(Λ)| ≤ fixed_point · max(1, Λ²)`.
    pub fixed_point: f64,
    /// Relative Ritz residual of the eigensolver.
    pub eigen: f64,
    /// Poisson solves inside the projector.
    pub poisson: f64,
    /// Viscous and pressure solves of the time steppers.
    pub solver: f64,
    /// PDE residual and `Λ` vs `Λ_N` certificates.
    pub certificate: f64,
    pub max_principle: f64,
    /// Per-step slack of the dual-energy audit.
    pub dual_audit: f64,
    /// Relative tolerance on fitted growth rates and escape slopes.
    pub rate: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fixed_point: 1e-8,
            eigen: 1e-10,
            poisson: 1e-12,
            solver: 1e-12,
            certificate: 1e-6,
            max_principle: 1e-10,
            dual_audit: 1e-3,
            rate: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Eigenmode,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvectionKind {
    Upwind,
    SemiLagrangian,
}

impl From<AdvectionKind> for Advection {
    fn from(a: AdvectionKind) -> Self {
        match a {
            AdvectionKind::Upwind => Advection::Upwind,
            AdvectionKind::SemiLagrangian => Advection::SemiLagrangian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Evolution {
    pub t_end: f64,
    /// Fixed step; `0` selects the adaptive policy.
    pub dt: f64,
    pub dt_safety: f64,
    pub init: InitKind,
    pub amplitude: f64,
    pub advection: AdvectionKind,
    /// Checkpoint every N steps; `0` disables checkpoints.
    pub checkpoint_every: usize,
    /// Growth-rate fit window as fractions of `t_end`.
    pub fit_window: [f64; 2],
}

impl Default for Evolution {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            dt: 0.05,
            dt_safety: 0.25,
            init: InitKind::Eigenmode,
            amplitude: 1e-3,
            advection: AdvectionKind::Upwind,
            checkpoint_every: 0,
            fit_window: [0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSweep {
    pub s_min: f64,
    /// `0` selects `√(g sup ρ̄'/ρ̄)`, the largest possible growth rate.
    pub s_max: f64,
    pub points: usize,
}

impl Default for AlphaSweep {
    fn default() -> Self {
        Self {
            s_min: 0.0,
            s_max: 0.0,
            points: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Escape {
    pub deltas: Vec<f64>,
    pub epsilon0: f64,
    pub budget_factor: f64,
    pub dt_safety: f64,
    /// Relative tolerance on the slope, the halving increments and the
    /// linearity check.
    pub slope_tol: f64,
}

impl Default for Escape {
    fn default() -> Self {
        Self {
            deltas: vec![1e-2, 5e-3, 2.5e-3, 1.25e-3],
            epsilon0: 0.05,
            budget_factor: 3.0,
            dt_safety: 0.25,
            slope_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sharp {
    pub n_random: usize,
    pub dt: f64,
    pub t_end: f64,
    pub amplitude: f64,
}

impl Default for Sharp {
    fn default() -> Self {
        Self {
            n_random: 20,
            dt: 0.1,
            t_end: 10.0,
            amplitude: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stability {
    pub amplitudes: Vec<f64>,
    pub t_end: f64,
    pub dt: f64,
    pub nonlinear: bool,
    /// Upper density bound of the nonlinear hypothesis; `0` selects
    /// `2 max ρ̄`.
    pub k_bound: f64,
}

impl Default for Stability {
    fn default() -> Self {
        Self {
            amplitudes: vec![1e-3, 1e-2, 1e-1],
            t_end: 25.0,
            dt: 0.05,
            nonlinear: true,
            k_bound: 0.0,
        }
    }
}

/// Canned profiles of `verify-all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Verify {
    pub unstable_profile: String,
    pub unstable_mu: f64,
    pub stable_profile: String,
    pub stable_mu: f64,
}

impl Default for Verify {
    fn default() -> Self {
        Self {
            unstable_profile: "linear(1, 1)".into(),
            unstable_mu: 0.01,
            stable_profile: "linear(2, -1)".into(),
            stable_mu: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Command,
    /// Cells per axis, `NxM` or `NxMxK`; the last axis is vertical.
    pub grid: String,
    /// Box lengths; empty means the unit box.
    pub domain: Vec<f64>,
    pub profile: String,
    pub seed: u64,
    /// Worker threads; `0` selects the available parallelism.
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub params: Params,
    pub tolerances: Tolerances,
    pub evolution: Evolution,
    pub alpha_sweep: AlphaSweep,
    pub escape: Escape,
    pub sharp: Sharp,
    pub stability: Stability,
    pub verify: Verify,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::GrowthRate,
            grid: "32x32".into(),
            domain: Vec::new(),
            profile: "linear(1, 1)".into(),
            seed: 0,
            threads: 0,
            out: None,
            params: Params::default(),
            tolerances: Tolerances::default(),
            evolution: Evolution::default(),
            alpha_sweep: AlphaSweep::default(),
            escape: Escape::default(),
            sharp: Sharp::default(),
            stability: Stability::default(),
            verify: Verify::default(),
        }
    }
}

/// `"32x32"` → `[32, 32]`.
pub fn parse_cells(spec: &str) -> Result<Vec<usize>, String> {
    let cells: Vec<usize> = spec
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("grid `{spec}`: {e}"))?;
    if !(2..=3).contains(&cells.len()) {
        return Err(format!("grid `{spec}` must have 2 or 3 axes"));
    }
    if cells.iter().any(|&n| n < 2) {
        return Err(format!("grid `{spec}` needs at least 2 cells per axis"));
    }
    Ok(cells)
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        path: field.to_string(),
        reason: reason.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    /// Parses a TOML document; unknown keys are rejected with their path.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner().message().trim().to_string())
        })?;
        cfg.normalize()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills derived defaults and checks every constraint.
    pub fn normalize(&mut self) -> Result<(), CliError> {
        let cells = parse_cells(&self.grid).map_err(|e| invalid("grid", e))?;
        if self.domain.is_empty() {
            self.domain = vec![1.0; cells.len()];
        }
        if self.domain.len() != cells.len() {
            return Err(invalid(
                "domain",
                format!("has {} lengths for a {}-axis grid", self.domain.len(), cells.len()),
            ));
        }
        for (a, &l) in self.domain.iter().enumerate() {
            positive(&format!("domain[{a}]"), l)?;
        }
        if self.threads == 0 {
            self.threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        }
        if !(self.params.mu > 0.0 && self.params.mu.is_finite()) {
            return Err(invalid(
                "params.mu",
                format!("viscosity must satisfy mu > 0, got {}", self.params.mu),
            ));
        }
        positive("params.g", self.params.g)?;
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.fixed_point", t.fixed_point),
            ("tolerances.eigen", t.eigen),
            ("tolerances.poisson", t.poisson),
            ("tolerances.solver", t.solver),
            ("tolerances.certificate", t.certificate),
            ("tolerances.max_principle", t.max_principle),
            ("tolerances.dual_audit", t.dual_audit),
            ("tolerances.rate", t.rate),
        ] {
            positive(name, v)?;
        }
        let e = &self.evolution;
        positive("evolution.t_end", e.t_end)?;
        if !(e.dt >= 0.0 && e.dt.is_finite()) {
            return Err(invalid("evolution.dt", "must be nonnegative (0 selects adaptive)"));
        }
        positive("evolution.dt_safety", e.dt_safety)?;
        positive("evolution.amplitude", e.amplitude)?;
        let [w0, w1] = e.fit_window;
        if !(0.0 <= w0 && w0 < w1 && w1 <= 1.0) {
            return Err(invalid("evolution.fit_window", "need 0 <= start < end <= 1"));
        }
        let a = &self.alpha_sweep;
        if !(a.s_min >= 0.0) || !(a.s_max >= 0.0) || a.points < 2 {
            return Err(invalid(
                "alpha_sweep",
                "need s_min, s_max >= 0 and at least 2 points",
            ));
        }
        if a.s_max > 0.0 && a.s_max <= a.s_min {
            return Err(invalid("alpha_sweep.s_max", "must exceed s_min"));
        }
        let x = &self.escape;
        positive("escape.epsilon0", x.epsilon0)?;
        positive("escape.budget_factor", x.budget_factor)?;
        positive("escape.dt_safety", x.dt_safety)?;
        positive("escape.slope_tol", x.slope_tol)?;
        if x.deltas.is_empty() {
            return Err(invalid("escape.deltas", "need at least one amplitude"));
        }
        let s = &self.sharp;
        positive("sharp.dt", s.dt)?;
        positive("sharp.t_end", s.t_end)?;
        positive("sharp.amplitude", s.amplitude)?;
        let st = &self.stability;
        positive("stability.t_end", st.t_end)?;
        positive("stability.dt", st.dt)?;
        if st.amplitudes.is_empty() {
            return Err(invalid("stability.amplitudes", "need at least one amplitude"));
        }
        for (i, &v) in st.amplitudes.iter().enumerate() {
            positive(&format!("stability.amplitudes[{i}]"), v)?;
        }
        if !(st.k_bound >= 0.0) {
            return Err(invalid("stability.k_bound", "must be nonnegative (0 selects 2 max ρ̄)"));
        }
        positive("verify.unstable_mu", self.verify.unstable_mu)?;
        positive("verify.stable_mu", self.verify.stable_mu)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Arc<StaggeredGrid>, CliError> {
        let cells = parse_cells(&self.grid).map_err(|e| invalid("grid", e))?;
        let domain = BoxDomain::new(&self.domain, cells.len() - 1)
            .map_err(|e| invalid("domain", e.to_string()))?;
        let grid = StaggeredGrid::new(domain, &cells).map_err(|e| invalid("grid", e.to_string()))?;
        Ok(Arc::new(grid))
    }
}

/// Builds a config from an optional file and command-line overrides.
///
/// Each override is `key.path=value` with a TOML value; bare words are read
/// as strings. Setting one key to two different values, or giving the
/// command both positionally and in the file with different values, is a
/// conflict.
pub fn assemble(
    command: Command,
    file_text: Option<&str>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<RunConfig, CliError> {
    let mut doc: toml::Table = match file_text {
        Some(t) => t.parse().map_err(|e: toml::de::Error| CliError::Config {
            path: String::new(),
            reason: e.message().to_string(),
        })?,
        None => toml::Table::new(),
    };
    let mut seen: Vec<(String, toml::Value)> = Vec::new();
    let mut apply = |key: &str, value: toml::Value, doc: &mut toml::Table| -> Result<(), CliError> {
        if let Some((_, prev)) = seen.iter().find(|(k, _)| k == key) {
            if *prev != value {
                return Err(CliError::Conflict(format!(
                    "`{key}` given as {prev} and {value}"
                )));
            }
        }
        seen.push((key.to_string(), value.clone()));
        set_path(doc, key, value)
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
        apply(k.trim(), parse_value(v.trim()), &mut doc)?;
    }
    if let Some(seed) = seed {
        apply("seed", toml::Value::Integer(seed as i64), &mut doc)?;
    }
    if let Some(out) = out {
        apply("out", toml::Value::String(out.display().to_string()), &mut doc)?;
    }
    let name = toml::Value::String(command.name().into());
    match doc.get("command") {
        Some(v) if *v != name => {
            return Err(CliError::Conflict(format!(
                "command `{}` on the command line but {v} in the config",
                command.name()
            )))
        }
        _ => {
            doc.insert("command".into(), name);
        }
    }
    RunConfig::parse(&toml::to_string(&doc).expect("table serializes"))
}

fn parse_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for (i, p) in parts.iter().enumerate() {
        if p.is_empty() {
            return Err(CliError::Usage(format!("empty segment in key `{key}`")));
        }
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config {
            path: parts[..=i].join("."),
            reason: "is not a table".into(),
        })?;
    }
    unreachable!()
}
