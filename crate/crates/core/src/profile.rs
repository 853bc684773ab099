//! Steady density profiles `ρ̄(x₃)` and their classification.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::StaggeredGrid;
use crate::ops;

/// Number of vertical samples used to classify a profile and bound it.
const CLASSIFY_SAMPLES: usize = 4097;

/// Relative floor below which `ρ̄'` is treated as zero when deciding whether
/// a profile is uniformly unstable or stable.
pub const CLASSIFY_REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// `inf ρ̄' > 0`.
    UniformlyUnstable,
    /// `ρ̄' > 0` somewhere, but not uniformly.
    RtUnstable,
    /// `sup ρ̄' < 0`.
    Stable,
    Indeterminate,
}

impl Classification {
    pub fn is_unstable(self) -> bool {
        matches!(self, Self::UniformlyUnstable | Self::RtUnstable)
    }
}

/// Shape-preserving (Fritsch-Carlson) cubic Hermite interpolant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCubic {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::InvalidProfile(
                "tabulated profile needs at least two (z, rho) pairs".into(),
            ));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidProfile(
                "tabulated heights must be strictly increasing".into(),
            ));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProfile("tabulated values must be finite".into()));
        }
        let n = x.len();
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            m[i] = if d[i - 1] * d[i] <= 0.0 {
                0.0
            } else {
                // Weighted harmonic mean (Fritsch-Butland form).
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                (w1 + w2) / (w1 / d[i - 1] + w2 / d[i])
            };
        }
        for i in 0..n - 1 {
            if d[i] == 0.0 {
                m[i] = 0.0;
                m[i + 1] = 0.0;
                continue;
            }
            let a = m[i] / d[i];
            let b = m[i + 1] / d[i];
            let s = a * a + b * b;
            if s > 9.0 {
                let t = 3.0 / s.sqrt();
                m[i] = t * a * d[i];
                m[i + 1] = t * b * d[i];
            }
        }
        Ok(Self { x, y, slopes: m })
    }

    fn segment(&self, z: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&xi| xi <= z) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    /// Value, first and second derivative at `z` (clamped to the table).
    pub fn eval(&self, z: f64) -> (f64, f64, f64) {
        let z = z.clamp(self.x[0], self.x[self.x.len() - 1]);
        let i = self.segment(z);
        let h = self.x[i + 1] - self.x[i];
        let t = (z - self.x[i]) / h;
        let (y0, y1, m0, m1) = (self.y[i], self.y[i + 1], self.slopes[i], self.slopes[i + 1]);
        let h00 = 2.0 * t.powi(3) - 3.0 * t * t + 1.0;
        let h10 = t.powi(3) - 2.0 * t * t + t;
        let h01 = -2.0 * t.powi(3) + 3.0 * t * t;
        let h11 = t.powi(3) - t * t;
        let v = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1;
        let d00 = 6.0 * t * t - 6.0 * t;
        let d10 = 3.0 * t * t - 4.0 * t + 1.0;
        let d01 = -6.0 * t * t + 6.0 * t;
        let d11 = 3.0 * t * t - 2.0 * t;
        let dv = (d00 * y0 + d01 * y1) / h + d10 * m0 + d11 * m1;
        let s00 = 12.0 * t - 6.0;
        let s10 = 6.0 * t - 4.0;
        let s01 = -12.0 * t + 6.0;
        let s11 = 6.0 * t - 2.0;
        let d2v = (s00 * y0 + s01 * y1) / (h * h) + (s10 * m0 + s11 * m1) / h;
        (v, dv, d2v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityProfile {
    /// `a + b x₃`
    Linear { a: f64, b: f64 },
    /// `a e^{b x₃}`
    Exponential { a: f64, b: f64 },
    /// `a + b tanh((x₃ - c) / w)`
    Tanh { a: f64, b: f64, c: f64, w: f64 },
    Tabulated {
        source: String,
        table: MonotoneCubic,
    },
}

impl DensityProfile {
    pub fn linear(a: f64, b: f64) -> Self {
        Self::Linear { a, b }
    }

    pub fn exponential(a: f64, b: f64) -> Self {
        Self::Exponential { a, b }
    }

    pub fn tanh(a: f64, b: f64, c: f64, w: f64) -> Result<Self> {
        if !(w > 0.0) {
            return Err(Error::InvalidProfile(format!(
                "tanh width must be positive, got {w}"
            )));
        }
        Ok(Self::Tanh { a, b, c, w })
    }

    pub fn tabulated(source: impl Into<String>, z: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        Ok(Self::Tabulated {
            source: source.into(),
            table: MonotoneCubic::new(z, rho)?,
        })
    }

    /// `(ρ̄, ρ̄', ρ̄'')` at height `z`.
    pub fn eval(&self, z: f64) -> (f64, f64, f64) {
        match self {
            Self::Linear { a, b } => (a + b * z, *b, 0.0),
            Self::Exponential { a, b } => {
                let e = a * (b * z).exp();
                (e, b * e, b * b * e)
            }
            Self::Tanh { a, b, c, w } => {
                let t = ((z - c) / w).tanh();
                let s2 = 1.0 - t * t;
                (a + b * t, b * s2 / w, -2.0 * b * s2 * t / (w * w))
            }
            Self::Tabulated { table, .. } => table.eval(z),
        }
    }

    pub fn rho(&self, z: f64) -> f64 {
        self.eval(z).0
    }

    pub fn drho(&self, z: f64) -> f64 {
        self.eval(z).1
    }

    pub fn d2rho(&self, z: f64) -> f64 {
        self.eval(z).2
    }

    /// True when the profile's second derivative vanishes identically.
    pub fn has_constant_gradient(&self) -> bool {
        matches!(self, Self::Linear { .. })
    }

    fn samples(height: f64) -> impl Iterator<Item = f64> {
        (0..CLASSIFY_SAMPLES).map(move |i| height * i as f64 / (CLASSIFY_SAMPLES - 1) as f64)
    }

    /// `(inf ρ̄, sup ρ̄, inf ρ̄', sup ρ̄', sup ρ̄'/ρ̄)` over `[0, height]`.
    pub fn bounds(&self, height: f64) -> ProfileBounds {
        let mut b = ProfileBounds {
            rho_min: f64::INFINITY,
            rho_max: f64::NEG_INFINITY,
            drho_min: f64::INFINITY,
            drho_max: f64::NEG_INFINITY,
            ratio_max: f64::NEG_INFINITY,
        };
        for z in Self::samples(height) {
            let (r, d, _) = self.eval(z);
            b.rho_min = b.rho_min.min(r);
            b.rho_max = b.rho_max.max(r);
            b.drho_min = b.drho_min.min(d);
            b.drho_max = b.drho_max.max(d);
            b.ratio_max = b.ratio_max.max(d / r);
        }
        b
    }

    /// Checks `inf ρ̄ > 0` on `[0, height]`.
    pub fn validate(&self, height: f64) -> Result<ProfileBounds> {
        let b = self.bounds(height);
        if !(b.rho_min > 0.0) || !b.rho_max.is_finite() {
            return Err(Error::InvalidProfile(format!(
                "density must stay positive on the domain (inf = {})",
                b.rho_min
            )));
        }
        Ok(b)
    }

    pub fn classify(&self, height: f64) -> Classification {
        let b = self.bounds(height);
        let scale = b.drho_min.abs().max(b.drho_max.abs());
        if scale == 0.0 {
            return Classification::Indeterminate;
        }
        let floor = CLASSIFY_REL_FLOOR * scale;
        if b.drho_min > floor {
            Classification::UniformlyUnstable
        } else if b.drho_max > 0.0 {
            Classification::RtUnstable
        } else if b.drho_max < -floor {
            Classification::Stable
        } else {
            Classification::Indeterminate
        }
    }

    /// Short human-readable label such as `linear(1, 1)`.
    pub fn label(&self) -> String {
        match self {
            Self::Linear { a, b } => format!("linear({a}, {b})"),
            Self::Exponential { a, b } => format!("exponential({a}, {b})"),
            Self::Tanh { a, b, c, w } => format!("tanh({a}, {b}, {c}, {w})"),
            Self::Tabulated { source, .. } => format!("tabulated({source})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileBounds {
    pub rho_min: f64,
    pub rho_max: f64,
    pub drho_min: f64,
    pub drho_max: f64,
    pub ratio_max: f64,
}

/// Viscosity and gravitational acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub mu: f64,
    pub g: f64,
}

impl PhysicalParams {
    pub fn new(mu: f64, g: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "mu",
                reason: format!("viscosity must satisfy mu > 0, got {mu}"),
            });
        }
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "g",
                reason: format!("gravity must satisfy g > 0, got {g}"),
            });
        }
        Ok(Self { mu, g })
    }
}

/// A profile sampled on a grid: the coefficients every discrete operator uses.
#[derive(Debug, Clone)]
pub struct Background {
    pub grid: Arc<StaggeredGrid>,
    pub profile: DensityProfile,
    pub classification: Classification,
    /// `ρ̄` at cell centers.
    pub rho: ScalarField,
    /// `ρ̄'` at cell centers.
    pub drho: ScalarField,
    /// `ρ̄` averaged onto faces (the mass-matrix diagonal).
    pub face_rho: Vec<f64>,
    pub bounds: ProfileBounds,
}

impl Background {
    pub fn new(grid: &Arc<StaggeredGrid>, profile: &DensityProfile) -> Result<Self> {
        let g = grid.gravity_axis();
        let height = grid.domain.lengths[g];
        let bounds = profile.validate(height)?;
        let rho = ScalarField::from_fn(grid, |x| profile.rho(x[g]));
        let drho = ScalarField::from_fn(grid, |x| profile.drho(x[g]));
        let face_rho = ops::face_weights(&rho);
        Ok(Self {
            grid: grid.clone(),
            profile: profile.clone(),
            classification: profile.classify(height),
            rho,
            drho,
            face_rho,
            bounds,
        })
    }

    /// `g · max(0, max_cells ρ̄'/ρ̄)`: the discrete upper bound on `α(s)`.
    /// Horizontal flow carries mass but no buoyancy, so the bound cannot drop
    /// below zero.
    pub fn alpha_upper_bound(&self, g: f64) -> f64 {
        let m = self
            .rho
            .values
            .iter()
            .zip(&self.drho.values)
            .map(|(r, d)| d / r)
            .fold(0.0, f64::max);
        g * m
    }

    pub fn rho_mean(&self) -> f64 {
        self.rho.mean()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_examples() {
        assert_eq!(
            DensityProfile::linear(1.0, 1.0).classify(1.0),
            Classification::UniformlyUnstable
        );
        assert_eq!(DensityProfile::linear(2.0, -1.0).classify(1.0), Classification::Stable);
        assert_eq!(
            DensityProfile::linear(2.0, 0.0).classify(1.0),
            Classification::Indeterminate
        );
        let band = DensityProfile::tanh(1.0, 0.2, 0.5, 0.05).unwrap();
        assert_eq!(band.classify(1.0), Classification::RtUnstable);
        assert_eq!(
            DensityProfile::exponential(1.0, 1.0).classify(1.0),
            Classification::UniformlyUnstable
        );
    }

    #[test]
    fn validate_rejects_nonpositive_density() {
        assert!(DensityProfile::linear(0.5, -1.0).validate(1.0).is_err());
        assert!(DensityProfile::linear(1.5, -1.0).validate(1.0).is_ok());
    }

    #[test]
    fn analytic_derivatives() {
        let p = DensityProfile::tanh(1.0, 0.3, 0.4, 0.2).unwrap();
        let h = 1e-5;
        for z in [0.1, 0.4, 0.77] {
            let fd = (p.rho(z + h) - p.rho(z - h)) / (2.0 * h);
            assert!((fd - p.drho(z)).abs() < 1e-8);
            let fd2 = (p.drho(z + h) - p.drho(z - h)) / (2.0 * h);
            assert!((fd2 - p.d2rho(z)).abs() < 1e-6);
        }
    }

    #[test]
    fn monotone_cubic_preserves_monotonicity_and_data() {
        let z = vec![0.0, 0.2, 0.3, 0.7, 1.0];
        let r = vec![1.0, 1.1, 1.8, 1.85, 2.0];
        let p = DensityProfile::tabulated("t", z.clone(), r.clone()).unwrap();
        for (zi, ri) in z.iter().zip(&r) {
            assert!((p.rho(*zi) - ri).abs() < 1e-14);
        }
        let mut prev = p.rho(0.0);
        for i in 1..=1000 {
            let v = p.rho(i as f64 / 1000.0);
            assert!(v >= prev - 1e-14);
            prev = v;
            assert!(p.drho(i as f64 / 1000.0) >= -1e-12);
        }
        // Interpolant of linear data is exact, derivative included.
        let lin = DensityProfile::tabulated("l", vec![0.0, 0.5, 1.0], vec![1.0, 1.5, 2.0]).unwrap();
        assert!((lin.drho(0.37) - 1.0).abs() < 1e-12);
        assert!(DensityProfile::tabulated("bad", vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(PhysicalParams::new(0.1, 1.0).is_ok());
        let e = PhysicalParams::new(-0.1, 1.0).unwrap_err();
        assert!(e.to_string().contains("mu > 0"));
        assert!(PhysicalParams::new(0.1, 0.0).is_err());
    }

    #[test]
    fn background_upper_bound_below_continuous_sup() {
        let grid = Arc::new(StaggeredGrid::unit_square(8).unwrap());
        let p = DensityProfile::exponential(1.0, 2.0);
        let bg = Background::new(&grid, &p).unwrap();
        assert!(bg.alpha_upper_bound(1.0) <= 2.0 + 1e-12);
        assert_eq!(bg.classification, Classification::UniformlyUnstable);
    }
}
