mod common;

use std::sync::Arc;

use common::{default_params, spectrum, sym, unit_grid, DenseProblem};
use proptest::prelude::*;
use rtspectra::projection::relative_divergence;
use rtspectra::spectra::{
    bump_certificate, energy_e, energy_en, s_upper_bracket, EigenOptions, Spectra,
};
use rtspectra::{ops, BoxDomain, DensityProfile, Error, PhysicalParams, ScalarField, StaggeredGrid, VectorField};

fn spectra(n: usize, p: &DensityProfile) -> Spectra {
    Spectra::new(&unit_grid(n), p, default_params(), EigenOptions::default()).unwrap()
}

fn linear() -> DensityProfile {
    DensityProfile::linear(1.0, 1.0)
}

#[test]
fn alpha_matches_dense_pencil_at_twenty_shifts() {
    let g = unit_grid(8);
    let p = linear();
    let sp = spectra(8, &p);
    let dense = DenseProblem::new(&g, &p, default_params());
    let mut warm = None;
    for i in 0..20 {
        let s = 0.1 * i as f64;
        let (a, sol) = sp.alpha(s, warm.as_ref()).unwrap();
        let d = dense.alpha(s);
        assert!((a - d).abs() <= 1e-8, "s={s}: {a} vs {d}");
        warm = Some(sol.velocity);
    }
}

#[test]
fn alpha_matches_dense_pencil_in_3d() {
    let g = Arc::new(
        StaggeredGrid::new(BoxDomain::new(&[1.0, 1.0, 1.0], 2).unwrap(), &[4, 4, 5]).unwrap(),
    );
    let p = DensityProfile::exponential(1.0, 0.7);
    let sp = Spectra::new(&g, &p, default_params(), EigenOptions::default()).unwrap();
    let dense = DenseProblem::new(&g, &p, default_params());
    for s in [0.0, 0.3, 1.0] {
        let (a, _) = sp.alpha(s, None).unwrap();
        assert!((a - dense.alpha(s)).abs() <= 1e-8);
    }
}

#[test]
fn constant_profile_gives_scaled_stokes_eigenvalue() {
    let g = unit_grid(8);
    let c = 1.7;
    let p = DensityProfile::linear(c, 0.0);
    let sp = spectra(8, &p);
    let dense = DenseProblem::new(&g, &p, default_params());
    let qt = dense.q.transpose();
    let stokes = spectrum(&sym(&qt * &dense.laplacian * &dense.q));
    let lambda1 = -stokes[0];
    for s in [0.25, 1.0, 4.0] {
        let (a, _) = sp.alpha(s, None).unwrap();
        let expect = -(s * 0.1 / c) * lambda1;
        assert!((a - expect).abs() <= 1e-8 * expect.abs().max(1.0), "{a} vs {expect}");
    }
}

#[test]
fn maximizer_is_normalized_projected_and_consistent() {
    let sp = spectra(16, &linear());
    for s in [0.0, 0.1, 0.5] {
        let (a, sol) = sp.alpha(s, None).unwrap();
        let e = sp.energy(&sol.velocity).unwrap();
        assert!((e.mass - 1.0).abs() <= 1e-10);
        assert!((e.value(s) / e.mass - a).abs() <= 1e-10 * a.abs().max(1e-3));
        assert!(relative_divergence(&sol.velocity) <= 1e-10);
        assert!(sol.residual_norm <= 1e-10);
        assert!(sol.pressure.mean().abs() <= 1e-12);
        // Sign convention: dominant vertical entry positive.
        let vert = sol.velocity.vertical();
        let big = vert.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(big > 0.0);
    }
}

#[test]
fn alpha_bounded_above_by_gravity_ratio() {
    let profiles = [
        linear(),
        DensityProfile::exponential(1.0, 1.5),
        DensityProfile::tanh(1.0, 0.3, 0.5, 0.1).unwrap(),
        DensityProfile::linear(2.0, -1.0),
    ];
    for p in &profiles {
        let sp = spectra(12, p);
        let bound = sp.background.alpha_upper_bound(1.0);
        for s in [0.0, 0.05, 0.4] {
            let (a, _) = sp.alpha(s, None).unwrap();
            assert!(a <= bound + 1e-10, "{} s={s}: {a} > {bound}", p.label());
        }
    }
}

#[test]
fn stable_profile_alpha_nonpositive() {
    let sp = spectra(12, &DensityProfile::linear(2.0, -1.0));
    for s in [0.0, 0.2, 1.0] {
        let (a, _) = sp.alpha(s, None).unwrap();
        assert!(a <= 0.0);
    }
}

#[test]
fn bump_lower_bound_holds() {
    for p in [linear(), DensityProfile::tanh(1.0, 0.3, 0.4, 0.1).unwrap()] {
        let sp = spectra(16, &p);
        let b = sp.bump_certificate().unwrap();
        assert!(b.c3 > 0.0);
        for s in [0.0, 0.01, 0.05, 0.2] {
            let (a, _) = sp.alpha(s, None).unwrap();
            assert!(a >= b.c3 - b.c4 * s - 1e-12, "s={s}: {a} < {}", b.c3 - b.c4 * s);
        }
    }
}

#[test]
fn bump_is_divergence_free_on_linear_profile() {
    let g = unit_grid(16);
    let b = bump_certificate(&linear(), default_params(), &g).unwrap();
    assert!(b.c3 > 0.0);
    let div = ops::discrete_divergence(&b.field);
    assert!(div.norm() <= 1e-10 * b.field.norm());
    assert_eq!(b.field.boundary_normal_max(), 0.0);

    let g3 = Arc::new(
        StaggeredGrid::new(BoxDomain::new(&[1.0, 1.0, 1.0], 2).unwrap(), &[8, 8, 8]).unwrap(),
    );
    let b3 = bump_certificate(&linear(), default_params(), &g3).unwrap();
    assert!(b3.c3 > 0.0);
    assert!(ops::discrete_divergence(&b3.field).norm() <= 1e-10 * b3.field.norm());
}

#[test]
fn bump_rejects_stable_profile() {
    let g = unit_grid(16);
    let e = bump_certificate(&DensityProfile::linear(2.0, -1.0), default_params(), &g).unwrap_err();
    assert_eq!(e, Error::NoUnstableRegion);
    assert!(e.to_string().contains("no positive ρ̄′ region"));
}

#[test]
fn bump_follows_translated_layer() {
    let g = unit_grid(16);
    let lo = DensityProfile::tanh(1.0, 0.2, 0.375, 0.05).unwrap();
    let hi = DensityProfile::tanh(1.0, 0.2, 0.625, 0.05).unwrap();
    let a = bump_certificate(&lo, default_params(), &g).unwrap();
    let b = bump_certificate(&hi, default_params(), &g).unwrap();
    assert!((b.center[1] - a.center[1] - 0.25).abs() < 1e-12);
    assert!((a.c3 - b.c3).abs() <= 1e-8 * a.c3);
    assert!((a.c4 - b.c4).abs() <= 1e-8 * a.c4);
}

/// Composite three-point Gauss rule on `[0, 1]`.
fn gauss(f: impl Fn(f64) -> f64, intervals: usize) -> f64 {
    let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let h = 1.0 / intervals as f64;
    let mut acc = 0.0;
    for i in 0..intervals {
        let c = (i as f64 + 0.5) * h;
        for (x, w) in nodes.iter().zip(weights) {
            acc += w * f(c + 0.5 * h * x) * 0.5 * h;
        }
    }
    acc
}

#[test]
fn bump_energy_matches_quadrature_oracle() {
    // Continuous integrals of ψ = F(x)F(z), F = (1 - (2x-1)²)³, v = (ψ_z, -ψ_x),
    // with ρ̄ = 1 + z and g = 1; quadrature on a grid four times finer than
    // the finest discrete grid.
    let f = |x: f64| {
        let t = 2.0 * x - 1.0;
        (1.0 - t * t).powi(3)
    };
    let f1 = |x: f64| {
        let t = 2.0 * x - 1.0;
        2.0 * (-6.0 * t * (1.0 - t * t).powi(2))
    };
    let f2 = |x: f64| {
        let t = 2.0 * x - 1.0;
        4.0 * (-6.0 * (1.0 - t * t).powi(2) + 24.0 * t * t * (1.0 - t * t))
    };
    let q = 4 * 512;
    let a0 = gauss(|x| f(x).powi(2), q);
    let a1 = gauss(|x| f1(x).powi(2), q);
    let a2 = gauss(|x| f2(x).powi(2), q);
    let mu = default_params().mu;
    let buoyancy = a1 * a0;
    let mass = 3.0 * a0 * a1;
    let dissipation = mu * (2.0 * a1 * a1 + 2.0 * a0 * a2);

    let discrete = |n: usize| {
        let g = unit_grid(n);
        let b = bump_certificate(&linear(), default_params(), &g).unwrap();
        assert_eq!(b.radius, vec![0.5, 0.5]);
        energy_e(&b.field, 0.0, &linear(), default_params()).unwrap().1
    };
    // The wall closure adds an h³ term to the h² error, so three grids are
    // combined to remove both.
    let e: Vec<_> = [128, 256, 512].into_iter().map(discrete).collect();
    let rich = |a: f64, b: f64, c: f64| {
        let r1 = (4.0 * b - a) / 3.0;
        let r2 = (4.0 * c - b) / 3.0;
        (8.0 * r2 - r1) / 7.0
    };
    for (name, got, want) in [
        ("buoyancy", rich(e[0].buoyancy, e[1].buoyancy, e[2].buoyancy), buoyancy),
        ("mass", rich(e[0].mass, e[1].mass, e[2].mass), mass),
        ("dissipation", rich(e[0].dissipation, e[1].dissipation, e[2].dissipation), dissipation),
    ] {
        assert!((got - want).abs() <= 1e-6 * want, "{name}: {got} vs {want}");
    }
}

#[test]
fn energy_examples() {
    let g = unit_grid(12);
    let zero = VectorField::zeros(&g);
    let (val, e) = energy_e(&zero, 0.3, &linear(), default_params()).unwrap();
    assert_eq!((val, e.buoyancy, e.dissipation, e.mass), (0.0, 0.0, 0.0, 0.0));

    let bump = bump_certificate(&linear(), default_params(), &g).unwrap().field;
    let stable = DensityProfile::linear(2.0, -1.0);
    for s in [0.0, 0.5, 2.0] {
        let (val, _) = energy_e(&bump, s, &stable, default_params()).unwrap();
        assert!(val <= 0.0);
    }

    let raw = VectorField::from_fn(&g, |a, x| if a == 0 { x[0] } else { 0.0 });
    assert!(matches!(
        energy_e(&raw, 0.0, &linear(), default_params()),
        Err(Error::NotDivergenceFree(_))
    ));
}

#[test]
fn s_upper_bracket_cases() {
    let g = unit_grid(8);
    let params = default_params();
    let stable = s_upper_bracket(&g, &DensityProfile::linear(2.0, -1.0), params).unwrap();
    assert_eq!(stable.s_upper, 0.0);

    let flat = DensityProfile::linear(1.0, 0.0);
    let b = s_upper_bracket(&g, &flat, params).unwrap();
    let (a, _) = spectra(8, &flat).alpha(b.s_upper, None).unwrap();
    assert!(a <= 1e-12);

    let sp = spectra(8, &linear());
    let b = sp.s_upper_bracket().unwrap();
    let (a_hi, _) = sp.alpha(b.s_upper, None).unwrap();
    let (a_lo, _) = sp.alpha(b.s_upper / 2.0, None).unwrap();
    assert!(a_hi <= 0.0);
    assert!(a_lo > 0.0);
    assert!(b.s_upper <= b.c5 / params.mu * (1.0 + 1e-12));
}

#[test]
fn dual_pencil_matches_dense_and_eliminates() {
    for p in [linear(), DensityProfile::exponential(1.0, 1.0)] {
        let g = unit_grid(8);
        let sp = spectra(8, &p);
        let (lam, sol) = sp.lambda_n(None).unwrap();
        let dense = DenseProblem::new(&g, &p, default_params());
        assert!(lam > 0.0);
        assert!((lam - dense.lambda_n()).abs() <= 1e-8, "{lam} vs {}", dense.lambda_n());
        assert!(sol.elimination_gap.unwrap() <= 1e-6);
        let (_, j) = sp.energy_n(&sol.density_mode, &sol.velocity).unwrap();
        assert!((j - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn dual_requires_uniform_instability() {
    let sp = spectra(8, &DensityProfile::tanh(1.0, 0.2, 0.5, 0.05).unwrap());
    assert!(matches!(sp.lambda_n(None), Err(Error::Precondition(_))));
}

#[test]
fn dual_energy_examples() {
    let g = unit_grid(16);
    let p = linear();
    let zero_r = ScalarField::zeros(&g);
    let zero_v = VectorField::zeros(&g);
    assert_eq!(energy_en(&zero_r, &zero_v, &p, default_params()).unwrap(), (0.0, 0.0));

    // ρ̃ = -v₃ on a smooth field: E_N = 2‖v₃‖² - (μ/g)‖∇v‖² > 0.
    let params = PhysicalParams::new(0.01, 1.0).unwrap();
    let v = bump_certificate(&p, params, &g).unwrap().field;
    let mut r = ops::vertical_to_cells(&g, &v);
    r.scale(-1.0);
    let (e, j) = energy_en(&r, &v, &p, params).unwrap();
    let expect = 2.0 * r.norm().powi(2) - 0.01 * ops::h1_seminorm_sq(&v);
    assert!((e - expect).abs() <= 1e-12 * expect.abs());
    assert!(e > 0.0 && j > 0.0);

    let t = 2.5;
    let (e2, j2) = energy_en(&r.scaled(t), &v.scaled(t), &p, params).unwrap();
    assert!((e2 - t * t * e).abs() <= 1e-12 * e.abs());
    assert!((j2 - t * t * j).abs() <= 1e-12 * j);
}

#[test]
fn alpha_curve_certificates_and_csv() {
    let sp = spectra(16, &linear());
    let s: Vec<f64> = (0..12).map(|i| 0.02 * i as f64).collect();
    let curve = sp.alpha_curve(&s, 3).unwrap();
    assert_eq!(curve.samples.len(), 12);
    assert!(curve.is_nonincreasing());
    assert!(curve.lipschitz_holds());
    assert!(curve.lower_bound_holds());
    assert!(curve.upper_bound_holds());
    let csv = curve.to_csv();
    assert!(csv.starts_with("s,alpha,residual,c3_minus_c4s,upper_bound\n"));
    assert_eq!(csv.lines().count(), 13);
    let json = serde_json::to_string(&curve).unwrap();
    let back: rtspectra::spectra::AlphaCurve = serde_json::from_str(&json).unwrap();
    assert_eq!(back, curve);
}

#[test]
fn alpha_is_deterministic() {
    let sp = spectra(12, &linear());
    let (a, s1) = sp.alpha(0.1, None).unwrap();
    let (b, s2) = sp.alpha(0.1, None).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(s1.velocity.data, s2.velocity.data);
}

#[test]
fn negative_shift_rejected() {
    assert!(matches!(
        spectra(8, &linear()).alpha(-0.1, None),
        Err(Error::InvalidParameter { name: "s", .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alpha_monotone_and_lipschitz(s1 in 0.0f64..1.0, ds in 0.0f64..1.0) {
        let sp = spectra(8, &linear());
        let s2 = s1 + ds;
        let (a1, v1) = sp.alpha(s1, None).unwrap();
        let (a2, _) = sp.alpha(s2, None).unwrap();
        let e1 = sp.energy(&v1.velocity).unwrap();
        prop_assert!(a2 <= a1 + 1e-10);
        prop_assert!(a1 - a2 <= ds * e1.dissipation / e1.mass + 1e-10);
    }

    #[test]
    fn energy_is_quadratic_and_affine(t in -3.0f64..3.0, s in 0.0f64..2.0) {
        let g = unit_grid(12);
        let v = bump_certificate(&linear(), default_params(), &g).unwrap().field;
        let (val, e) = energy_e(&v, s, &linear(), default_params()).unwrap();
        let (val_t, e_t) = energy_e(&v.scaled(t), s, &linear(), default_params()).unwrap();
        prop_assert!((e_t.mass - t * t * e.mass).abs() <= 1e-12 * e.mass.max(1e-300) * (1.0 + t * t));
        prop_assert!((val_t - t * t * val).abs() <= 1e-12 * (e.buoyancy + s * e.dissipation) * (1.0 + t * t));
        prop_assert!(e.dissipation >= 0.0);
        prop_assert!(e.value(s + 0.1) <= e.value(s));
    }
}
