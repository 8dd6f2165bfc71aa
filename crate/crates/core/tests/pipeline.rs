use std::f64::consts::PI;

use proptest::prelude::*;

use respec::capacity::{capacity_asymptotic, capacity_fem_2d, default_grading};
use respec::geometry::{build_domain, OuterSpec, ResonatorSpec};
use respec::harness::{localization, solve_domain, SolveConfig};
use respec::mesh::{triangulate, validate, GradingSpec, MeshOptions};
use respec::model::Label;
use respec::numerics::{apply_dirichlet, assemble, smallest_eigenpairs};

fn unit_with(r: ResonatorSpec) -> respec::geometry::DomainInstance {
    build_domain(OuterSpec::unit_square(), vec![r]).unwrap()
}

#[test]
fn sealed_resonator_carries_a_zero_mode() {
    let domain = unit_with(ResonatorSpec::new([0.5, 0.5], 0.25, 0.3, 1e-3));
    let options = MeshOptions { seal_windows: true, ..MeshOptions::default() };
    let s = solve_domain(&domain, &SolveConfig::default(), 2, &options).unwrap();
    assert!(s.spectrum.eigenvalues[0].abs() < 1e-8, "{:?}", s.spectrum.eigenvalues);
    let loc = localization(&s.spectrum, &s.mesh, &domain, &s.dofs).unwrap();
    assert!(loc.pairs[0].resonator_fractions[0] > 1.0 - 1e-8);
    // the exterior mode does not enter the sealed box
    assert!(loc.pairs[1].resonator_fractions[0] < 1e-8);
    assert!(s.mesh.euler_characteristic() == 1);
}

#[test]
fn opening_the_window_lifts_the_zero_mode() {
    let domain = unit_with(ResonatorSpec::new([0.5, 0.5], 0.25, 0.3, 1e-3));
    let s = solve_domain(&domain, &SolveConfig::default(), 1, &MeshOptions::default()).unwrap();
    let l = s.spectrum.eigenvalues[0];
    assert!(l > 1.0 && l < 2.0 * PI * PI, "{l}");
}

#[test]
fn fem_capacity_approaches_the_asymptotic_law_for_small_windows() {
    let ell = 0.3;
    let ratio = |d: f64| {
        let a = ell * d;
        let fem = capacity_fem_2d(a, &default_grading(a)).unwrap().value;
        fem / capacity_asymptotic(2, d, 0.0).unwrap().value
    };
    let r: Vec<f64> = [1e-3, 1e-6, 1e-9].iter().map(|&d| ratio(d)).collect();
    assert!(r.windows(2).all(|w| (w[1] - 1.0).abs() < (w[0] - 1.0).abs()), "{r:?}");
    assert!((r[1] - 1.0).abs() < 0.15 && (r[2] - 1.0).abs() < 0.15, "{r:?}");
}

#[test]
fn spectrum_invariants_on_a_graded_mesh() {
    let domain = unit_with(ResonatorSpec::new([0.4, 0.6], 0.3, 0.3, 1e-2));
    let tol = 1e-7;
    let mesh = triangulate(&domain, &SolveConfig::default().grading(&domain)).unwrap();
    let (k, m) = assemble(&mesh).unwrap();
    let (k, m, _) = apply_dirichlet(&k, &m, &mesh).unwrap();
    let s = smallest_eigenpairs(&k, &m, 4, tol).unwrap();
    assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    assert!(s.meets(tol));
    let v = s.eigenvectors.as_ref().unwrap();
    for i in 0..v.len() {
        let mv = m.mul(&v[i]);
        for (j, vj) in v.iter().enumerate() {
            let g: f64 = mv.iter().zip(vj).map(|(a, b)| a * b).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((g - expect).abs() <= 10.0 * tol, "gram[{i}][{j}] = {g}");
        }
        // Rayleigh quotient reproduces the eigenvalue
        let kv = k.mul(&v[i]);
        let q: f64 = kv.iter().zip(&v[i]).map(|(a, b)| a * b).sum();
        assert!((q - s.eigenvalues[i]).abs() <= 1e-8 * s.eigenvalues[i]);
    }
}

#[test]
fn two_resonators_two_localized_modes() {
    let rs = vec![
        ResonatorSpec::new([0.3, 0.6], 0.2, 0.3, (-1.0f64 / (8.0 / PI * 0.04)).exp()),
        ResonatorSpec::new([0.7, 0.6], 0.2, 0.3, (-1.0f64 / (14.0 / PI * 0.04)).exp()),
    ];
    let domain = build_domain(OuterSpec::unit_square(), rs).unwrap();
    let s = solve_domain(&domain, &SolveConfig::default(), 3, &MeshOptions::default()).unwrap();
    let loc = localization(&s.spectrum, &s.mesh, &domain, &s.dofs).unwrap();
    assert_eq!(loc.pairs[0].label, Label::Resonator(0));
    assert_eq!(loc.pairs[1].label, Label::Resonator(1));
    assert_eq!(loc.pairs[2].label, Label::Bulk);
    for p in &loc.pairs {
        let total: f64 = p.resonator_fractions.iter().sum::<f64>() + p.outside_fraction;
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn rectangle_eigenvalues_converge_under_refinement() {
    let domain = build_domain(OuterSpec::Rectangle { width: 2.0, height: 1.0 }, Vec::new()).unwrap();
    let exact = PI * PI * 1.25;
    let err: Vec<f64> = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]
        .iter()
        .map(|&h| {
            let cfg = SolveConfig { base_h: h, eig_tol: 1e-9, ..SolveConfig::default() };
            let s = solve_domain(&domain, &cfg, 1, &MeshOptions::default()).unwrap();
            s.spectrum.eigenvalues[0] - exact
        })
        .collect();
    // P1 eigenvalues approximate from above at second order
    assert!(err.iter().all(|e| *e > 0.0));
    for w in err.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((1.7..2.3).contains(&order), "{order}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn random_resonators_mesh_validly(
        cx in 0.3f64..0.7, cy in 0.4f64..0.8, eps in 0.1f64..0.3, ell in 0.1f64..0.45, logd in -8.0f64..-2.5
    ) {
        let d = 10f64.powf(logd).min(0.5 * eps);
        let domain = unit_with(ResonatorSpec::new([cx, cy], eps, ell, d));
        let grading = GradingSpec::for_domain(&domain, 1.0 / 16.0);
        let mesh = triangulate(&domain, &grading).unwrap();
        let report = validate(&mesh);
        prop_assert!(report.is_valid(), "{:?}", report.violations);
        prop_assert_eq!(mesh.euler_characteristic(), 0);
        prop_assert!(mesh.h_min <= ell * d / 4.0);
    }
}
