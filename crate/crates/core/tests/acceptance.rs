//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits with a failure status if any hard criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use respec::capacity::{capacity_fem_2d, default_grading, gamma_eps_for, GammaMethod};
use respec::designer::{design, truncation_shift, DesignOptions, DesignProblem, FemOracle, Placement};
use respec::geometry::{build_domain, window_scale, OuterSpec, ResonatorSpec, ScalingLaw};
use respec::harness::{
    fit_rate, localization, run_convergence, solve_domain, window_monotonicity, ConvergenceRun, SolveConfig,
};
use respec::mesh::MeshOptions;
use respec::model::{hausdorff, hausdorff_values, tilde_hausdorff, Label, SpectrumSet};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn square_resonator(eps: f64, d: f64) -> ResonatorSpec {
    ResonatorSpec::new([0.5, 0.5], eps, 0.3, d)
}

fn fem_benchmark() -> Outcome {
    let exact: Vec<f64> = [2.0, 5.0, 5.0, 8.0, 10.0].iter().map(|v| v * PI * PI).collect();
    let domain = build_domain(OuterSpec::unit_square(), Vec::new()).unwrap();
    let mut errors = Vec::new();
    let mut finest = Vec::new();
    for h in [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0] {
        let cfg = SolveConfig { base_h: h, eig_tol: 1e-9, ..SolveConfig::default() };
        let s = solve_domain(&domain, &cfg, 5, &MeshOptions::default()).unwrap();
        errors.push(s.spectrum.eigenvalues.iter().zip(&exact).map(|(a, b)| (a - b) / b).collect::<Vec<_>>());
        finest = s.spectrum.eigenvalues.clone();
    }
    let within = errors[2].iter().all(|e| e.abs() <= 0.01);
    // least-squares slope of log|err| against log h, per eigenvalue
    let orders: Vec<f64> = (0..5)
        .map(|j| {
            let pts: Vec<(f64, f64)> = [16.0f64, 32.0, 64.0]
                .iter()
                .zip(&errors)
                .map(|(n, e)| ((1.0 / n).ln(), e[j].abs().ln()))
                .collect();
            slope(&pts)
        })
        .collect();
    let ordered = orders.iter().all(|o| (1.7..=2.3).contains(o));
    outcome(
        within && ordered,
        format!(
            "lambda(1/64) = {:?}, max rel err {:.2e}, orders {:?}",
            finest.iter().map(|v| round(*v, 4)).collect::<Vec<_>>(),
            errors[2].iter().fold(0.0f64, |a, e| a.max(e.abs())),
            orders.iter().map(|v| round(*v, 3)).collect::<Vec<_>>()
        ),
    )
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn round(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

fn capacity_law() -> Outcome {
    let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&a| capacity_fem_2d(a, &default_grading(a)).unwrap().value * (2.0 / a).ln() / (2.0 * PI))
        .collect();
    let band = ratios.iter().all(|r| (0.9..=1.1).contains(r));
    let decreasing = ratios.windows(2).all(|w| (w[1] - 1.0).abs() < (w[0] - 1.0).abs());
    outcome(band && decreasing, format!("cap*ln(2/a)/(2pi) = {:?}", ratios.iter().map(|v| round(*v, 5)).collect::<Vec<_>>()))
}

/// Eigenvalue of the pair labelled as the resonator mode.
fn resonator_eigenvalue(eps: f64, d: f64) -> (f64, f64) {
    let domain = build_domain(OuterSpec::unit_square(), vec![square_resonator(eps, d)]).unwrap();
    let s = solve_domain(&domain, &SolveConfig::default(), 2, &MeshOptions::default()).unwrap();
    let loc = localization(&s.spectrum, &s.mesh, &domain, &s.dofs).unwrap();
    let pair = loc.pairs.iter().find(|p| p.label == Label::Resonator(0)).expect("a resonator mode");
    (pair.eigenvalue, pair.resonator_fractions[0])
}

fn resonator_gamma() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for gamma in [2.0, 4.0] {
        // planar law with the limit value `gamma`: d_k = 2 gamma / pi
        let law = ScalingLaw::planar(2.0 * gamma / PI);
        let mut errs = Vec::new();
        for eps in [0.25, 0.2] {
            let d = window_scale(law, eps).unwrap();
            let asymptotic = 2.0 * PI / d.ln().abs() / (4.0 * eps * eps);
            let (lambda, _) = resonator_eigenvalue(eps, d);
            let fem_gamma = gamma_eps_for(&square_resonator(eps, d), GammaMethod::Fem(None)).unwrap();
            errs.push(((lambda - asymptotic) / asymptotic).abs());
            parts.push(format!(
                "gamma {gamma} eps {eps}: lambda {:.4} vs {:.4} (fem gamma {:.4})",
                lambda, asymptotic, fem_gamma
            ));
        }
        pass &= errs[0] <= 0.15 && errs[1] < errs[0];
        parts.push(format!("rel err {:.3} -> {:.3}", errs[0], errs[1]));
    }
    outcome(pass, parts.join("; "))
}

fn convergence_run() -> ConvergenceRun {
    run_convergence(
        &OuterSpec::unit_square(),
        &[square_resonator(0.4, 0.01)],
        &[ScalingLaw::planar(8.0 / PI)],
        &[0.4, 0.3, 0.2, 0.15],
        4,
        60.0,
        &SolveConfig::default(),
    )
    .unwrap()
}

fn convergence(run: &ConvergenceRun) -> Outcome {
    let ok = run.rows.iter().all(|r| r.is_ok());
    let dt: Vec<f64> = run.rows.iter().map(|r| r.dtilde).collect();
    let last = *dt.last().unwrap();
    let pass = ok && last <= 0.10 && run.dtilde_increases() <= 1 && last < dt[0];
    outcome(
        pass,
        format!(
            "dtilde {:?}, final lambda {:?}, limit {:?}",
            dt.iter().map(|v| round(*v, 5)).collect::<Vec<_>>(),
            run.rows.last().unwrap().eigenvalues.iter().map(|v| round(*v, 3)).collect::<Vec<_>>(),
            run.limit.values.iter().map(|v| round(*v, 3)).collect::<Vec<_>>()
        ),
    )
}

fn monotonicity() -> Outcome {
    let grid: Vec<f64> = (0..5).map(|i| 1e-4 * 4f64.powi(i)).collect();
    let report = window_monotonicity(
        &OuterSpec::unit_square(),
        &square_resonator(0.25, grid[0]),
        &grid,
        3,
        2.0 * PI * PI,
        &SolveConfig::default(),
    )
    .unwrap();
    let first: Vec<f64> = report.eigenvalues.iter().map(|e| round(e[0], 4)).collect();
    outcome(report.violations.is_empty(), format!("lambda_1 along d grid {first:?}, violations {:?}", report.violations))
}

fn localization_check(run: &ConvergenceRun) -> Outcome {
    let row = run.rows.last().unwrap();
    let Some(loc) = &row.localization else {
        return outcome(false, "final row carries no localization".into());
    };
    let mut pass = loc.count_label(Label::Resonator(0)) == 1;
    let mut parts = Vec::new();
    for p in &loc.pairs {
        let inside: f64 = p.resonator_fractions.iter().sum();
        match p.label {
            Label::Resonator(k) => pass &= p.resonator_fractions[k] >= 0.8,
            Label::Bulk => pass &= inside <= 0.2,
        }
        parts.push(format!("{:.3} {:?} {:.3}", p.eigenvalue, p.label, inside));
    }
    outcome(pass, format!("eps {}: {}", row.eps, parts.join(", ")))
}

fn designer() -> Outcome {
    let waveguide = OuterSpec::TruncatedWaveguide {
        full_width: 1.0,
        narrow_width: 0.7,
        narrow_halflength: 1.5,
        truncation_halflength: 6.0,
    };
    let problem = DesignProblem {
        waveguide,
        resonators: vec![Placement { center: [-0.75, 0.125], ell: 0.3 }, Placement { center: [0.75, 0.125], ell: 0.3 }],
        eps: 0.25,
        targets: vec![4.0, 7.0],
        eta: Some(0.6),
        tol: 0.02,
    };
    let oracle = FemOracle::new(&problem, SolveConfig::default());
    let r = match design(&problem, &oracle, &DesignOptions::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let shift = truncation_shift(&oracle, &r.d_tilde).unwrap();
    let within = r.worst_relative_error(&problem.targets) <= 0.02;
    let boxed = r.d_tilde.iter().zip(&r.brackets).all(|(d, b)| b.contains(*d));
    let count = r.below_threshold == 2;
    let stable = shift.iter().all(|s| *s < 0.002);
    outcome(
        within && boxed && count && stable,
        format!(
            "achieved {:?}, d {:?}, below threshold {}, truncation shift {:?}, sweeps {}",
            r.achieved.iter().map(|v| round(*v, 4)).collect::<Vec<_>>(),
            r.d_tilde.iter().map(|v| round(*v, 4)).collect::<Vec<_>>(),
            r.below_threshold,
            shift,
            r.sweeps
        ),
    )
}

fn brute_directed(x: &[f64], y: &[f64]) -> f64 {
    let mut sup = 0.0f64;
    for a in x {
        let mut inf = f64::INFINITY;
        for b in y {
            inf = inf.min((a - b).abs());
        }
        sup = sup.max(inf);
    }
    sup
}

fn brute(x: &[f64], y: &[f64]) -> f64 {
    brute_directed(x, y).max(brute_directed(y, x))
}

fn random_set(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.gen_range(1..12);
    (0..n).map(|_| rng.gen_range(0.0..100.0)).collect()
}

fn metric_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (x, y) = (random_set(&mut rng), random_set(&mut rng));
        let cutoff = x.iter().chain(&y).copied().fold(0.0, f64::max);
        let (sx, sy) = (SpectrumSet::new(x.clone(), cutoff).unwrap(), SpectrumSet::new(y.clone(), cutoff).unwrap());
        if hausdorff(&sx, &sy).unwrap() != brute(&x, &y) {
            mismatches += 1;
        }
        let tx: Vec<f64> = x.iter().map(|v| 1.0 / (1.0 + v)).collect();
        let ty: Vec<f64> = y.iter().map(|v| 1.0 / (1.0 + v)).collect();
        if tilde_hausdorff(&sx, &sy).unwrap().value != brute(&tx, &ty) {
            mismatches += 1;
        }
    }
    let mut axiom_failures = 0;
    for _ in 0..1000 {
        let (x, y, z) = (random_set(&mut rng), random_set(&mut rng), random_set(&mut rng));
        let d = |a: &[f64], b: &[f64]| hausdorff_values(a, b).unwrap();
        let ok = d(&x, &x) == 0.0
            && d(&x, &y) == d(&y, &x)
            && d(&x, &y) > 0.0
            && d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12;
        if !ok {
            axiom_failures += 1;
        }
    }
    outcome(
        mismatches == 0 && axiom_failures == 0,
        format!("{mismatches} mismatches against the double-sup oracle, {axiom_failures} axiom failures"),
    )
}

fn rate_trend(run: &ConvergenceRun) -> Outcome {
    match fit_rate(run, 2) {
        Ok(fit) => outcome(
            true,
            format!(
                "slope {:.3} (expected >= 0.5: {}), residual {:.3}, rows {}",
                fit.slope,
                fit.slope >= 0.5,
                fit.residual,
                fit.rows_used
            ),
        ),
        Err(e) => outcome(true, format!("no fit: {e}")),
    }
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed())
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored
    let mut results: Vec<(u32, &str, Outcome, Duration, Duration)> = Vec::new();
    let mut push = |n, name, (o, t): (Outcome, Duration), limit: u64| {
        results.push((n, name, o, t, Duration::from_secs(limit)));
    };
    push(1, "FEM benchmark", timed(fem_benchmark), 60);
    push(2, "capacity law", timed(capacity_law), 120);
    push(3, "resonator eigenvalue", timed(resonator_gamma), 300);
    let t = Instant::now();
    let run = convergence_run();
    let run_time = t.elapsed();
    let (o, t4) = timed(|| convergence(&run));
    push(4, "spectral convergence", (o, run_time + t4), 600);
    push(5, "window monotonicity", timed(monotonicity), 300);
    let (o, t6) = timed(|| localization_check(&run));
    push(6, "localization", (o, t6), 600);
    push(7, "designer", timed(designer), 1200);
    push(8, "metric suite", timed(metric_suite), 10);
    let (o, t9) = timed(|| rate_trend(&run));
    push(9, "rate trend (diagnostic)", (o, t9), 600);

    let mut failed = 0;
    for (n, name, o, took, limit) in &results {
        let in_time = took <= limit;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n} [{}] {name} ({:.1}s): {}{}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            o.detail,
            if in_time { String::new() } else { format!(" (over the {}s budget)", limit.as_secs()) }
        );
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
