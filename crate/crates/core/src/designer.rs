//! Inverse problem: choose window parameters so that the discrete eigenvalues
//! of a narrowed, truncated waveguide with resonators hit prescribed targets.
//!
//! The search works on the scaling coefficients `d_k`. Each `d_k` is turned into
//! a physical window through [`window_scale`], and the eigenvalue below the
//! essential threshold that belongs to resonator `k` is nondecreasing in every
//! coefficient. Cyclic scalar bisection inside the boxes `[F(γ̃_k − η), F(γ̃_k + η)]`
//! then drives all eigenvalues to their targets.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{build_domain, window_scale, GeometryError, OuterSpec, ResonatorSpec, ScalingLaw, REFERENCE_AREA};
use crate::harness::{solve_domain, HarnessError, SolveConfig};
use crate::mesh::MeshOptions;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("dimension {0} is not supported (need n >= 2)")]
    BadDimension(u32),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid design problem: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("bracket check failed for target {k}: {reason}; eps too large for these targets")]
    BracketFailure { k: usize, reason: String },
    #[error("eigenvalue {index} decreased from {before} to {after} while d_{k} grew")]
    Monotonicity { k: usize, index: usize, before: f64, after: f64 },
    #[error("no convergence after {sweeps} sweeps (worst relative error {worst:e})")]
    NoConvergence { sweeps: usize, worst: f64, trace: Box<Vec<TraceEntry>> },
    #[error(transparent)]
    Oracle(#[from] HarnessError),
}

impl DesignError {
    pub fn is_numerical(&self) -> bool {
        match self {
            DesignError::NoConvergence { .. } => true,
            DesignError::Oracle(e) => e.is_numerical(),
            _ => false,
        }
    }
}

/// `d_k` producing the limit value `t`: `t·2|B|/π` in the plane and
/// `(t·4|B|/cap D)^{1/(n−2)}` for `n ≥ 3`.
pub fn f_coeff(t: f64, n: u32, vol_b: f64, cap_d: f64) -> Result<f64, DesignError> {
    check_args(t, n, vol_b, cap_d)?;
    Ok(if n == 2 {
        t * 2.0 * vol_b / std::f64::consts::PI
    } else {
        (t * 4.0 * vol_b / cap_d).powf(1.0 / (n as f64 - 2.0))
    })
}

/// Inverse of [`f_coeff`]: the limit value produced by the coefficient `s`.
pub fn f_star(s: f64, n: u32, vol_b: f64, cap_d: f64) -> Result<f64, DesignError> {
    check_args(s, n, vol_b, cap_d)?;
    Ok(if n == 2 {
        s * std::f64::consts::PI / (2.0 * vol_b)
    } else {
        s.powi(n as i32 - 2) * cap_d / (4.0 * vol_b)
    })
}

fn check_args(t: f64, n: u32, vol_b: f64, cap_d: f64) -> Result<(), DesignError> {
    if n < 2 {
        return Err(DesignError::BadDimension(n));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(DesignError::Parameter(format!("argument {t} must be positive")));
    }
    if !(vol_b > 0.0) {
        return Err(DesignError::Parameter(format!("volume {vol_b} must be positive")));
    }
    if n >= 3 && !(cap_d > 0.0) {
        return Err(DesignError::Parameter(format!("capacity {cap_d} must be positive")));
    }
    Ok(())
}

/// Bottom of the essential spectrum of the full strip and of its narrowed part.
pub fn essential_threshold(waveguide: &OuterSpec) -> Result<(f64, f64), DesignError> {
    waveguide.validate()?;
    match *waveguide {
        OuterSpec::TruncatedWaveguide { full_width, narrow_width, .. } => {
            let pi2 = std::f64::consts::PI * std::f64::consts::PI;
            let (lo, hi) = (pi2 / (full_width * full_width), pi2 / (narrow_width * narrow_width));
            assert!(lo < hi);
            Ok((lo, hi))
        }
        OuterSpec::Rectangle { .. } => Err(GeometryError::InvalidOuter("designer needs a truncated waveguide".into()).into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Placement {
    pub center: [f64; 2],
    pub ell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignProblem {
    pub waveguide: OuterSpec,
    pub resonators: Vec<Placement>,
    pub eps: f64,
    pub targets: Vec<f64>,
    /// Bracket half-width; `None` picks the default.
    pub eta: Option<f64>,
    /// Relative eigenvalue tolerance.
    pub tol: f64,
}

impl DesignProblem {
    /// `0.1 · min(smallest target gap, Λ′ − γ̃_m) / 2`.
    pub fn default_eta(&self, lambda_prime: f64) -> f64 {
        let mut gap = lambda_prime - self.targets.last().copied().unwrap_or(0.0);
        for w in self.targets.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
        0.1 * gap / 2.0
    }

    pub fn eta(&self, lambda_prime: f64) -> f64 {
        self.eta.unwrap_or_else(|| self.default_eta(lambda_prime))
    }

    pub fn validate(&self) -> Result<(f64, f64), DesignError> {
        let (lp, lpp) = essential_threshold(&self.waveguide)?;
        let bad = |s: String| Err(DesignError::InvariantViolation(s));
        if self.targets.is_empty() {
            return bad("no targets".into());
        }
        if self.targets.len() != self.resonators.len() {
            return bad(format!("{} targets for {} resonators", self.targets.len(), self.resonators.len()));
        }
        if self.targets[0] <= 0.0 || self.targets.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("targets must be positive and strictly increasing".into());
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad(format!("tolerance {} outside (0, 1)", self.tol));
        }
        let eta = self.eta(lp);
        if !(eta > 0.0) {
            return bad(format!("bracket half-width {eta} must be positive"));
        }
        let top = *self.targets.last().unwrap();
        if top + 2.0 * eta >= lp {
            return bad(format!("largest target {top} + 2*eta reaches the threshold {lp}"));
        }
        if self.targets[0] - 2.0 * eta <= 0.0 {
            return bad(format!("smallest target {} - 2*eta is not positive", self.targets[0]));
        }
        if self.targets.windows(2).any(|w| w[0] + 2.0 * eta >= w[1] - 2.0 * eta) {
            return bad("target intervals of half-width 2*eta overlap".into());
        }
        Ok((lp, lpp))
    }
}

/// Box `[d_k^−, d_k^+]` of one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    pub lower: f64,
    pub upper: f64,
}

impl Bracket {
    pub fn contains(&self, d: f64) -> bool {
        d >= self.lower && d <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `d_k^± = F(γ̃_k ± η)` in the plane.
pub fn bracket(problem: &DesignProblem) -> Result<Vec<Bracket>, DesignError> {
    let (lp, _) = problem.validate()?;
    let eta = problem.eta(lp);
    problem
        .targets
        .iter()
        .map(|&g| {
            Ok(Bracket {
                lower: f_coeff(g - eta, 2, REFERENCE_AREA, 0.0)?,
                upper: f_coeff(g + eta, 2, REFERENCE_AREA, 0.0)?,
            })
        })
        .collect()
}

/// Sorted eigenvalues of the perturbed domain as a function of the coefficients.
pub trait EigenOracle: Sync {
    fn eigenvalues(&self, d: &[f64]) -> Result<OracleValue, DesignError>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleValue {
    pub eigenvalues: Vec<f64>,
    /// Slack for comparing values from different evaluations.
    pub allowance: f64,
}

/// Closed-form oracle `f_k(d) = F*(d_k)`, useful for exercising the search.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticOracle;

impl EigenOracle for AnalyticOracle {
    fn eigenvalues(&self, d: &[f64]) -> Result<OracleValue, DesignError> {
        let mut v = d
            .iter()
            .map(|&dk| f_star(dk, 2, REFERENCE_AREA, 0.0))
            .collect::<Result<Vec<_>, _>>()?;
        v.sort_by(f64::total_cmp);
        Ok(OracleValue { eigenvalues: v, allowance: 0.0 })
    }
}

/// Finite element oracle: builds the windows from the planar scaling law and
/// solves the full mesh and eigenvalue pipeline.
#[derive(Debug, Clone)]
pub struct FemOracle {
    pub waveguide: OuterSpec,
    pub resonators: Vec<Placement>,
    pub eps: f64,
    pub config: SolveConfig,
    /// Eigenvalues requested per call; one more than the resonator count
    /// lets the caller see the first value above the threshold.
    pub count: usize,
    /// Relative slack for discretization changes between calls.
    pub mesh_allowance: f64,
}

/// Default relative slack between two meshes with different windows.
pub const MESH_ALLOWANCE: f64 = 1e-3;

impl FemOracle {
    pub fn new(problem: &DesignProblem, config: SolveConfig) -> Self {
        FemOracle {
            waveguide: problem.waveguide,
            resonators: problem.resonators.clone(),
            eps: problem.eps,
            config,
            count: problem.resonators.len() + 1,
            mesh_allowance: MESH_ALLOWANCE,
        }
    }

    pub fn resonator_specs(&self, d: &[f64]) -> Result<Vec<ResonatorSpec>, DesignError> {
        self.resonators
            .iter()
            .zip(d)
            .map(|(p, &dk)| {
                let phys = window_scale(ScalingLaw::planar(dk), self.eps)?;
                Ok(ResonatorSpec::new(p.center, self.eps, p.ell, phys))
            })
            .collect()
    }
}

impl EigenOracle for FemOracle {
    fn eigenvalues(&self, d: &[f64]) -> Result<OracleValue, DesignError> {
        if d.len() != self.resonators.len() {
            return Err(DesignError::Parameter(format!("{} coefficients for {} resonators", d.len(), self.resonators.len())));
        }
        let domain = build_domain(self.waveguide, self.resonator_specs(d)?)?;
        let solve = solve_domain(&domain, &self.config, self.count, &MeshOptions::default())?;
        let s = &solve.spectrum;
        let top = s.eigenvalues.iter().copied().fold(0.0, f64::max);
        let allowance = 2.0 * s.effective_tolerance(self.config.eig_tol) * top + self.mesh_allowance * top;
        Ok(OracleValue { eigenvalues: s.eigenvalues.clone(), allowance })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub sweep: usize,
    /// Coordinate being bisected; `None` for corner and final evaluations.
    pub coordinate: Option<usize>,
    pub d: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DesignOptions {
    pub max_sweeps: usize,
    /// Bisection steps per coordinate and sweep.
    pub max_bisections: usize,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { max_sweeps: 12, max_bisections: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignResult {
    pub d_tilde: Vec<f64>,
    pub achieved: Vec<f64>,
    pub brackets: Vec<Bracket>,
    pub eta: f64,
    pub lambda_prime: f64,
    pub lambda_double_prime: f64,
    /// Computed eigenvalues below `Λ′` at the solution.
    pub below_threshold: usize,
    pub sweeps: usize,
    pub trace: Vec<TraceEntry>,
}

impl DesignResult {
    pub fn worst_relative_error(&self, targets: &[f64]) -> f64 {
        self.achieved
            .iter()
            .zip(targets)
            .map(|(a, t)| ((a - t) / t).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let m = self.d_tilde.len();
        let width = self.trace.iter().map(|t| t.eigenvalues.len()).max().unwrap_or(0);
        let mut out = String::from("sweep,coordinate");
        for k in 0..m {
            out.push_str(&format!(",d_{}", k + 1));
        }
        for j in 0..width {
            out.push_str(&format!(",lambda_{}", j + 1));
        }
        out.push('\n');
        for t in &self.trace {
            out.push_str(&t.sweep.to_string());
            out.push(',');
            if let Some(c) = t.coordinate {
                out.push_str(&(c + 1).to_string());
            }
            for v in &t.d {
                out.push_str(&format!(",{v:.12e}"));
            }
            for j in 0..width {
                out.push(',');
                if let Some(v) = t.eigenvalues.get(j) {
                    out.push_str(&format!("{v:.12e}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn value_at(values: &[f64], k: usize) -> Result<f64, DesignError> {
    values
        .get(k)
        .copied()
        .ok_or_else(|| DesignError::Parameter(format!("oracle returned {} eigenvalues, need {}", values.len(), k + 1)))
}

/// Cyclic coordinate bisection against `oracle`.
pub fn design(problem: &DesignProblem, oracle: &dyn EigenOracle, options: &DesignOptions) -> Result<DesignResult, DesignError> {
    let (lp, lpp) = problem.validate()?;
    let eta = problem.eta(lp);
    let boxes = bracket(problem)?;
    let m = boxes.len();
    let targets = &problem.targets;
    let mut trace = Vec::new();

    // mixed corners: coordinate k low with the rest high, and the reverse
    let corners: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .map(|k| {
            let lo: Vec<f64> = (0..m).map(|j| if j == k { boxes[j].lower } else { boxes[j].upper }).collect();
            let hi: Vec<f64> = (0..m).map(|j| if j == k { boxes[j].upper } else { boxes[j].lower }).collect();
            (lo, hi)
        })
        .collect();
    let evaluated: Vec<Result<(OracleValue, OracleValue), DesignError>> = corners
        .par_iter()
        .map(|(lo, hi)| Ok((oracle.eigenvalues(lo)?, oracle.eigenvalues(hi)?)))
        .collect();
    for (k, ((lo_d, hi_d), res)) in corners.iter().zip(evaluated).enumerate() {
        let (lo, hi) = res?;
        let simple = |v: &OracleValue| {
            (0..m).all(|j| {
                let g = tol_gap(problem.tol, targets[j]);
                let below = j == 0 || v.eigenvalues[j] - v.eigenvalues[j - 1] > g;
                let above = v.eigenvalues.get(j + 1).is_none_or(|&x| x - v.eigenvalues[j] > g);
                below && above
            })
        };
        let (fl, fh) = (value_at(&lo.eigenvalues, k)?, value_at(&hi.eigenvalues, k)?);
        trace.push(TraceEntry { sweep: 0, coordinate: None, d: lo_d.clone(), eigenvalues: lo.eigenvalues.clone() });
        trace.push(TraceEntry { sweep: 0, coordinate: None, d: hi_d.clone(), eigenvalues: hi.eigenvalues.clone() });
        if !(fl < targets[k] && targets[k] < fh) {
            return Err(DesignError::BracketFailure {
                k,
                reason: format!("eigenvalue {} ranges over [{fl}, {fh}] and misses {}", k + 1, targets[k]),
            });
        }
        if value_at(&lo.eigenvalues, m - 1)? >= lpp || value_at(&hi.eigenvalues, m - 1)? >= lpp {
            return Err(DesignError::BracketFailure { k, reason: format!("fewer than {m} eigenvalues below {lpp}") });
        }
        if !simple(&lo) || !simple(&hi) {
            return Err(DesignError::BracketFailure { k, reason: "eigenvalues below the threshold are not simple".into() });
        }
    }

    let mut d: Vec<f64> = targets
        .iter()
        .map(|&g| f_coeff(g, 2, REFERENCE_AREA, 0.0))
        .collect::<Result<_, _>>()?;
    let mut current = oracle.eigenvalues(&d)?;
    trace.push(TraceEntry { sweep: 0, coordinate: None, d: d.clone(), eigenvalues: current.eigenvalues.clone() });
    let inner = 0.25 * problem.tol;
    let worst = |v: &[f64]| -> Result<f64, DesignError> {
        (0..m).try_fold(0.0f64, |w, k| Ok(w.max(((value_at(v, k)? - targets[k]) / targets[k]).abs())))
    };

    let mut sweeps = 0;
    while worst(&current.eigenvalues)? > problem.tol {
        if sweeps == options.max_sweeps {
            return Err(DesignError::NoConvergence {
                sweeps,
                worst: worst(&current.eigenvalues)?,
                trace: Box::new(trace),
            });
        }
        sweeps += 1;
        for k in 0..m {
            let (mut lo, mut hi) = (boxes[k].lower, boxes[k].upper);
            // (d_k, eigenvalues) seen in this scalar search, for the monotonicity audit
            let mut seen: Vec<(f64, OracleValue)> = vec![(d[k], current.clone())];
            let mut steps = 0;
            loop {
                let fk = value_at(&current.eigenvalues, k)?;
                if ((fk - targets[k]) / targets[k]).abs() <= inner || steps == options.max_bisections {
                    break;
                }
                // the iterate is the last evaluated point, so shrink around it first
                if fk >= targets[k] {
                    hi = d[k];
                } else {
                    lo = d[k];
                }
                d[k] = 0.5 * (lo + hi);
                current = oracle.eigenvalues(&d)?;
                steps += 1;
                trace.push(TraceEntry { sweep: sweeps, coordinate: Some(k), d: d.clone(), eigenvalues: current.eigenvalues.clone() });
                audit(k, d[k], &current, &seen)?;
                seen.push((d[k], current.clone()));
            }
        }
    }

    let below = current.eigenvalues.iter().filter(|&&v| v < lp).count();
    let achieved = current.eigenvalues[..m].to_vec();
    Ok(DesignResult {
        d_tilde: d,
        achieved,
        brackets: boxes,
        eta,
        lambda_prime: lp,
        lambda_double_prime: lpp,
        below_threshold: below,
        sweeps,
        trace,
    })
}

fn tol_gap(tol: f64, target: f64) -> f64 {
    2.0 * tol * target
}

/// Every eigenvalue must be nondecreasing in `d_k`, up to the oracle slack.
fn audit(k: usize, dk: f64, now: &OracleValue, seen: &[(f64, OracleValue)]) -> Result<(), DesignError> {
    for (prev_d, prev) in seen {
        let slack = now.allowance.max(prev.allowance);
        let (small, large) = if *prev_d < dk { (prev, now) } else if *prev_d > dk { (now, prev) } else { continue };
        for (index, (a, b)) in small.eigenvalues.iter().zip(&large.eigenvalues).enumerate() {
            if *b < *a - slack {
                return Err(DesignError::Monotonicity { k, index, before: *a, after: *b });
            }
        }
    }
    Ok(())
}

/// Relative change of the first `m` eigenvalues when the truncation length doubles.
pub fn truncation_shift(oracle: &FemOracle, d: &[f64]) -> Result<Vec<f64>, DesignError> {
    let base = oracle.eigenvalues(d)?;
    let doubled = match oracle.waveguide {
        OuterSpec::TruncatedWaveguide { full_width, narrow_width, narrow_halflength, truncation_halflength } => {
            OuterSpec::TruncatedWaveguide {
                full_width,
                narrow_width,
                narrow_halflength,
                truncation_halflength: 2.0 * truncation_halflength,
            }
        }
        OuterSpec::Rectangle { .. } => return Err(GeometryError::InvalidOuter("designer needs a truncated waveguide".into()).into()),
    };
    let long = FemOracle { waveguide: doubled, ..oracle.clone() }.eigenvalues(d)?;
    Ok(d.iter()
        .enumerate()
        .map(|(k, _)| ((long.eigenvalues[k] - base.eigenvalues[k]) / base.eigenvalues[k]).abs())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn guide() -> OuterSpec {
        OuterSpec::TruncatedWaveguide {
            full_width: 1.0,
            narrow_width: 0.7,
            narrow_halflength: 1.5,
            truncation_halflength: 6.0,
        }
    }

    fn problem(targets: Vec<f64>, eta: Option<f64>) -> DesignProblem {
        let resonators = (0..targets.len())
            .map(|k| Placement { center: [-0.75 + 1.5 * k as f64, 0.125], ell: 0.3 })
            .collect();
        DesignProblem { waveguide: guide(), resonators, eps: 0.25, targets, eta, tol: 0.02 }
    }

    #[test]
    fn coefficient_examples() {
        assert!((f_coeff(4.0, 2, 1.0, 0.0).unwrap() - 8.0 / PI).abs() < 1e-15);
        let ball = 4.0 * PI / 3.0;
        assert!((f_coeff(3.0 / (2.0 * PI), 3, ball, 8.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((f_coeff(0.7, 3, ball, 8.0).unwrap() - 2.0 * PI * 0.7 / 3.0).abs() < 1e-15);
        assert_eq!(f_coeff(1.0, 1, 1.0, 1.0), Err(DesignError::BadDimension(1)));
        assert!(f_coeff(-1.0, 2, 1.0, 0.0).is_err());
    }

    #[test]
    fn thresholds() {
        let (lp, lpp) = essential_threshold(&guide()).unwrap();
        assert!((lp - PI * PI).abs() < 1e-12);
        assert!((lpp - PI * PI / 0.49).abs() < 1e-12);
        assert!((lpp - 20.142).abs() < 1e-3);
        let wide = OuterSpec::TruncatedWaveguide {
            full_width: 1.0,
            narrow_width: 1.0,
            narrow_halflength: 1.5,
            truncation_halflength: 6.0,
        };
        assert!(essential_threshold(&wide).is_err());
        assert!(essential_threshold(&OuterSpec::unit_square()).is_err());
    }

    #[test]
    fn bracket_example() {
        let b = bracket(&problem(vec![4.0], Some(0.2))).unwrap();
        assert!((b[0].lower - 7.6 / PI).abs() < 1e-12);
        assert!((b[0].upper - 8.4 / PI).abs() < 1e-12);
        assert!((b[0].lower - 2.4192).abs() < 1e-4 && (b[0].upper - 2.6738).abs() < 1e-4);
    }

    #[test]
    fn bracket_collapses() {
        let w: Vec<f64> = [0.1, 0.01, 1e-4, 1e-8]
            .iter()
            .map(|&eta| bracket(&problem(vec![4.0], Some(eta))).unwrap()[0].width())
            .collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
        assert!(w[3] < 1e-7);
    }

    #[test]
    fn rejects_bad_problems() {
        let p = problem(vec![7.0, 4.0], None);
        assert!(matches!(design(&p, &AnalyticOracle, &DesignOptions::default()), Err(DesignError::InvariantViolation(_))));
        assert!(matches!(bracket(&problem(vec![4.0, 7.0], Some(1.5))), Err(DesignError::InvariantViolation(_))));
        assert!(matches!(bracket(&problem(vec![4.0, 4.5], Some(0.2))), Err(DesignError::InvariantViolation(_))));
        assert!(matches!(bracket(&problem(vec![9.8], Some(0.1))), Err(DesignError::InvariantViolation(_))));
        assert!(bracket(&problem(vec![9.8], None)).is_ok());
    }

    #[test]
    fn default_eta_from_gaps() {
        let p = problem(vec![4.0, 7.0], None);
        assert!((p.default_eta(PI * PI) - 0.1 * (PI * PI - 7.0) / 2.0).abs() < 1e-15);
        let p = problem(vec![4.0, 5.0], None);
        assert!((p.default_eta(PI * PI) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn analytic_oracle_hits_fixed_point() {
        let p = DesignProblem { tol: 1e-9, ..problem(vec![4.0, 7.0], Some(0.3)) };
        let r = design(&p, &AnalyticOracle, &DesignOptions::default()).unwrap();
        for (k, &g) in p.targets.iter().enumerate() {
            let exact = f_coeff(g, 2, 1.0, 0.0).unwrap();
            assert!((r.d_tilde[k] - exact).abs() < 1e-9 * exact);
            assert!(r.brackets[k].contains(r.d_tilde[k]));
        }
        assert_eq!(r.below_threshold, 2);
    }

    struct Shifted(f64);

    impl EigenOracle for Shifted {
        fn eigenvalues(&self, d: &[f64]) -> Result<OracleValue, DesignError> {
            let mut v = AnalyticOracle.eigenvalues(d)?;
            for x in &mut v.eigenvalues {
                *x *= self.0;
            }
            Ok(v)
        }
    }

    #[test]
    fn shifted_oracle_moves_coefficients() {
        let p = DesignProblem { tol: 1e-6, ..problem(vec![4.0, 7.0], Some(0.6)) };
        let r = design(&p, &Shifted(0.95), &DesignOptions::default()).unwrap();
        assert!(r.worst_relative_error(&p.targets) <= 1e-6);
        for (k, &g) in p.targets.iter().enumerate() {
            let exact = f_coeff(g / 0.95, 2, 1.0, 0.0).unwrap();
            assert!((r.d_tilde[k] - exact).abs() < 1e-5 * exact);
        }
        // a 20% shift leaves the bracket
        let err = design(&p, &Shifted(0.8), &DesignOptions::default()).unwrap_err();
        assert!(matches!(err, DesignError::BracketFailure { k: 0, .. }));
    }

    struct Decreasing;

    impl EigenOracle for Decreasing {
        fn eigenvalues(&self, d: &[f64]) -> Result<OracleValue, DesignError> {
            let mut v = Shifted(0.9).eigenvalues(d)?;
            // dip where the first bisection step lands
            let c = 8.0 / PI;
            if d[0] > 1.07 * c && d[0] < 1.08 * c {
                v.eigenvalues[0] -= 0.5;
            }
            Ok(v)
        }
    }

    #[test]
    fn monotonicity_violation_aborts() {
        let p = DesignProblem { tol: 1e-9, ..problem(vec![4.0], Some(0.6)) };
        let r = design(&p, &Decreasing, &DesignOptions::default());
        assert!(matches!(r, Err(DesignError::Monotonicity { k: 0, .. })), "{r:?}");
    }

    #[test]
    fn sweep_cap() {
        let p = DesignProblem { tol: 1e-12, ..problem(vec![4.0], Some(0.3)) };
        let opts = DesignOptions { max_sweeps: 1, max_bisections: 3 };
        match design(&p, &Shifted(0.95), &opts) {
            Err(DesignError::NoConvergence { sweeps: 1, trace, .. }) => assert!(trace.len() >= 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_trace() {
        let p = DesignProblem { tol: 1e-3, ..problem(vec![4.0, 7.0], Some(0.3)) };
        let r = design(&p, &Shifted(0.99), &DesignOptions::default()).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "sweep,coordinate,d_1,d_2,lambda_1,lambda_2");
        assert_eq!(csv.lines().count(), r.trace.len() + 1);
    }
}
