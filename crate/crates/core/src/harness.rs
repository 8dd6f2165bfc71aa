//! Convergence experiments: sweep ε along a window scaling law, solve the
//! discrete eigenproblem on each perturbed domain and compare with the limit
//! spectrum.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::capacity::{self, CapacityError, GammaMethod};
use crate::geometry::{
    build_domain, window_scale, DomainInstance, GeometryError, OuterSpec, ResonatorSpec, ScalingLaw,
    REFERENCE_AREA,
};
use crate::mesh::{triangulate_with, GradingSpec, MeshError, MeshOptions, SlitMesh};
use crate::model::{self, Label, ModelError, RateFactor, SpectrumSet};
use crate::numerics::{
    apply_dirichlet, assemble, element_matrices, smallest_eigenpairs_with, DofMap, EigenConfig, NumericsError,
    Spectrum,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("spectrum carries no eigenvectors")]
    MissingVectors,
    #[error("need at least {need} usable rows, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

impl HarnessError {
    /// Whether the failure comes from an iterative method or resolution limit.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HarnessError::Numerics(_)
                | HarnessError::Capacity(CapacityError::Numerics(_))
                | HarnessError::InsufficientData { .. }
        )
    }
}

/// Discretization and solver settings shared by every experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveConfig {
    pub base_h: f64,
    pub ratio: f64,
    /// Element size at the window tips relative to the window half-width.
    pub tip_fraction: f64,
    pub eig_tol: f64,
    pub eigen: EigenConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            base_h: 1.0 / 32.0,
            ratio: GradingSpec::DEFAULT_RATIO,
            tip_fraction: 1.0 / 8.0,
            eig_tol: 1e-6,
            eigen: EigenConfig::default(),
        }
    }
}

impl SolveConfig {
    pub fn grading(&self, domain: &DomainInstance) -> GradingSpec {
        let min_h = domain
            .resonators
            .iter()
            .map(|r| r.window_halfwidth() * self.tip_fraction)
            .fold(self.base_h, f64::min);
        GradingSpec {
            base_h: self.base_h,
            min_h,
            ratio: self.ratio,
        }
    }
}

/// Mesh, reduced system and spectrum of one domain.
#[derive(Debug, Clone)]
pub struct DomainSolve {
    pub mesh: SlitMesh,
    pub dofs: DofMap,
    pub spectrum: Spectrum,
}

impl DomainSolve {
    pub fn n_dofs(&self) -> usize {
        self.dofs.reduced_to_full.len()
    }
}

/// Mesh the domain, assemble, eliminate the outer boundary and solve.
pub fn solve_domain(
    domain: &DomainInstance,
    cfg: &SolveConfig,
    count: usize,
    options: &MeshOptions,
) -> Result<DomainSolve, HarnessError> {
    let grading = cfg.grading(domain);
    solve_domain_graded(domain, &grading, cfg, count, options)
}

pub fn solve_domain_graded(
    domain: &DomainInstance,
    grading: &GradingSpec,
    cfg: &SolveConfig,
    count: usize,
    options: &MeshOptions,
) -> Result<DomainSolve, HarnessError> {
    let mesh = triangulate_with(domain, grading, options)?;
    let (k, m) = assemble(&mesh)?;
    let (k, m, dofs) = apply_dirichlet(&k, &m, &mesh)?;
    let eigen = EigenConfig { keep_vectors: true, ..cfg.eigen };
    let spectrum = smallest_eigenpairs_with(&k, &m, count, cfg.eig_tol, &eigen)?;
    Ok(DomainSolve { mesh, dofs, spectrum })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairLocalization {
    pub eigenvalue: f64,
    /// L² mass share inside each resonator.
    pub resonator_fractions: Vec<f64>,
    /// Share in the rest of the domain.
    pub outside_fraction: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub pairs: Vec<PairLocalization>,
}

impl LocalizationReport {
    pub fn count_label(&self, label: Label) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }
}

/// Split the L² mass of each eigenvector by region using element mass matrices.
pub fn localization(
    spectrum: &Spectrum,
    mesh: &SlitMesh,
    domain: &DomainInstance,
    dofs: &DofMap,
) -> Result<LocalizationReport, HarnessError> {
    let vectors = spectrum.eigenvectors.as_ref().ok_or(HarnessError::MissingVectors)?;
    let m = domain.resonators.len();
    let region: Vec<Option<usize>> = mesh
        .triangles
        .iter()
        .map(|t| {
            let c = t.iter().fold([0.0, 0.0], |acc, &i| {
                [acc[0] + mesh.nodes[i].x / 3.0, acc[1] + mesh.nodes[i].y / 3.0]
            });
            domain.resonator_at(c)
        })
        .collect();
    let pairs = vectors
        .par_iter()
        .zip(&spectrum.eigenvalues)
        .map(|(v, &lambda)| {
            let u = dofs.expand(v);
            let mut parts = vec![0.0; m + 1];
            for (t, reg) in mesh.triangles.iter().zip(&region) {
                let p = t.map(|i| [mesh.nodes[i].x, mesh.nodes[i].y]);
                let (_, me, _) = element_matrices(p);
                let ue = t.map(|i| u[i]);
                let mut e = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        e += ue[i] * me[i][j] * ue[j];
                    }
                }
                parts[reg.unwrap_or(m)] += e;
            }
            let total: f64 = parts.iter().sum();
            let fr: Vec<f64> = parts.iter().map(|p| p / total).collect();
            let (best, share) = fr[..m]
                .iter()
                .copied()
                .enumerate()
                .fold((usize::MAX, 0.0), |acc, (k, f)| if f > acc.1 { (k, f) } else { acc });
            PairLocalization {
                eigenvalue: lambda,
                label: if share > 0.5 { Label::Resonator(best) } else { Label::Bulk },
                outside_fraction: fr[m],
                resonator_fractions: fr[..m].to_vec(),
            }
        })
        .collect();
    Ok(LocalizationReport { pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub d: Vec<f64>,
    pub gamma_eps: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub dtilde: f64,
    pub truncation_bound: f64,
    pub rate_factor: f64,
    pub gamma_err: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub residual_max: f64,
    pub n_dofs: usize,
    pub localization: Option<LocalizationReport>,
    pub status: RowStatus,
}

impl ConvergenceRow {
    fn failed(eps: f64, d: Vec<f64>, why: String) -> Self {
        ConvergenceRow {
            eps,
            d,
            gamma_eps: Vec::new(),
            eigenvalues: Vec::new(),
            dtilde: f64::NAN,
            truncation_bound: f64::NAN,
            rate_factor: f64::NAN,
            gamma_err: f64::NAN,
            h_min: f64::NAN,
            h_max: f64::NAN,
            residual_max: f64::NAN,
            n_dofs: 0,
            localization: None,
            status: RowStatus::Failed(why),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RowStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRun {
    pub outer: OuterSpec,
    pub base: Vec<ResonatorSpec>,
    pub laws: Vec<ScalingLaw>,
    pub schedule: Vec<f64>,
    pub count: usize,
    pub lambda_max: f64,
    pub limit: SpectrumSet,
    pub gamma_limit: Vec<f64>,
    pub rows: Vec<ConvergenceRow>,
}

/// Limit value `γ_k` of the window family `d = window_scale(law, ε)`.
pub fn gamma_limit(law: &ScalingLaw, shape_cap: Option<f64>) -> Result<f64, HarnessError> {
    match law.dim {
        2 => Ok(std::f64::consts::PI * law.coefficient / (2.0 * REFERENCE_AREA)),
        n if n >= 3 => {
            let cap = shape_cap.ok_or_else(|| HarnessError::Invalid("shape capacity required for n >= 3".into()))?;
            Ok(law.coefficient.powi(n as i32 - 2) * cap / (4.0 * REFERENCE_AREA))
        }
        n => Err(GeometryError::BadDimension(n).into()),
    }
}

/// Resonators of `base` rescaled to `eps`, with windows from the laws.
pub fn scaled_resonators(
    base: &[ResonatorSpec],
    laws: &[ScalingLaw],
    eps: f64,
) -> Result<Vec<ResonatorSpec>, HarnessError> {
    if !(laws.len() == 1 || laws.len() == base.len()) && !base.is_empty() {
        return Err(HarnessError::Invalid(format!(
            "{} scaling laws for {} resonators",
            laws.len(),
            base.len()
        )));
    }
    base.iter()
        .enumerate()
        .map(|(k, r)| {
            let law = laws[if laws.len() == 1 { 0 } else { k }];
            let d = window_scale(law, eps)?;
            Ok(ResonatorSpec::new(r.center, eps, r.ell, d))
        })
        .collect()
}

/// Sweep the schedule. Row failures are recorded and the sweep continues.
pub fn run_convergence(
    outer: &OuterSpec,
    base: &[ResonatorSpec],
    laws: &[ScalingLaw],
    schedule: &[f64],
    count: usize,
    lambda_max: f64,
    cfg: &SolveConfig,
) -> Result<ConvergenceRun, HarnessError> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(HarnessError::Invalid("schedule must be nonempty and strictly decreasing".into()));
    }
    if count == 0 {
        return Err(HarnessError::Invalid("count must be at least 1".into()));
    }
    if laws.is_empty() && !base.is_empty() {
        return Err(HarnessError::Invalid("no scaling law given".into()));
    }
    let (w, h) = match *outer {
        OuterSpec::Rectangle { width, height } => (width, height),
        _ => return Err(HarnessError::Invalid("convergence runs need a rectangular outer domain".into())),
    };
    outer.validate()?;
    let gamma_lim: Vec<f64> = (0..base.len())
        .map(|k| gamma_limit(&laws[if laws.len() == 1 { 0 } else { k }], None))
        .collect::<Result<_, _>>()?;
    let bulk = model::rect_dirichlet_eigs(w, h, count.max(1) + base.len())?;
    let limit = model::limit_spectrum(&bulk, &gamma_lim)?.truncate(lambda_max);
    if limit.is_empty() {
        return Err(HarnessError::Invalid(format!("no limit eigenvalue below {lambda_max}")));
    }

    let rows: Vec<ConvergenceRow> = schedule
        .par_iter()
        .map(|&eps| {
            let d: Vec<f64> = scaled_resonators(base, laws, eps)
                .map(|rs| rs.iter().map(|r| r.d).collect())
                .unwrap_or_default();
            match convergence_row(outer, base, laws, eps, count, &limit, &gamma_lim, cfg) {
                Ok(row) => row,
                Err(e) => ConvergenceRow::failed(eps, d, e.to_string()),
            }
        })
        .collect();
    Ok(ConvergenceRun {
        outer: *outer,
        base: base.to_vec(),
        laws: laws.to_vec(),
        schedule: schedule.to_vec(),
        count,
        lambda_max,
        limit,
        gamma_limit: gamma_lim,
        rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn convergence_row(
    outer: &OuterSpec,
    base: &[ResonatorSpec],
    laws: &[ScalingLaw],
    eps: f64,
    count: usize,
    limit: &SpectrumSet,
    gamma_lim: &[f64],
    cfg: &SolveConfig,
) -> Result<ConvergenceRow, HarnessError> {
    let resonators = scaled_resonators(base, laws, eps)?;
    let domain = build_domain(*outer, resonators)?;
    let mesh = triangulate_with(&domain, &cfg.grading(&domain), &MeshOptions::default())?;
    let (k, m) = assemble(&mesh)?;
    let (k, m, dofs) = apply_dirichlet(&k, &m, &mesh)?;
    let eigen = EigenConfig { keep_vectors: true, ..cfg.eigen };
    let spectrum = match smallest_eigenpairs_with(&k, &m, count, cfg.eig_tol, &eigen) {
        Ok(s) => s,
        Err(e) => {
            // keep the mesh data and the unconverged values for the audit trail
            let mut row = ConvergenceRow::failed(eps, domain.resonators.iter().map(|r| r.d).collect(), e.to_string());
            row.h_min = mesh.h_min;
            row.h_max = mesh.h_max;
            row.n_dofs = dofs.reduced_to_full.len();
            if let NumericsError::EigenNoConvergence { partial, .. } = &e {
                row.eigenvalues = partial.eigenvalues.clone();
                row.residual_max = partial.max_residual();
            }
            return Ok(row);
        }
    };
    let solve = DomainSolve { mesh, dofs, spectrum };
    let loc = localization(&solve.spectrum, &solve.mesh, &domain, &solve.dofs)?;
    let gamma_eps: Vec<f64> = domain
        .resonators
        .par_iter()
        .map(|r| capacity::gamma_eps_for(r, GammaMethod::Fem(None)))
        .collect::<Result<_, _>>()?;
    let computed = SpectrumSet::new(solve.spectrum.eigenvalues.clone(), limit.cutoff)?.truncate(limit.cutoff);
    let td = model::tilde_hausdorff(&computed, limit)?;
    let gamma_err: f64 = gamma_eps.iter().zip(gamma_lim).map(|(a, b)| (a - b).abs()).sum();
    let rate = model::rate_factor(RateFactor { n: 2, eps, gamma_err })?;
    Ok(ConvergenceRow {
        eps,
        d: domain.resonators.iter().map(|r| r.d).collect(),
        gamma_eps,
        eigenvalues: solve.spectrum.eigenvalues.clone(),
        dtilde: td.value,
        truncation_bound: td.truncation_bound,
        rate_factor: rate,
        gamma_err,
        h_min: solve.mesh.h_min,
        h_max: solve.mesh.h_max,
        residual_max: solve.spectrum.max_residual(),
        n_dofs: solve.n_dofs(),
        localization: Some(loc),
        status: RowStatus::Ok,
    })
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.12e}")
    } else {
        String::new()
    }
}

impl ConvergenceRun {
    pub fn to_csv(&self) -> String {
        let m = self.base.len();
        let mut s = String::from("eps");
        for k in 1..=m {
            let _ = write!(s, ",d_{k}");
        }
        for k in 1..=m {
            let _ = write!(s, ",gamma_eps_{k}");
        }
        for j in 1..=self.count {
            let _ = write!(s, ",lambda_{j}");
        }
        s.push_str(",dtilde,rate_factor,h_min,residual_max,h_max,n_dofs,status\n");
        for row in &self.rows {
            let mut cells = vec![fmt_num(row.eps)];
            cells.extend((0..m).map(|k| row.d.get(k).map_or(String::new(), |&v| fmt_num(v))));
            cells.extend((0..m).map(|k| row.gamma_eps.get(k).map_or(String::new(), |&v| fmt_num(v))));
            cells.extend((0..self.count).map(|j| row.eigenvalues.get(j).map_or(String::new(), |&v| fmt_num(v))));
            cells.extend([row.dtilde, row.rate_factor, row.h_min, row.residual_max, row.h_max].map(fmt_num));
            cells.push(row.n_dofs.to_string());
            cells.push(match &row.status {
                RowStatus::Ok => "ok".into(),
                RowStatus::Failed(why) => format!("\"failed: {}\"", why.replace('"', "'")),
            });
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Count of steps along the schedule where `d̃_H` went up.
    pub fn dtilde_increases(&self) -> usize {
        let d: Vec<f64> = self.rows.iter().filter(|r| r.is_ok()).map(|r| r.dtilde).collect();
        d.windows(2).filter(|w| w[1] > w[0]).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
    pub rows_used: usize,
}

/// Least-squares slope of `log d̃_H` against `log rate_factor`.
pub fn fit_rate(run: &ConvergenceRun, n: u32) -> Result<RateFit, HarnessError> {
    let pts: Vec<(f64, f64)> = run
        .rows
        .iter()
        .filter(|r| r.is_ok() && r.dtilde > 0.0)
        .map(|r| {
            let rf = model::rate_factor(RateFactor { n, eps: r.eps, gamma_err: r.gamma_err })?;
            Ok((rf.ln(), r.dtilde.ln()))
        })
        .collect::<Result<_, HarnessError>>()?;
    fit_line(&pts)
}

pub fn fit_line(pts: &[(f64, f64)]) -> Result<RateFit, HarnessError> {
    if pts.len() < 3 {
        return Err(HarnessError::InsufficientData { need: 3, got: pts.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(HarnessError::InsufficientData { need: 2, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Ok(RateFit {
        slope,
        intercept,
        residual,
        rows_used: pts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub d_grid: Vec<f64>,
    pub threshold: f64,
    /// Eigenvalues per grid point.
    pub eigenvalues: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    /// `(grid step, eigen index, drop)` wherever an eigenvalue below the
    /// threshold decreased by more than the allowance.
    pub violations: Vec<(usize, usize, f64)>,
}

/// Eigenvalues of one resonator along an increasing grid of window scales,
/// all computed on a single mesh that carries every window endpoint, so the
/// discrete spaces are nested exactly.
pub fn window_monotonicity(
    outer: &OuterSpec,
    resonator: &ResonatorSpec,
    d_grid: &[f64],
    count: usize,
    threshold: f64,
    cfg: &SolveConfig,
) -> Result<MonotonicityReport, HarnessError> {
    if d_grid.len() < 2 || d_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HarnessError::Invalid("window grid must be increasing with at least two points".into()));
    }
    let widths: Vec<f64> = d_grid.iter().map(|d| resonator.ell * d).collect();
    let min_h = widths[0] * cfg.tip_fraction;
    let grading = GradingSpec {
        base_h: cfg.base_h,
        min_h,
        ratio: cfg.ratio,
    };
    let solves: Vec<Result<Spectrum, HarnessError>> = d_grid
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let r = ResonatorSpec::new(resonator.center, resonator.eps, resonator.ell, d);
            let domain = build_domain(*outer, vec![r])?;
            let extra: Vec<f64> = widths.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &w)| w).collect();
            let options = MeshOptions {
                extra_halfwidths: vec![extra],
                seal_windows: false,
            };
            Ok(solve_domain_graded(&domain, &grading, cfg, count, &options)?.spectrum)
        })
        .collect();
    let spectra: Vec<Spectrum> = solves.into_iter().collect::<Result<_, _>>()?;
    let mut violations = Vec::new();
    for (step, w) in spectra.windows(2).enumerate() {
        let allow = 2.0 * w[0].max_residual().max(w[1].max_residual());
        for j in 0..count {
            let (a, b) = (w[0].eigenvalues[j], w[1].eigenvalues[j]);
            if a < threshold && b < a - allow * a {
                violations.push((step, j, a - b));
            }
        }
    }
    Ok(MonotonicityReport {
        d_grid: d_grid.to_vec(),
        threshold,
        residuals: spectra.iter().map(|s| s.max_residual()).collect(),
        eigenvalues: spectra.into_iter().map(|s| s.eigenvalues).collect(),
        violations,
    })
}

/// Static line plot. Series are `(name, points)`; axes may be logarithmic.
pub fn svg_plot(title: &str, series: &[(String, Vec<(f64, f64)>)], log_x: bool, log_y: bool) -> String {
    let tx = |v: f64| if log_x { v.ln() } else { v };
    let ty = |v: f64| if log_y { v.ln() } else { v };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .filter(|p| p.0.is_finite() && p.1.is_finite() && (!log_x || p.0 > 0.0) && (!log_y || p.1 > 0.0))
        .map(|p| (tx(p.0), ty(p.1)))
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0, 1.0, 0.0, 1.0);
    if !pts.is_empty() {
        x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    }
    if x1 - x0 < 1e-300 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-300 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let sx = |v: f64| pad + (v - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - (v - y0) / (y1 - y0) * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        title
    );
    let _ = writeln!(
        s,
        r##"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="#000"/>"##,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let label = |v: f64, log: bool| if log { format!("{:.3e}", v.exp()) } else { format!("{v:.4}") };
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-size="10">{}</text>"#, h - pad + 15.0, label(x0, log_x));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
        w - pad,
        h - pad + 15.0,
        label(x1, log_x)
    );
    let _ = writeln!(s, r#"<text x="5" y="{}" font-size="10">{}</text>"#, h - pad, label(y0, log_y));
    let _ = writeln!(s, r#"<text x="5" y="{}" font-size="10">{}</text>"#, pad + 4.0, label(y1, log_y));
    for (i, (name, data)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let path: Vec<String> = data
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite() && (!log_x || p.0 > 0.0) && (!log_y || p.1 > 0.0))
            .map(|p| format!("{:.2},{:.2}", sx(tx(p.0)), sy(ty(p.1))))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
            for p in &path {
                let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{c}"/>"#);
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{c}">{}</text>"#,
            w - pad + 4.0,
            pad + 14.0 * (i as f64 + 1.0),
            name
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Parsed numeric columns of a run CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<CsvTable, HarnessError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| HarnessError::Invalid("empty CSV".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let rows = lines
            .map(|l| {
                l.split(',')
                    .take(header.len())
                    .map(|c| c.trim().parse::<f64>().ok())
                    .collect()
            })
            .collect();
        Ok(CsvTable { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r.get(i).copied().flatten()).collect())
    }
}

/// Eigenvalue trajectories against ε and the log-log rate plot.
pub fn report_svgs(csv: &str) -> Result<(String, String), HarnessError> {
    let table = CsvTable::parse(csv)?;
    let eps = table
        .column("eps")
        .ok_or_else(|| HarnessError::Invalid("CSV lacks an eps column".into()))?;
    let mut series = Vec::new();
    for name in table.header.iter().filter(|h| h.starts_with("lambda_")) {
        let col = table.column(name).unwrap_or_default();
        let pts = eps
            .iter()
            .zip(&col)
            .filter_map(|(e, l)| Some((((*e)?), (*l)?)))
            .collect();
        series.push((name.clone(), pts));
    }
    let traj = svg_plot("eigenvalues against eps", &series, false, false);
    let rate: Vec<(f64, f64)> = match (table.column("rate_factor"), table.column("dtilde")) {
        (Some(r), Some(d)) => r.iter().zip(&d).filter_map(|(r, d)| Some(((*r)?, (*d)?))).collect(),
        _ => Vec::new(),
    };
    let rate_svg = svg_plot("dtilde against rate factor (log-log)", &[("dtilde".into(), rate)], true, true);
    Ok((traj, rate_svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(dtilde: impl Fn(f64) -> f64) -> ConvergenceRun {
        let limit = SpectrumSet::new(vec![1.0], 1.0).unwrap();
        let rows = [0.4, 0.3, 0.2, 0.1]
            .iter()
            .map(|&eps| {
                let rf = model::rate_factor(RateFactor { n: 2, eps, gamma_err: 0.0 }).unwrap();
                ConvergenceRow {
                    dtilde: dtilde(rf),
                    rate_factor: rf,
                    gamma_err: 0.0,
                    status: RowStatus::Ok,
                    ..ConvergenceRow::failed(eps, vec![], String::new())
                }
            })
            .collect();
        ConvergenceRun {
            outer: OuterSpec::unit_square(),
            base: vec![],
            laws: vec![],
            schedule: vec![0.4, 0.3, 0.2, 0.1],
            count: 1,
            lambda_max: 1.0,
            limit,
            gamma_limit: vec![],
            rows,
        }
    }

    #[test]
    fn slope_of_exact_rate_is_one() {
        let fit = fit_rate(&synthetic(|r| r), 2).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        let fit = fit_rate(&synthetic(|_| 0.3), 2).unwrap();
        assert!(fit.slope.abs() < 1e-12);
    }

    #[test]
    fn short_run_has_no_fit() {
        let mut run = synthetic(|r| r);
        run.rows.truncate(2);
        assert!(matches!(fit_rate(&run, 2), Err(HarnessError::InsufficientData { got: 2, .. })));
    }

    #[test]
    fn gamma_limit_inverts_the_planar_law() {
        let g = gamma_limit(&ScalingLaw::planar(8.0 / std::f64::consts::PI), None).unwrap();
        assert!((g - 4.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_into_plots() {
        let run = synthetic(|r| r);
        let csv = run.to_csv();
        let table = CsvTable::parse(&csv).unwrap();
        assert_eq!(table.rows.len(), 4);
        let (a, b) = report_svgs(&csv).unwrap();
        assert!(a.starts_with("<svg") && b.contains("polyline"));
    }
}
