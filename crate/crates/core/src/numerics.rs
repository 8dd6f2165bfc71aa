//! P1 assembly, Dirichlet elimination, Jacobi-preconditioned CG and a LOBPCG
//! eigensolver for the generalized problem `K u = λ M u`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::mesh::{NodeTag, SlitMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("degenerate element {triangle} with signed area {area:e}")]
    DegenerateElement { triangle: usize, area: f64 },
    #[error("every degree of freedom was eliminated")]
    EmptySystem,
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("eigensolver did not converge after {iterations} iterations (worst residual {residual:e})")]
    EigenNoConvergence {
        iterations: usize,
        residual: f64,
        partial: Box<Spectrum>,
    },
    #[error("matrix is not positive definite (curvature {curvature:e})")]
    NotPositiveDefinite { curvature: f64 },
    #[error("requested {count} eigenpairs from a system of dimension {n}")]
    CountTooLarge { count: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Symmetric sparse matrix in compressed-row form. Both triangles are stored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseSym {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub symmetric: bool,
}

impl SparseSym {
    /// Build from triplets; duplicates are summed in a fixed order and exact
    /// zeros dropped.
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>) -> SparseSym {
        trip.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(trip.len());
        let mut values: Vec<f64> = Vec::with_capacity(trip.len());
        let mut rows = Vec::with_capacity(trip.len());
        let mut i = 0;
        while i < trip.len() {
            let (r, c) = (trip[i].0, trip[i].1);
            let mut v = 0.0;
            while i < trip.len() && trip[i].0 == r && trip[i].1 == c {
                v += trip[i].2;
                i += 1;
            }
            if v != 0.0 {
                rows.push(r);
                col_idx.push(c);
                values.push(v);
            }
        }
        for &r in &rows {
            row_ptr[r + 1] += 1;
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut m = SparseSym {
            n,
            row_ptr,
            col_idx,
            values,
            symmetric: false,
        };
        m.symmetric = m.check_symmetric();
        m
    }

    pub fn identity(n: usize) -> SparseSym {
        SparseSym::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn diagonal(d: &[f64]) -> SparseSym {
        SparseSym::from_triplets(d.len(), d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let cols = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
        match cols.binary_search(&c) {
            Ok(p) => self.values[self.row_ptr[r] + p],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    fn check_symmetric(&self) -> bool {
        (0..self.n).all(|r| self.row(r).all(|(c, v)| self.get(c, r) == v))
    }

    /// `y = A x`
    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        let rp = &self.row_ptr;
        let ci = &self.col_idx;
        let va = &self.values;
        let kernel = |(r, out): (usize, &mut f64)| {
            let mut s = 0.0;
            for p in rp[r]..rp[r + 1] {
                s += va[p] * x[ci[p]];
            }
            *out = s;
        };
        if self.n > 50_000 {
            y.par_iter_mut().enumerate().for_each(kernel);
        } else {
            y.iter_mut().enumerate().for_each(kernel);
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_into(x, &mut y);
        y
    }

    /// `xᵀ A y`
    pub fn form(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.n)
            .map(|r| x[r] * self.row(r).map(|(c, v)| v * y[c]).sum::<f64>())
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                d[(r, c)] = v;
            }
        }
        d
    }

    /// Principal submatrix on `keep` (indices in ascending order).
    pub fn restrict(&self, keep: &[usize]) -> SparseSym {
        let mut map = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let mut trip = Vec::new();
        for (new_r, &r) in keep.iter().enumerate() {
            for (c, v) in self.row(r) {
                if map[c] != usize::MAX {
                    trip.push((new_r, map[c], v));
                }
            }
        }
        SparseSym::from_triplets(keep.len(), trip)
    }

    /// MatrixMarket coordinate format, lower triangle, 1-based.
    pub fn to_matrix_market(&self) -> String {
        let lower: Vec<(usize, usize, f64)> = (0..self.n)
            .flat_map(|r| self.row(r).filter(move |&(c, _)| c <= r).map(move |(c, v)| (r, c, v)))
            .collect();
        let mut s = String::from("%%MatrixMarket matrix coordinate real symmetric\n");
        let _ = writeln!(s, "{} {} {}", self.n, self.n, lower.len());
        for (r, c, v) in lower {
            let _ = writeln!(s, "{} {} {:.17e}", r + 1, c + 1, v);
        }
        s
    }
}

/// Element stiffness and mass of a P1 triangle.
pub fn element_matrices(p: [[f64; 2]; 3]) -> ([[f64; 3]; 3], [[f64; 3]; 3], f64) {
    let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
    // gradients of barycentric coordinates times 2·area
    let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
    let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
    let mut k = [[0.0; 3]; 3];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
            m[i][j] = area / 12.0 * if i == j { 2.0 } else { 1.0 };
        }
    }
    (k, m, area)
}

type ElementPair = ([[f64; 3]; 3], [[f64; 3]; 3]);

/// Assemble P1 stiffness `K` and mass `M` over all triangles. Duplicated slit
/// nodes are separate unknowns.
pub fn assemble(mesh: &SlitMesh) -> Result<(SparseSym, SparseSym), NumericsError> {
    let elems: Vec<Result<ElementPair, NumericsError>> = mesh
        .triangles
        .par_iter()
        .enumerate()
        .map(|(ti, t)| {
            let p = t.map(|i| [mesh.nodes[i].x, mesh.nodes[i].y]);
            let (k, m, area) = element_matrices(p);
            if !(area > 0.0) {
                return Err(NumericsError::DegenerateElement { triangle: ti, area });
            }
            Ok((k, m))
        })
        .collect();
    let n = mesh.nodes.len();
    let mut tk = Vec::with_capacity(9 * elems.len());
    let mut tm = Vec::with_capacity(9 * elems.len());
    for (t, e) in mesh.triangles.iter().zip(elems) {
        let (k, m) = e?;
        for i in 0..3 {
            for j in 0..3 {
                tk.push((t[i], t[j], k[i][j]));
                tm.push((t[i], t[j], m[i][j]));
            }
        }
    }
    let (k, m) = rayon::join(|| SparseSym::from_triplets(n, tk), || SparseSym::from_triplets(n, tm));
    Ok((k, m))
}

/// Reduced/full index correspondence after Dirichlet elimination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DofMap {
    pub reduced_to_full: Vec<usize>,
    pub full_to_reduced: Vec<Option<usize>>,
}

impl DofMap {
    /// Extend a reduced vector by zeros on eliminated nodes.
    pub fn expand(&self, u: &[f64]) -> Vec<f64> {
        self.full_to_reduced
            .iter()
            .map(|r| r.map_or(0.0, |i| u[i]))
            .collect()
    }
}

/// Drop the rows and columns of `DirichletBoundary` nodes.
pub fn apply_dirichlet(
    k: &SparseSym,
    m: &SparseSym,
    mesh: &SlitMesh,
) -> Result<(SparseSym, SparseSym, DofMap), NumericsError> {
    let fixed: Vec<bool> = mesh.nodes.iter().map(|n| n.tag == NodeTag::DirichletBoundary).collect();
    eliminate(k, m, &fixed)
}

/// Eliminate every index flagged in `fixed`.
pub fn eliminate(
    k: &SparseSym,
    m: &SparseSym,
    fixed: &[bool],
) -> Result<(SparseSym, SparseSym, DofMap), NumericsError> {
    if k.n != fixed.len() || m.n != fixed.len() {
        return Err(NumericsError::Dimension(format!(
            "matrices of order {} and {} against {} nodes",
            k.n,
            m.n,
            fixed.len()
        )));
    }
    let keep: Vec<usize> = (0..fixed.len()).filter(|&i| !fixed[i]).collect();
    if keep.is_empty() {
        return Err(NumericsError::EmptySystem);
    }
    let mut full_to_reduced = vec![None; fixed.len()];
    for (r, &f) in keep.iter().enumerate() {
        full_to_reduced[f] = Some(r);
    }
    let (kr, mr) = if keep.len() == fixed.len() {
        (k.clone(), m.clone())
    } else {
        (k.restrict(&keep), m.restrict(&keep))
    };
    Ok((
        kr,
        mr,
        DofMap {
            reduced_to_full: keep,
            full_to_reduced,
        },
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a CG run.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradients from a zero start.
pub fn pcg(a: &SparseSym, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<CgOutcome, NumericsError> {
    if b.len() != a.n {
        return Err(NumericsError::Dimension(format!("rhs of length {} for order {}", b.len(), a.n)));
    }
    let inv_d: Vec<f64> = a
        .diag()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let n = a.n;
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok(CgOutcome { x, iterations: 0, rel_residual: 0.0, converged: true });
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.mul_into(&p, &mut ap);
        let curv = dot(&p, &ap);
        if !(curv > 0.0) {
            return Err(NumericsError::NotPositiveDefinite { curvature: curv });
        }
        let alpha = rz / curv;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = norm(&r) / bn;
        if rel <= rel_tol {
            return Ok(CgOutcome { x, iterations: it, rel_residual: rel, converged: true });
        }
        for i in 0..n {
            z[i] = r[i] * inv_d[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(CgOutcome { x, iterations: max_iter, rel_residual: rel, converged: false })
}

/// Solve `A x = b` to `‖Ax − b‖ ≤ rel_tol·‖b‖` with the default cap of `20·n` iterations.
pub fn solve_spd(a: &SparseSym, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, NumericsError> {
    solve_spd_capped(a, b, rel_tol, 20 * a.n.max(1))
}

pub fn solve_spd_capped(
    a: &SparseSym,
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, NumericsError> {
    let out = pcg(a, b, rel_tol, max_iter)?;
    if out.converged {
        Ok(out.x)
    } else {
        Err(NumericsError::NoConvergence {
            iterations: out.iterations,
            residual: out.rel_residual,
        })
    }
}

/// Multiple of the rounding level accepted in place of an unreachable tolerance.
pub const ROUNDOFF_FACTOR: f64 = 4.0;

/// Sorted eigenpairs of `K u = λ M u`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    /// `‖K u − λ M u‖_{M⁻¹} / max(|λ|, floor)` with `‖u‖_M = 1`.
    pub residuals: Vec<f64>,
    /// Rounding level of each residual; a pair counts as converged once its
    /// residual is below `max(tol, ROUNDOFF_FACTOR · floor)`.
    pub floors: Vec<f64>,
    /// M-orthonormal eigenvectors on the reduced degrees of freedom.
    #[serde(skip)]
    pub eigenvectors: Option<Vec<Vec<f64>>>,
    pub iterations: usize,
    pub seed: u64,
}

impl Spectrum {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    /// Largest tolerance actually enforced for a request of `tol`.
    pub fn effective_tolerance(&self, tol: f64) -> f64 {
        self.floors.iter().fold(tol, |a, f| a.max(ROUNDOFF_FACTOR * f))
    }

    pub fn meets(&self, tol: f64) -> bool {
        self.residuals.len() == self.eigenvalues.len()
            && self
                .residuals
                .iter()
                .zip(&self.floors)
                .all(|(r, f)| *r <= tol.max(ROUNDOFF_FACTOR * f))
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Eigensolver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenConfig {
    pub seed: u64,
    pub max_iter: usize,
    /// Extra block columns beyond the requested count.
    pub padding: usize,
    /// Relative tolerance of the inner preconditioner solves.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Systems up to this order are solved densely.
    pub dense_limit: usize,
    pub keep_vectors: bool,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig {
            seed: 0x5eed,
            max_iter: 300,
            padding: 5,
            inner_tol: 1e-2,
            inner_max_iter: 400,
            dense_limit: 300,
            keep_vectors: true,
        }
    }
}

/// Smallest `count` eigenpairs with the default configuration.
pub fn smallest_eigenpairs(
    k: &SparseSym,
    m: &SparseSym,
    count: usize,
    tol: f64,
) -> Result<Spectrum, NumericsError> {
    smallest_eigenpairs_with(k, m, count, tol, &EigenConfig::default())
}

pub fn smallest_eigenpairs_with(
    k: &SparseSym,
    m: &SparseSym,
    count: usize,
    tol: f64,
    cfg: &EigenConfig,
) -> Result<Spectrum, NumericsError> {
    let n = k.n;
    if m.n != n {
        return Err(NumericsError::Dimension(format!("K of order {n}, M of order {}", m.n)));
    }
    if count == 0 {
        return Err(NumericsError::CountTooLarge { count, n });
    }
    if count > n {
        return Err(NumericsError::CountTooLarge { count, n });
    }
    let block = (count + cfg.padding).min(n);
    if n <= cfg.dense_limit || 3 * block >= n {
        return dense_eigenpairs(k, m, count, tol, cfg);
    }
    lobpcg(k, m, count, block, tol, cfg)
}

fn dense_eigenpairs(
    k: &SparseSym,
    m: &SparseSym,
    count: usize,
    tol: f64,
    cfg: &EigenConfig,
) -> Result<Spectrum, NumericsError> {
    let kd = k.to_dense();
    let md = m.to_dense();
    let chol = md
        .clone()
        .cholesky()
        .ok_or(NumericsError::NotPositiveDefinite { curvature: f64::NAN })?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or(NumericsError::NotPositiveDefinite { curvature: 0.0 })?;
    let c = &linv * &kd * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..k.n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lt_inv = linv.transpose();
    let mut x = DMatrix::zeros(k.n, count);
    let mut vals = Vec::with_capacity(count);
    for (j, &idx) in order.iter().take(count).enumerate() {
        let v = &lt_inv * eig.eigenvectors.column(idx);
        x.set_column(j, &v);
        vals.push(eig.eigenvalues[idx]);
    }
    let (residuals, floors) = residual_norms(k, m, &x, &vals, 1e-12).into_iter().unzip();
    let spectrum = Spectrum {
        eigenvalues: vals,
        residuals,
        floors,
        eigenvectors: cfg.keep_vectors.then(|| columns(&x)),
        iterations: 0,
        seed: cfg.seed,
    };
    let worst = spectrum.max_residual();
    if !spectrum.meets(tol) {
        return Err(NumericsError::EigenNoConvergence {
            iterations: 0,
            residual: worst,
            partial: Box::new(spectrum),
        });
    }
    Ok(spectrum)
}

fn columns(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.ncols()).map(|j| x.column(j).iter().copied().collect()).collect()
}

fn apply_cols(a: &SparseSym, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        a.mul_into(x.column(j).as_slice(), y.column_mut(j).as_mut_slice());
    }
    y
}

/// M-orthonormalize the columns of `s`, dropping near-dependent directions.
fn svqb(m: &SparseSym, s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut s = s.clone();
    for _ in 0..2 {
        let ms = apply_cols(m, &s);
        let g = s.transpose() * &ms;
        let d: Vec<f64> = (0..g.nrows()).map(|i| 1.0 / g[(i, i)].max(1e-300).sqrt()).collect();
        let dm = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d));
        let gs = &dm * g * &dm;
        let gs = (&gs + gs.transpose()) * 0.5;
        let eig = SymmetricEigen::new(gs);
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > 1e-12 * top)
            .collect();
        if keep.is_empty() {
            return None;
        }
        let mut q = DMatrix::zeros(g_dim(&eig), keep.len());
        for (c, &i) in keep.iter().enumerate() {
            let col = eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt();
            q.set_column(c, &col);
        }
        let min = keep.iter().map(|&i| eig.eigenvalues[i]).fold(f64::INFINITY, f64::min);
        s = &s * (&dm * q);
        if min > 1e-6 * top {
            break;
        }
    }
    Some(s)
}

fn g_dim(e: &SymmetricEigen<f64, nalgebra::Dyn>) -> usize {
    e.eigenvalues.len()
}

/// `‖K x − θ M x‖_{M⁻¹}` per column, relative to `max(|θ|, floor)`, paired with
/// the rounding level `u ‖|K||x|‖_{M⁻¹}` on the same scale (lumped `M⁻¹`).
fn residual_norms(k: &SparseSym, m: &SparseSym, x: &DMatrix<f64>, theta: &[f64], floor_rel: f64) -> Vec<(f64, f64)> {
    let md = m.diag();
    let scale = theta.iter().fold(0.0f64, |a, t| a.max(t.abs()));
    let floor = (floor_rel * scale).max(1e-300);
    (0..theta.len())
        .into_par_iter()
        .map(|j| {
            let xj = x.column(j);
            let kx = k.mul(xj.as_slice());
            let mx = m.mul(xj.as_slice());
            let r: Vec<f64> = kx.iter().zip(&mx).map(|(a, b)| a - theta[j] * b).collect();
            let mnorm = dot(xj.as_slice(), &mx).sqrt().max(1e-300);
            let minv_r = pcg(m, &r, 1e-10, 20 * m.n.max(1)).map(|o| o.x).unwrap_or_else(|_| r.clone());
            let denom = mnorm * theta[j].abs().max(floor);
            let noise: f64 = (0..k.n)
                .map(|i| {
                    let s: f64 = k.row(i).map(|(c, v)| (v * xj[c]).abs()).sum();
                    s * s / md[i].max(1e-300)
                })
                .sum();
            (dot(&r, &minv_r).max(0.0).sqrt() / denom, f64::EPSILON * noise.sqrt() / denom)
        })
        .collect()
}

fn lobpcg(
    k: &SparseSym,
    m: &SparseSym,
    count: usize,
    block: usize,
    tol: f64,
    cfg: &EigenConfig,
) -> Result<Spectrum, NumericsError> {
    let n = k.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = DMatrix::from_fn(n, block, |_, _| rng.gen::<f64>() - 0.5);
    // spectral scale of the pencil, insensitive to a few tiny elements
    let trace_ratio = k.diag().iter().sum::<f64>() / m.diag().iter().sum::<f64>().max(1e-300);
    let mut p: Option<DMatrix<f64>> = None;
    let mut residuals = vec![f64::INFINITY; count];
    let mut floors = vec![0.0; count];

    // `q` must be M-orthonormal
    let rayleigh_ritz = |q: &DMatrix<f64>| -> (DMatrix<f64>, Vec<f64>) {
        let kq = apply_cols(k, q);
        let a = q.transpose() * kq;
        let a = (&a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let b = block.min(order.len());
        let mut c = DMatrix::zeros(q.ncols(), b);
        let mut th = Vec::with_capacity(b);
        for (col, &i) in order.iter().take(b).enumerate() {
            c.set_column(col, &eig.eigenvectors.column(i));
            th.push(eig.eigenvalues[i]);
        }
        (q * c, th)
    };

    let q0 = svqb(m, &x).ok_or(NumericsError::NotPositiveDefinite { curvature: 0.0 })?;
    let (x0, th0) = rayleigh_ritz(&q0);
    x = x0;
    let mut theta = th0;
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let b = x.ncols();
        // residual block
        let kx = apply_cols(k, &x);
        let mx = apply_cols(m, &x);
        let mut r = kx.clone();
        for (j, &t) in theta.iter().enumerate().take(b) {
            r.column_mut(j).axpy(-t, &mx.column(j), 1.0);
        }
        (residuals, floors) = residual_norms(k, m, &x.columns(0, count.min(b)).into_owned(), &theta[..count.min(b)], 1e-3)
            .into_iter()
            .unzip();
        let limit = |j: usize| tol.max(ROUNDOFF_FACTOR * floors[j]);
        if residuals.len() == count && (0..count).all(|j| residuals[j] <= limit(j)) {
            break;
        }
        // precondition the active columns
        let shift = (0.1 * theta[count.min(b) - 1].abs()).max(1e-6 * trace_ratio);
        let shifted = shifted_matrix(k, m, shift);
        let active: Vec<usize> = (0..b)
            .filter(|&j| j >= count || residuals[j] > 0.1 * limit(j))
            .collect();
        let w_cols: Vec<Vec<f64>> = active
            .par_iter()
            .map(|&j| {
                let rj: Vec<f64> = r.column(j).iter().copied().collect();
                pcg(&shifted, &rj, cfg.inner_tol, cfg.inner_max_iter)
                    .map(|o| o.x)
                    .unwrap_or(rj)
            })
            .collect();
        let mut w = DMatrix::zeros(n, w_cols.len());
        for (c, col) in w_cols.iter().enumerate() {
            w.column_mut(c).copy_from_slice(col);
        }
        let mut extra = w;
        if let Some(pp) = &p {
            let mut both = DMatrix::zeros(n, extra.ncols() + pp.ncols());
            both.columns_mut(0, extra.ncols()).copy_from(&extra);
            both.columns_mut(extra.ncols(), pp.ncols()).copy_from(pp);
            extra = both;
        }
        // project out the current block before orthonormalizing the search directions
        for _ in 0..2 {
            let coef = mx.transpose() * &extra;
            extra -= &x * coef;
        }
        let s = match svqb(m, &extra) {
            Some(q) => {
                let mut s = DMatrix::zeros(n, b + q.ncols());
                s.columns_mut(0, b).copy_from(&x);
                s.columns_mut(b, q.ncols()).copy_from(&q);
                s
            }
            None => x.clone(),
        };
        let (xn, thn) = rayleigh_ritz(&s);
        // damp rough components on tiny elements that the Ritz step cannot see
        let (xn, thn) = match svqb(m, &jacobi_smooth(k, m, &xn, &thn, 2)) {
            Some(q) if q.ncols() == xn.ncols() => rayleigh_ritz(&q),
            _ => (xn, thn),
        };
        if xn.ncols() < count {
            break;
        }
        // conjugate direction: new iterate with the old block projected out in M
        let coef = mx.transpose() * &xn;
        let mut pn = &xn - &x * coef;
        for j in 0..pn.ncols() {
            let nrm = pn.column(j).norm();
            if nrm > 0.0 {
                pn.column_mut(j).scale_mut(1.0 / nrm);
            }
        }
        p = Some(pn);
        x = xn;
        theta = thn;
    }
    let c = count.min(x.ncols());
    let spectrum = Spectrum {
        eigenvalues: theta[..c].to_vec(),
        residuals: residuals.clone(),
        floors: floors.clone(),
        eigenvectors: cfg.keep_vectors.then(|| columns(&x.columns(0, c).into_owned())),
        iterations,
        seed: cfg.seed,
    };
    let worst = spectrum.max_residual();
    if c < count || !spectrum.meets(tol) {
        return Err(NumericsError::EigenNoConvergence {
            iterations,
            residual: worst,
            partial: Box::new(spectrum),
        });
    }
    Ok(spectrum)
}

/// Damped Jacobi sweeps on `(K − θ_j M) x_j = 0` for every column.
fn jacobi_smooth(k: &SparseSym, m: &SparseSym, x: &DMatrix<f64>, theta: &[f64], sweeps: usize) -> DMatrix<f64> {
    let kd = k.diag();
    let md = m.diag();
    let mut out = x.clone();
    let cols: Vec<Vec<f64>> = (0..x.ncols())
        .into_par_iter()
        .map(|j| {
            let th = theta[j];
            let mut v: Vec<f64> = x.column(j).iter().copied().collect();
            for _ in 0..sweeps {
                let kv = k.mul(&v);
                let mv = m.mul(&v);
                for i in 0..v.len() {
                    let d = kd[i] - th * md[i];
                    let d = if d > 0.5 * kd[i] { d } else { kd[i] };
                    if d > 0.0 {
                        v[i] -= 0.6 * (kv[i] - th * mv[i]) / d;
                    }
                }
            }
            v
        })
        .collect();
    for (j, c) in cols.iter().enumerate() {
        out.column_mut(j).copy_from_slice(c);
    }
    out
}

/// `K + σ M` on the common sparsity pattern.
fn shifted_matrix(k: &SparseSym, m: &SparseSym, sigma: f64) -> SparseSym {
    if k.row_ptr == m.row_ptr && k.col_idx == m.col_idx {
        let mut a = k.clone();
        for (v, mv) in a.values.iter_mut().zip(&m.values) {
            *v += sigma * mv;
        }
        return a;
    }
    let mut trip = Vec::with_capacity(k.nnz() + m.nnz());
    for r in 0..k.n {
        trip.extend(k.row(r).map(|(c, v)| (r, c, v)));
        trip.extend(m.row(r).map(|(c, v)| (r, c, sigma * v)));
    }
    SparseSym::from_triplets(k.n, trip)
}

/// Richardson extrapolation of a quantity converging like `h^order` from
/// values on meshes of size `h` and `h/2`.
pub fn richardson(coarse: f64, fine: f64, order: f64) -> f64 {
    let f = 2f64.powf(order);
    (f * fine - coarse) / (f - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, OuterSpec};
    use crate::mesh::{triangulate, GradingSpec};

    #[test]
    fn reference_element() {
        let (k, m, area) = element_matrices([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(area, 0.5);
        let ek = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k[i][j] - ek[i][j]).abs() < 1e-15);
                let em = if i == j { 2.0 } else { 1.0 } / 24.0;
                assert!((m[i][j] - em).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn diagonal_solve() {
        let a = SparseSym::diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let x = solve_spd(&a, &[1.0; 5], 1e-12).unwrap();
        for (i, v) in x.iter().enumerate() {
            assert!((v - 1.0 / (i as f64 + 1.0)).abs() < 1e-12);
        }
        let b = [0.3, -1.0, 2.0];
        assert_eq!(solve_spd(&SparseSym::identity(3), &b, 1e-14).unwrap(), b.to_vec());
    }

    #[test]
    fn indefinite_is_surfaced() {
        let a = SparseSym::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        let out = solve_spd(&a, &[1.0, -1.0], 1e-10);
        assert!(matches!(
            out,
            Err(NumericsError::NotPositiveDefinite { .. }) | Err(NumericsError::NoConvergence { .. })
        ));
    }

    #[test]
    fn decoupled_pencil() {
        let k = SparseSym::diagonal(&[2.0, 6.0]);
        let m = SparseSym::diagonal(&[1.0, 2.0]);
        let s = smallest_eigenpairs(&k, &m, 2, 1e-10).unwrap();
        assert!((s.eigenvalues[0] - 2.0).abs() < 1e-12);
        assert!((s.eigenvalues[1] - 3.0).abs() < 1e-12);
        assert!(matches!(
            smallest_eigenpairs(&k, &m, 3, 1e-10),
            Err(NumericsError::CountTooLarge { count: 3, n: 2 })
        ));
    }

    #[test]
    fn explicit_zeros_are_dropped() {
        let a = SparseSym::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 1.0), (0, 1, -1.0), (1, 1, 1.0)]);
        assert_eq!(a.nnz(), 2);
        assert!(a.symmetric);
    }

    #[test]
    fn lobpcg_matches_dense_on_mesh() {
        let dom = build_domain(OuterSpec::unit_square(), vec![]).unwrap();
        let mesh = triangulate(&dom, &GradingSpec::uniform(1.0 / 24.0)).unwrap();
        let (k, m) = assemble(&mesh).unwrap();
        let (k, m, _) = apply_dirichlet(&k, &m, &mesh).unwrap();
        let sparse = smallest_eigenpairs_with(&k, &m, 4, 1e-8, &EigenConfig { dense_limit: 0, ..Default::default() }).unwrap();
        let dense = smallest_eigenpairs_with(&k, &m, 4, 1e-8, &EigenConfig { dense_limit: 10_000, ..Default::default() }).unwrap();
        for (a, b) in sparse.eigenvalues.iter().zip(&dense.eigenvalues) {
            assert!((a - b).abs() < 1e-8 * b, "{a} vs {b}");
        }
        let vecs = sparse.eigenvectors.as_ref().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let g = m.form(&vecs[i], &vecs[j]);
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g - e).abs() < 1e-7, "gram[{i}][{j}] = {g}");
            }
        }
    }

    #[test]
    fn matrix_market_header() {
        let a = SparseSym::from_triplets(2, vec![(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0)]);
        let s = a.to_matrix_market();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("%%MatrixMarket matrix coordinate real symmetric"));
        assert_eq!(lines.next(), Some("2 2 3"));
    }

    #[test]
    fn richardson_removes_quadratic_term() {
        let f = |h: f64| 3.0 + 2.0 * h * h;
        assert!((richardson(f(0.1), f(0.05), 2.0) - 3.0).abs() < 1e-12);
    }
}
