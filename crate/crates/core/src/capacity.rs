//! Condenser capacity of a flat window.
//!
//! In two dimensions the capacity of a segment `D` is the Dirichlet energy of
//! the potential that equals one on `D` and vanishes on the unit circle around
//! its midpoint. The FEM path meshes the square `[-1, 1]²` with a quadtree that
//! grades toward the segment tips and then pulls the mesh radially onto the
//! disk, leaving the inner square `|x|∞ ≤ 1/2` untouched.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{Rect, ResonatorSpec, REFERENCE_AREA};
use crate::mesh::{GradingSpec, MeshError};
use crate::numerics::{element_matrices, pcg, NumericsError, SparseSym};
use crate::quadtree::{self, QuadTree, RefinePoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapacityError {
    #[error("window half-width {0} must lie in (0, 1)")]
    HalfWidth(f64),
    #[error("dimension {0} is not supported (need n >= 2)")]
    BadDimension(u32),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CapacityMethod {
    #[serde(rename = "FEM_BVP")]
    FemBvp,
    Asymptotic2D,
    Asymptotic3D,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityMesh {
    pub nodes: usize,
    pub triangles: usize,
    pub boundary_segments: usize,
    pub h_min: f64,
    pub h_max: f64,
    pub cg_iterations: usize,
    pub cg_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityResult {
    pub value: f64,
    pub method: CapacityMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh: Option<CapacityMesh>,
}

/// Discrete potential together with the mesh it lives on.
#[derive(Debug, Clone)]
pub struct CapacitySolution {
    pub result: CapacityResult,
    pub points: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub potential: Vec<f64>,
    pub stiffness: SparseSym,
}

impl CapacitySolution {
    /// Energy summed triangle by triangle from the potential gradients.
    pub fn elementwise_energy(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [p0, p1, p2] = t.map(|i| self.points[i]);
                let [u0, u1, u2] = t.map(|i| self.potential[i]);
                let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
                let gx = ((u1 - u0) * (p2[1] - p0[1]) - (u2 - u0) * (p1[1] - p0[1])) / det;
                let gy = ((u2 - u0) * (p1[0] - p0[0]) - (u1 - u0) * (p2[0] - p0[0])) / det;
                0.5 * det.abs() * (gx * gx + gy * gy)
            })
            .sum()
    }
}

/// Growth rate of the default capacity grading. With a self-similar size
/// field the relative energy error per dyadic annulus is fixed, so the log
/// tail of the potential needs a slower growth than the eigenvalue meshes.
pub const CAPACITY_RATIO: f64 = 1.2;

/// Grading used when none is supplied: base size 1/32 and tip size `a/8`.
pub fn default_grading(a: f64) -> GradingSpec {
    GradingSpec {
        base_h: 1.0 / 32.0,
        min_h: (a / 8.0).min(1.0 / 32.0),
        ratio: CAPACITY_RATIO,
    }
}

/// Map `[-1, 1]²` onto the unit disk; identity on `|x|∞ ≤ 1/2`.
pub fn square_to_disk(p: [f64; 2]) -> [f64; 2] {
    let rinf = p[0].abs().max(p[1].abs());
    if rinf <= 0.5 {
        return p;
    }
    let r2 = p[0].hypot(p[1]);
    let t = (rinf - 0.5) / 0.5;
    let s = (1.0 - t) + t * rinf / r2;
    [p[0] * s, p[1] * s]
}

pub fn capacity_fem_2d(a: f64, grading: &GradingSpec) -> Result<CapacityResult, CapacityError> {
    Ok(solve_capacity_2d(a, grading)?.result)
}

pub fn solve_capacity_2d(a: f64, grading: &GradingSpec) -> Result<CapacitySolution, CapacityError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(CapacityError::HalfWidth(a));
    }
    grading.validate()?;
    if grading.min_h > a / 4.0 {
        return Err(MeshError::Resolution(format!(
            "min_h = {:e} does not resolve a segment of half-width {a:e} by four edges",
            grading.min_h
        ))
        .into());
    }
    if a < 1e-11 {
        return Err(MeshError::Resolution(format!("half-width {a:e} is below floating point resolution")).into());
    }
    let mut patch = a;
    while patch * 2.0 <= 0.25 {
        patch *= 2.0;
    }
    let mut xs = vec![-1.0, 1.0, 0.0, -0.5, 0.5];
    let mut ys = xs.clone();
    let mut dyadic = Vec::new();
    if patch <= 0.25 {
        xs.extend([-patch, patch]);
        ys.extend([-patch, patch]);
        dyadic.extend([(-patch, 0.0), (0.0, patch)]);
    } else {
        xs.extend([-a, a]);
    }
    let xs = quadtree::gridlines(&xs, &dyadic, grading.base_h);
    let ys = quadtree::gridlines(&ys, &dyadic, grading.base_h);
    let points = [
        RefinePoint { at: [-a, 0.0], size: grading.min_h },
        RefinePoint { at: [a, 0.0], size: grading.min_h },
    ];
    let tree = QuadTree::build(xs, ys, &|_: &Rect| true, &points, grading.base_h, grading.ratio)
        .map_err(MeshError::Resolution)?;
    let key_tris = tree.triangulate(&square_to_disk, [0.0, 0.0]);
    let (keys, triangles) = quadtree::number_keys(key_tris.iter().map(|t| t.v));

    let last_x = tree.xs.len() as u32 - 1;
    let last_y = tree.ys.len() as u32 - 1;
    let zero_y = quadtree::line_index(&tree.ys, 0.0);
    let n = keys.len();
    let mut points = Vec::with_capacity(n);
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    let mut boundary_count = 0;
    for (i, (kx, ky)) in keys.iter().enumerate() {
        let p = tree.point(&(*kx, *ky));
        let on_outer = (kx.is_line() && (kx.line == 0 || kx.line == last_x))
            || (ky.is_line() && (ky.line == 0 || ky.line == last_y));
        if on_outer {
            fixed[i] = Some(0.0);
            boundary_count += 1;
        } else if ky.is_line() && ky.line == zero_y && p[0].abs() <= a * (1.0 + 1e-9) {
            fixed[i] = Some(1.0);
        }
        points.push(square_to_disk(p));
    }

    let mut trip = Vec::with_capacity(9 * triangles.len());
    let (mut h_min, mut h_max) = (f64::INFINITY, 0.0f64);
    for (ti, t) in triangles.iter().enumerate() {
        let p = t.map(|i| points[i]);
        let (k, _, area) = element_matrices(p);
        if !(area > 0.0) {
            return Err(NumericsError::DegenerateElement { triangle: ti, area }.into());
        }
        let diam = quadtree::dist(p[0], p[1]).max(quadtree::dist(p[1], p[2])).max(quadtree::dist(p[2], p[0]));
        h_min = h_min.min(diam);
        h_max = h_max.max(diam);
        for i in 0..3 {
            for j in 0..3 {
                trip.push((t[i], t[j], k[i][j]));
            }
        }
    }
    let stiffness = SparseSym::from_triplets(n, trip);

    let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    let mut full_to_free = vec![usize::MAX; n];
    for (r, &i) in free.iter().enumerate() {
        full_to_free[i] = r;
    }
    let kff = stiffness.restrict(&free);
    let rhs: Vec<f64> = free
        .iter()
        .map(|&i| {
            -stiffness
                .row(i)
                .filter_map(|(c, v)| fixed[c].map(|g| v * g))
                .sum::<f64>()
        })
        .collect();
    let cg = pcg(&kff, &rhs, 1e-12, 20 * kff.n.max(1))?;
    if !cg.converged {
        return Err(NumericsError::NoConvergence { iterations: cg.iterations, residual: cg.rel_residual }.into());
    }
    let potential: Vec<f64> = (0..n)
        .map(|i| fixed[i].unwrap_or_else(|| cg.x[full_to_free[i]]))
        .collect();
    let value = stiffness.form(&potential, &potential);
    Ok(CapacitySolution {
        result: CapacityResult {
            value,
            method: CapacityMethod::FemBvp,
            mesh: Some(CapacityMesh {
                nodes: n,
                triangles: triangles.len(),
                boundary_segments: boundary_count,
                h_min,
                h_max,
                cg_iterations: cg.iterations,
                cg_residual: cg.rel_residual,
            }),
        },
        points,
        triangles,
        potential,
        stiffness,
    })
}

/// Leading-order capacity: `2π/|ln d|` in the plane, `d^{n-2}·cap(D)` otherwise.
pub fn capacity_asymptotic(n: u32, d: f64, shape_cap: f64) -> Result<CapacityResult, CapacityError> {
    if n < 2 {
        return Err(CapacityError::BadDimension(n));
    }
    if !(d > 0.0 && d < 1.0) {
        return Err(CapacityError::Parameter(format!("window scale d = {d} outside (0, 1)")));
    }
    if n == 2 {
        return Ok(CapacityResult {
            value: 2.0 * std::f64::consts::PI / d.ln().abs(),
            method: CapacityMethod::Asymptotic2D,
            mesh: None,
        });
    }
    if !(shape_cap > 0.0) {
        return Err(CapacityError::Parameter(format!("shape capacity {shape_cap} must be positive")));
    }
    Ok(CapacityResult {
        value: d.powi(n as i32 - 2) * shape_cap,
        method: CapacityMethod::Asymptotic3D,
        mesh: None,
    })
}

/// How `γ_{k,ε}` obtains its capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaMethod {
    Fem(Option<GradingSpec>),
    Asymptotic,
}

/// `γ_{k,ε} = cap(D_{k,ε}) / (4 ε² |B_k|)`.
pub fn gamma_eps_for(resonator: &ResonatorSpec, method: GammaMethod) -> Result<f64, CapacityError> {
    let volume = resonator.eps * resonator.eps * REFERENCE_AREA;
    let cap = match method {
        GammaMethod::Asymptotic => capacity_asymptotic(2, resonator.d, resonator.ell)?.value,
        GammaMethod::Fem(grading) => {
            let a = resonator.window_halfwidth();
            let g = grading.unwrap_or_else(|| default_grading(a));
            capacity_fem_2d(a, &g)?.value
        }
    };
    Ok(cap / (4.0 * volume))
}
