//! Conforming triangulations of a perturbed domain with the slits opened as cracks.
//!
//! Nodes on a slit are duplicated: triangles inside the resonator use one copy
//! (`SlitSideA`), triangles outside use the other (`SlitSideB`). Nodes on the
//! window, including its two endpoints, are shared. With independent degrees of
//! freedom on the two faces of the crack, the Neumann condition on the slit is
//! the natural one of the weak form.
//!
//! Around each window the background grid contains a square patch whose side
//! is a power-of-two multiple of the window half-width, so the endpoints are
//! exact dyadic vertices of the quadtree and elements grade geometrically toward
//! them.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{DomainInstance, GeometryError, Rect};
use crate::quadtree::{self, line_index, Coord, Key, QuadTree, RefinePoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("resolution: {0}")]
    Resolution(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid grading: {0}")]
    Grading(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum NodeTag {
    Interior,
    DirichletBoundary,
    SlitSideA(usize),
    SlitSideB(usize),
    WindowEndpoint(usize),
}

impl NodeTag {
    fn label(&self) -> String {
        match self {
            NodeTag::Interior => "interior".into(),
            NodeTag::DirichletBoundary => "dirichlet".into(),
            NodeTag::SlitSideA(k) => format!("slit_a:{k}"),
            NodeTag::SlitSideB(k) => format!("slit_b:{k}"),
            NodeTag::WindowEndpoint(k) => format!("window_endpoint:{k}"),
        }
    }

    /// Resonator whose slit or window endpoint this node belongs to.
    pub fn resonator(&self) -> Option<usize> {
        match *self {
            NodeTag::SlitSideA(k) | NodeTag::SlitSideB(k) | NodeTag::WindowEndpoint(k) => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Node {
    pub x: f64,
    pub y: f64,
    pub tag: NodeTag,
}

/// Element size control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradingSpec {
    pub base_h: f64,
    pub min_h: f64,
    pub ratio: f64,
}

impl GradingSpec {
    pub const DEFAULT_RATIO: f64 = 1.5;

    /// `min_h` is an eighth of the smallest window half-width.
    pub fn for_domain(domain: &DomainInstance, base_h: f64) -> GradingSpec {
        let min_h = domain
            .resonators
            .iter()
            .map(|r| r.window_halfwidth() / 8.0)
            .fold(base_h, f64::min);
        GradingSpec {
            base_h,
            min_h,
            ratio: Self::DEFAULT_RATIO,
        }
    }

    pub fn uniform(base_h: f64) -> GradingSpec {
        GradingSpec {
            base_h,
            min_h: base_h,
            ratio: Self::DEFAULT_RATIO,
        }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if !(self.min_h > 0.0 && self.min_h <= self.base_h && self.base_h.is_finite()) {
            return Err(MeshError::Grading(format!(
                "need 0 < min_h <= base_h, got min_h = {}, base_h = {}",
                self.min_h, self.base_h
            )));
        }
        if !(self.ratio > 1.0 && self.ratio <= 2.0) {
            return Err(MeshError::Grading(format!("ratio {} outside (1, 2]", self.ratio)));
        }
        Ok(())
    }
}

/// Optional controls beyond the grading.
#[derive(Debug, Clone, Default)]
pub struct MeshOptions {
    /// Extra window half-widths per resonator whose endpoints must also be
    /// mesh vertices. Together with the actual one they should form a
    /// power-of-two ladder; this lets one mesh carry a nested family of windows.
    pub extra_halfwidths: Vec<Vec<f64>>,
    /// Duplicate the window nodes too, closing every resonator.
    pub seal_windows: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlitMesh {
    pub nodes: Vec<Node>,
    /// Counterclockwise node triples.
    pub triangles: Vec<[usize; 3]>,
    /// Resonator containing each triangle, if any.
    pub regions: Vec<Option<usize>>,
    /// `(inside copy, outside copy)` for every duplicated slit node.
    pub slit_pairs: Vec<Vec<(usize, usize)>>,
    /// Shared nodes on each closed window segment.
    pub window_nodes: Vec<Vec<usize>>,
    pub h_min: f64,
    pub h_max: f64,
    pub grading_ratio: f64,
    /// Discs around window endpoints inside which the patch grading applies.
    pub grading_zones: Vec<([f64; 2], f64)>,
    pub outer_polygon: Vec<[f64; 2]>,
}

struct WindowPlan {
    s: Option<f64>,
    /// Half-widths that needed their own gridlines.
    explicit: Vec<f64>,
}

/// Triangulate with default options.
pub fn triangulate(domain: &DomainInstance, grading: &GradingSpec) -> Result<SlitMesh, MeshError> {
    triangulate_with(domain, grading, &MeshOptions::default())
}

pub fn triangulate_with(
    domain: &DomainInstance,
    grading: &GradingSpec,
    options: &MeshOptions,
) -> Result<SlitMesh, MeshError> {
    grading.validate()?;
    let bb = domain.outer.bounding_box();
    let span = bb.width().max(bb.height());
    for (k, r) in domain.resonators.iter().enumerate() {
        let a = r.window_halfwidth();
        if grading.min_h > a / 4.0 && !options.seal_windows {
            return Err(MeshError::Resolution(format!(
                "min_h = {:e} does not resolve window {k} of half-width {:e} by four edges",
                grading.min_h, a
            )));
        }
        if a < 1e-11 * span {
            return Err(MeshError::Resolution(format!(
                "window {k} half-width {a:e} is below floating point resolution"
            )));
        }
    }

    let (mut xs, mut ys) = domain.outer.feature_lines();
    let mut hard_x = xs.clone();
    for r in &domain.resonators {
        let b = r.bounding_rect();
        hard_x.extend([b.x0, b.x1, r.center[0]]);
    }
    let plans = plan_windows(domain, options, &hard_x);
    let mut dyadic_x = Vec::new();
    let mut dyadic_y = Vec::new();
    for (r, plan) in domain.resonators.iter().zip(&plans) {
        let b = r.bounding_rect();
        let [cx, cy] = r.center;
        xs.extend([b.x0, b.x1, cx]);
        ys.extend([b.y0, b.y1]);
        if let Some(s) = plan.s {
            xs.extend([cx - s, cx + s]);
            ys.extend([cy - s, cy + s]);
            dyadic_x.extend([(cx - s, cx), (cx, cx + s)]);
            dyadic_y.extend([(cy - s, cy), (cy, cy + s)]);
        }
        for &a in &plan.explicit {
            xs.extend([cx - a, cx + a]);
        }
    }
    let xs = quadtree::gridlines(&xs, &dyadic_x, grading.base_h);
    let ys = quadtree::gridlines(&ys, &dyadic_y, grading.base_h);

    let mut points = Vec::new();
    for (k, r) in domain.resonators.iter().enumerate() {
        let actual = r.window_halfwidth();
        let [cx, cy] = r.center;
        let mut widths = vec![actual];
        if let Some(extra) = options.extra_halfwidths.get(k) {
            widths.extend(extra.iter().copied());
        }
        // sizes depend on the family only, not on which window is open
        let unit = widths.iter().copied().fold(actual, f64::min);
        for a in widths {
            let size = grading.min_h * a / unit;
            points.push(RefinePoint { at: [cx - a, cy], size });
            points.push(RefinePoint { at: [cx + a, cy], size });
        }
    }
    let outer = domain.outer;
    let active = |r: &Rect| outer.contains_point([0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1)]);
    let tree = QuadTree::build(xs, ys, &active, &points, grading.base_h, grading.ratio)
        .map_err(MeshError::Resolution)?;

    let boxes: Vec<BoxLines> = domain
        .resonators
        .iter()
        .map(|r| BoxLines::new(&tree, &r.bounding_rect()))
        .collect();
    let key_tris = tree.triangulate(&|p| p, [0.5 * (bb.x0 + bb.x1), 0.5 * (bb.y0 + bb.y1)]);

    let leaf_region: Vec<Option<usize>> = tree
        .leaves
        .iter()
        .map(|l| {
            let r = tree.rect(l);
            domain.resonator_at([0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1)])
        })
        .collect();

    // classify keys lying on a resonator boundary
    let mut on_box: HashMap<Key, (usize, bool)> = HashMap::new();
    for t in &key_tris {
        for key in t.v {
            if on_box.contains_key(&key) {
                continue;
            }
            for (k, bl) in boxes.iter().enumerate() {
                if bl.contains(&key) {
                    let p = tree.point(&key);
                    let r = &domain.resonators[k];
                    let a = r.window_halfwidth();
                    let in_window = !options.seal_windows
                        && key.1 == Coord::on_line(bl.top)
                        && (p[0] - r.center[0]).abs() <= a * (1.0 + 1e-3);
                    on_box.insert(key, (k, in_window));
                    break;
                }
            }
        }
    }

    // 0: shared, 1: inside copy, 2: outside copy
    let node_key = |key: Key, leaf: usize| -> (Key, u8) {
        match on_box.get(&key) {
            Some(&(k, false)) => (key, if leaf_region[leaf] == Some(k) { 1 } else { 2 }),
            _ => (key, 0),
        }
    };
    let (keys, triangles) = quadtree::number_keys(
        key_tris
            .iter()
            .map(|t| [0, 1, 2].map(|i| node_key(t.v[i], t.leaf))),
    );
    let regions: Vec<Option<usize>> = key_tris.iter().map(|t| leaf_region[t.leaf]).collect();

    let m = domain.resonators.len();
    let mut nodes: Vec<Node> = Vec::with_capacity(keys.len());
    let mut slit_pairs = vec![Vec::new(); m];
    let mut window_nodes = vec![Vec::new(); m];
    let mut ids: HashMap<(Key, u8), usize> = HashMap::with_capacity(keys.len());
    for (id, &(key, side)) in keys.iter().enumerate() {
        ids.insert((key, side), id);
        let p = tree.point(&key);
        let tag = match (on_box.get(&key), side) {
            (Some(&(k, false)), 1) => NodeTag::SlitSideA(k),
            (Some(&(k, false)), _) => NodeTag::SlitSideB(k),
            (Some(&(k, true)), _) => {
                window_nodes[k].push(id);
                NodeTag::Interior
            }
            (None, _) => NodeTag::Interior,
        };
        nodes.push(Node { x: p[0], y: p[1], tag });
    }
    for &(key, side) in &keys {
        if side == 1 {
            let k = on_box[&key].0;
            let b = ids.get(&(key, 2)).copied().ok_or_else(|| {
                MeshError::Resolution(format!("slit node of resonator {k} seen from one side only"))
            })?;
            slit_pairs[k].push((ids[&(key, 1)], b));
        }
    }
    for (k, r) in domain.resonators.iter().enumerate() {
        if options.seal_windows {
            continue;
        }
        let a = r.window_halfwidth();
        for end in [r.center[0] - a, r.center[0] + a] {
            let hit = window_nodes[k]
                .iter()
                .copied()
                .find(|&id| (nodes[id].x - end).abs() <= 1e-3 * a);
            match hit {
                Some(id) => nodes[id].tag = NodeTag::WindowEndpoint(k),
                None => {
                    return Err(MeshError::Resolution(format!(
                        "window endpoint of resonator {k} is not a mesh vertex"
                    )))
                }
            }
        }
    }

    // outer boundary: edges with one triangle that are not slit edges
    for e in boundary_edges(&triangles) {
        let (ta, tb) = (nodes[e.0].tag.resonator(), nodes[e.1].tag.resonator());
        if ta.is_some() && ta == tb {
            continue;
        }
        nodes[e.0].tag = NodeTag::DirichletBoundary;
        nodes[e.1].tag = NodeTag::DirichletBoundary;
    }

    let (h_min, h_max) = diameter_range(&nodes, &triangles);
    let grading_zones = domain
        .resonators
        .iter()
        .zip(&plans)
        .filter_map(|(r, p)| p.s.map(|s| (r, s)))
        .flat_map(|(r, s)| {
            let a = r.window_halfwidth();
            let [cx, cy] = r.center;
            [([cx - a, cy], 0.5 * s), ([cx + a, cy], 0.5 * s)]
        })
        .collect();

    Ok(SlitMesh {
        nodes,
        triangles,
        regions,
        slit_pairs,
        window_nodes,
        h_min,
        h_max,
        grading_ratio: grading.ratio,
        grading_zones,
        outer_polygon: domain.outer.polygon(),
    })
}

/// Choose the dyadic patch for each window. The open column strip
/// `(cx - s, cx + s)` must not contain foreign gridlines, otherwise the patch
/// would lose its dyadic alignment.
fn plan_windows(domain: &DomainInstance, options: &MeshOptions, hard_x: &[f64]) -> Vec<WindowPlan> {
    let m = domain.resonators.len();
    let mut widths: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut s: Vec<Option<f64>> = Vec::with_capacity(m);
    for (k, r) in domain.resonators.iter().enumerate() {
        let mut w = vec![r.window_halfwidth()];
        if let Some(extra) = options.extra_halfwidths.get(k) {
            w.extend(extra.iter().copied().filter(|&a| a > 0.0 && a < 0.5 * r.eps));
        }
        w.sort_by(f64::total_cmp);
        w.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * *b);
        let unit = w[0];
        let mut clearance = domain.outer.clearance(&r.bounding_rect());
        for (j, o) in domain.resonators.iter().enumerate() {
            if j != k {
                clearance = clearance.min(r.bounding_rect().gap(&o.bounding_rect()));
            }
        }
        let cap = (0.25 * r.eps).min(0.5 * clearance);
        let mut patch = unit;
        while patch * 2.0 <= cap {
            patch *= 2.0;
        }
        s.push(if patch <= cap { Some(patch) } else { None });
        widths.push(w);
    }
    // shrink patches until no foreign x-line falls inside
    for _ in 0..64 {
        let mut lines: Vec<f64> = hard_x.to_vec();
        for (k, r) in domain.resonators.iter().enumerate() {
            if let Some(sk) = s[k] {
                lines.extend([r.center[0] - sk, r.center[0] + sk]);
            }
        }
        let mut changed = false;
        for (k, r) in domain.resonators.iter().enumerate() {
            let Some(sk) = s[k] else { continue };
            let cx = r.center[0];
            let tol = 1e-12 * sk.max(1e-300);
            let conflict = lines.iter().any(|&l| {
                let off = (l - cx).abs();
                off > tol && off < sk - tol
            });
            if conflict {
                s[k] = if sk / 2.0 >= widths[k][0] { Some(sk / 2.0) } else { None };
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    widths
        .into_iter()
        .zip(s)
        .map(|(w, s)| {
            let unit = w[0];
            // half-widths that are not exact dyadic points of the patch
            let explicit = w
                .iter()
                .copied()
                .filter(|&a| match s {
                    Some(sk) => {
                        let q = (a / unit).log2();
                        !(a <= sk * (1.0 + 1e-12) && (q - q.round()).abs() < 1e-9)
                    }
                    None => true,
                })
                .collect();
            WindowPlan { s, explicit }
        })
        .collect()
}

struct BoxLines {
    left: u32,
    right: u32,
    bottom: u32,
    top: u32,
}

impl BoxLines {
    fn new(tree: &QuadTree, r: &Rect) -> Self {
        BoxLines {
            left: line_index(&tree.xs, r.x0),
            right: line_index(&tree.xs, r.x1),
            bottom: line_index(&tree.ys, r.y0),
            top: line_index(&tree.ys, r.y1),
        }
    }

    fn contains(&self, key: &Key) -> bool {
        let (x, y) = key;
        let on_vertical = (*x == Coord::on_line(self.left) || *x == Coord::on_line(self.right))
            && y.within(self.bottom, self.top);
        let on_horizontal = (*y == Coord::on_line(self.bottom) || *y == Coord::on_line(self.top))
            && x.within(self.left, self.right);
        on_vertical || on_horizontal
    }
}

/// Edges used by exactly one triangle, as `(min, max)` pairs in first-seen order.
pub fn boundary_edges(triangles: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let counts = edge_counts(triangles);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in triangles {
        for e in tri_edges(t) {
            if counts[&e] == 1 && seen.insert(e) {
                out.push(e);
            }
        }
    }
    out
}

fn tri_edges(t: &[usize; 3]) -> [(usize, usize); 3] {
    let e = |a: usize, b: usize| (a.min(b), a.max(b));
    [e(t[0], t[1]), e(t[1], t[2]), e(t[2], t[0])]
}

fn edge_counts(triangles: &[[usize; 3]]) -> HashMap<(usize, usize), u32> {
    let mut counts = HashMap::with_capacity(triangles.len() * 2);
    for t in triangles {
        for e in tri_edges(t) {
            *counts.entry(e).or_insert(0) += 1;
        }
    }
    counts
}

fn diameter_range(nodes: &[Node], triangles: &[[usize; 3]]) -> (f64, f64) {
    triangles.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), t| {
        let d = diameter(nodes, t);
        (lo.min(d), hi.max(d))
    })
}

pub fn diameter(nodes: &[Node], t: &[usize; 3]) -> f64 {
    let p = |i: usize| [nodes[t[i]].x, nodes[t[i]].y];
    quadtree::dist(p(0), p(1))
        .max(quadtree::dist(p(1), p(2)))
        .max(quadtree::dist(p(2), p(0)))
}

pub fn signed_area(nodes: &[Node], t: &[usize; 3]) -> f64 {
    let (a, b, c) = (nodes[t[0]], nodes[t[1]], nodes[t[2]]);
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    NonPositiveArea { triangle: usize, area: f64 },
    NonConformingEdge { a: usize, b: usize, triangles: u32 },
    DirichletMismatch { node: usize },
    SlitPair { resonator: usize, a: usize, b: usize, reason: String },
    TwoSidedness { resonator: usize },
    Grading { t1: usize, t2: usize, ratio: f64 },
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Largest diameter ratio between edge-adjacent triangles inside a grading
/// zone; two levels of a 2:1 balanced quadtree with the two triangle templates.
pub const GRADING_BOUND: f64 = 2.0 * std::f64::consts::SQRT_2 + 1e-9;

/// Audit every structural invariant of a slit mesh.
pub fn validate(mesh: &SlitMesh) -> ValidationReport {
    let mut v = Vec::new();
    let nodes = &mesh.nodes;
    for (i, t) in mesh.triangles.iter().enumerate() {
        let area = signed_area(nodes, t);
        if !(area > 0.0) {
            v.push(Violation::NonPositiveArea { triangle: i, area });
        }
    }

    let counts = edge_counts(&mesh.triangles);
    let mut on_outer = vec![false; nodes.len()];
    let mut sorted: Vec<_> = counts.iter().collect();
    sorted.sort();
    for (&(a, b), &c) in sorted {
        if c > 2 {
            v.push(Violation::NonConformingEdge { a, b, triangles: c });
        } else if c == 1 {
            let (ra, rb) = (nodes[a].tag.resonator(), nodes[b].tag.resonator());
            if ra.is_some() && ra == rb {
                continue;
            }
            let pa = [nodes[a].x, nodes[a].y];
            let pb = [nodes[b].x, nodes[b].y];
            if on_polygon(&mesh.outer_polygon, pa) && on_polygon(&mesh.outer_polygon, pb) {
                on_outer[a] = true;
                on_outer[b] = true;
            } else {
                v.push(Violation::NonConformingEdge { a, b, triangles: 1 });
            }
        }
    }
    for (i, n) in nodes.iter().enumerate() {
        if (n.tag == NodeTag::DirichletBoundary) != on_outer[i] {
            v.push(Violation::DirichletMismatch { node: i });
        }
    }

    let mut used_by: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (ti, t) in mesh.triangles.iter().enumerate() {
        for &n in t {
            used_by[n].push(ti);
        }
    }
    for (k, pairs) in mesh.slit_pairs.iter().enumerate() {
        for &(a, b) in pairs {
            let bad = |reason: &str| Violation::SlitPair {
                resonator: k,
                a,
                b,
                reason: reason.into(),
            };
            if a == b {
                v.push(bad("pair shares one node id"));
                continue;
            }
            if nodes[a].x != nodes[b].x || nodes[a].y != nodes[b].y {
                v.push(bad("pair coordinates differ"));
            }
            if nodes[a].tag != NodeTag::SlitSideA(k) || nodes[b].tag != NodeTag::SlitSideB(k) {
                v.push(bad("pair tags are not SlitSideA/SlitSideB"));
            }
            if used_by[a].iter().any(|&t| mesh.regions[t] != Some(k)) {
                v.push(bad("inside copy used by an outside triangle"));
            }
            if used_by[b].iter().any(|&t| mesh.regions[t] == Some(k)) {
                v.push(bad("outside copy used by an inside triangle"));
            }
        }
        if !two_sided(mesh, k, &used_by) {
            v.push(Violation::TwoSidedness { resonator: k });
        }
    }

    // grading near the window endpoints
    let centroid = |t: &[usize; 3]| {
        [
            (nodes[t[0]].x + nodes[t[1]].x + nodes[t[2]].x) / 3.0,
            (nodes[t[0]].y + nodes[t[1]].y + nodes[t[2]].y) / 3.0,
        ]
    };
    let tri_of_edge = {
        let mut m: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (ti, t) in mesh.triangles.iter().enumerate() {
            for e in tri_edges(t) {
                m.entry(e).or_default().push(ti);
            }
        }
        m
    };
    let mut pairs: Vec<_> = tri_of_edge.values().filter(|t| t.len() == 2).collect();
    pairs.sort();
    for ts in pairs {
        let (t1, t2) = (ts[0], ts[1]);
        let (c1, c2) = (centroid(&mesh.triangles[t1]), centroid(&mesh.triangles[t2]));
        let in_zone = mesh
            .grading_zones
            .iter()
            .any(|(p, r)| quadtree::dist(*p, c1) < *r && quadtree::dist(*p, c2) < *r);
        if !in_zone {
            continue;
        }
        let (d1, d2) = (diameter(nodes, &mesh.triangles[t1]), diameter(nodes, &mesh.triangles[t2]));
        let ratio = d1.max(d2) / d1.min(d2);
        if ratio > GRADING_BOUND {
            v.push(Violation::Grading { t1, t2, ratio });
        }
    }
    ValidationReport { violations: v }
}

/// Graph search: with the triangles touching the window removed, no triangle
/// holding an inside copy may reach one holding an outside copy through shared
/// vertices.
fn two_sided(mesh: &SlitMesh, k: usize, used_by: &[Vec<usize>]) -> bool {
    let nt = mesh.triangles.len();
    let window: HashSet<usize> = mesh.window_nodes[k].iter().copied().collect();
    let removed: Vec<bool> = mesh
        .triangles
        .iter()
        .map(|t| t.iter().any(|n| window.contains(n)))
        .collect();
    let has = |t: usize, tag: NodeTag| mesh.triangles[t].iter().any(|&n| mesh.nodes[n].tag == tag);
    let mut seen = vec![false; nt];
    let mut queue = VecDeque::new();
    for t in 0..nt {
        if !removed[t] && has(t, NodeTag::SlitSideA(k)) {
            seen[t] = true;
            queue.push_back(t);
        }
    }
    while let Some(t) = queue.pop_front() {
        if has(t, NodeTag::SlitSideB(k)) {
            return false;
        }
        for &n in &mesh.triangles[t] {
            for &u in &used_by[n] {
                if !removed[u] && !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    true
}

fn on_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let scale = poly
        .iter()
        .fold(0.0f64, |m, q| m.max(q[0].abs()).max(q[1].abs()))
        .max(1.0);
    let tol = 1e-12 * scale;
    (0..poly.len()).any(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
        quadtree::dist(p, [a[0] + t * dx, a[1] + t * dy]) <= tol
    })
}

impl SlitMesh {
    /// Vertices minus edges plus triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let edges = edge_counts(&self.triangles).len() as i64;
        self.nodes.len() as i64 - edges + self.triangles.len() as i64
    }

    pub fn dirichlet_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.tag == NodeTag::DirichletBoundary)
            .count()
    }

    /// Plain-text export: node list, triangle list, slit-pair list.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# slit mesh: h_min {} h_max {}", self.h_min, self.h_max);
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {} {}", n.x, n.y, n.tag.label());
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for (i, t) in self.triangles.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "slit_pairs {}", self.slit_pairs.len());
        for (k, pairs) in self.slit_pairs.iter().enumerate() {
            let _ = writeln!(s, "resonator {k} {}", pairs.len());
            for (a, b) in pairs {
                let _ = writeln!(s, "{a} {b}");
            }
        }
        s
    }

    /// SVG rendering: triangles in grey, slit faces in red, window nodes in green.
    pub fn to_svg(&self) -> String {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for n in &self.nodes {
            x0 = x0.min(n.x);
            x1 = x1.max(n.x);
            y0 = y0.min(n.y);
            y1 = y1.max(n.y);
        }
        let width = 1000.0;
        let scale = width / (x1 - x0).max(1e-300);
        let height = ((y1 - y0) * scale).max(1.0);
        let px = |x: f64| (x - x0) * scale;
        let py = |y: f64| (y1 - y) * scale;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.3} {:.3}">"#,
            width, height, width, height
        );
        let _ = writeln!(s, r##"<g fill="none" stroke="#888" stroke-width="0.3">"##);
        for t in &self.triangles {
            let pts: Vec<String> = t
                .iter()
                .map(|&i| format!("{:.3},{:.3}", px(self.nodes[i].x), py(self.nodes[i].y)))
                .collect();
            let _ = writeln!(s, r#"<polygon points="{}"/>"#, pts.join(" "));
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(s, r#"<g fill="red">"#);
        for pairs in &self.slit_pairs {
            for &(a, _) in pairs {
                let n = self.nodes[a];
                let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="1"/>"#, px(n.x), py(n.y));
            }
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(s, r#"<g fill="green">"#);
        for w in &self.window_nodes {
            for &i in w {
                let n = self.nodes[i];
                let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="1.5"/>"#, px(n.x), py(n.y));
            }
        }
        let _ = writeln!(s, "</g>\n</svg>");
        s
    }
}
