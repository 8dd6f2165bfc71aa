//! Balanced quadtree refinement over a rectilinear background grid.
//!
//! Every root cell is a rectangle between consecutive gridlines. Leaves are
//! addressed by exact dyadic coordinates inside their root, so nodes shared by
//! neighbouring leaves (also across roots) are identified without any floating
//! point comparison. Leaves are balanced 2:1 across edges and triangulated with
//! the usual templates: two triangles when no side carries a hanging node, a
//! fan around the leaf centre otherwise.

use std::collections::{HashMap, HashSet};

use crate::geometry::Rect;

/// Deepest dyadic level a leaf may reach inside its root.
pub(crate) const MAX_LEVEL: u8 = 60;

/// Exact position along one axis: `lines[line] + (lines[line+1]-lines[line]) * num / 2^lvl`,
/// normalized so that `num` is odd (or the coordinate sits on a gridline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) struct Coord {
    pub line: u32,
    pub num: u64,
    pub lvl: u8,
}

impl Coord {
    pub fn on_line(line: u32) -> Self {
        Coord { line, num: 0, lvl: 0 }
    }

    fn canon(line: u32, num: u64, lvl: u8) -> Self {
        if num == 0 {
            return Coord::on_line(line);
        }
        if num == 1u64 << lvl {
            return Coord::on_line(line + 1);
        }
        let tz = (num.trailing_zeros() as u8).min(lvl);
        Coord {
            line,
            num: num >> tz,
            lvl: lvl - tz,
        }
    }

    pub fn is_line(&self) -> bool {
        self.num == 0
    }

    /// Whether the coordinate lies in the closed range between gridlines `lo` and `hi`.
    pub fn within(&self, lo: u32, hi: u32) -> bool {
        self.line >= lo && (self.line < hi || (self.line == hi && self.is_line()))
    }
}

pub(crate) type Key = (Coord, Coord);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Leaf {
    pub i: u32,
    pub j: u32,
    pub lvl: u8,
    pub ix: u64,
    pub iy: u64,
}

impl Leaf {
    fn children(&self) -> [Leaf; 4] {
        let mk = |dx, dy| Leaf {
            i: self.i,
            j: self.j,
            lvl: self.lvl + 1,
            ix: 2 * self.ix + dx,
            iy: 2 * self.iy + dy,
        };
        [mk(0, 0), mk(1, 0), mk(0, 1), mk(1, 1)]
    }

    fn cx(&self, frac_num: u64, extra: u8) -> Coord {
        Coord::canon(self.i, (self.ix << extra) + frac_num, self.lvl + extra)
    }

    fn cy(&self, frac_num: u64, extra: u8) -> Coord {
        Coord::canon(self.j, (self.iy << extra) + frac_num, self.lvl + extra)
    }

    fn corners(&self) -> [Key; 4] {
        [
            (self.cx(0, 0), self.cy(0, 0)),
            (self.cx(1, 0), self.cy(0, 0)),
            (self.cx(1, 0), self.cy(1, 0)),
            (self.cx(0, 0), self.cy(1, 0)),
        ]
    }

    /// Midpoints of bottom, right, top and left sides.
    fn side_midpoints(&self) -> [Key; 4] {
        [
            (self.cx(1, 1), self.cy(0, 0)),
            (self.cx(1, 0), self.cy(1, 1)),
            (self.cx(1, 1), self.cy(1, 0)),
            (self.cx(0, 0), self.cy(1, 1)),
        ]
    }

    fn quarter_points(&self) -> [Key; 8] {
        [
            (self.cx(1, 2), self.cy(0, 0)),
            (self.cx(3, 2), self.cy(0, 0)),
            (self.cx(4, 2), self.cy(1, 2)),
            (self.cx(4, 2), self.cy(3, 2)),
            (self.cx(1, 2), self.cy(4, 2)),
            (self.cx(3, 2), self.cy(4, 2)),
            (self.cx(0, 0), self.cy(1, 2)),
            (self.cx(0, 0), self.cy(3, 2)),
        ]
    }

    fn centre(&self) -> Key {
        (self.cx(1, 1), self.cy(1, 1))
    }
}

/// A point the mesh grades toward, with the element size to reach there.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RefinePoint {
    pub at: [f64; 2],
    pub size: f64,
}

/// Sorted gridlines built from feature coordinates; intervals listed in
/// `dyadic` are split into a power-of-two number of parts.
pub(crate) fn gridlines(features: &[f64], dyadic: &[(f64, f64)], base_h: f64) -> Vec<f64> {
    let mut f: Vec<f64> = features.to_vec();
    f.sort_by(f64::total_cmp);
    let span = (f[f.len() - 1] - f[0]).abs().max(1.0);
    let tol = 1e-13 * span;
    let mut uniq: Vec<f64> = Vec::with_capacity(f.len());
    for v in f {
        if uniq.last().is_none_or(|&last| v - last > tol) {
            uniq.push(v);
        }
    }
    let mut lines = vec![uniq[0]];
    for w in uniq.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let len = hi - lo;
        let mut parts = ((len / base_h) - 1e-9).ceil().max(1.0) as usize;
        let is_dyadic = dyadic
            .iter()
            .any(|&(a, b)| (a - lo).abs() <= tol && (b - hi).abs() <= tol);
        if is_dyadic {
            parts = parts.next_power_of_two();
        }
        for p in 1..parts {
            lines.push(lo + len * (p as f64) / (parts as f64));
        }
        lines.push(hi);
    }
    lines
}

/// Index of the gridline closest to `v`.
pub(crate) fn line_index(lines: &[f64], v: f64) -> u32 {
    let pos = lines.partition_point(|&l| l < v);
    let mut best = pos.min(lines.len() - 1);
    if pos > 0 && (lines[pos - 1] - v).abs() <= (lines[best] - v).abs() {
        best = pos - 1;
    }
    best as u32
}

pub(crate) struct QuadTree {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub leaves: Vec<Leaf>,
    nodes: HashSet<Key>,
}

/// Triangle expressed by node keys, with the leaf it came from.
pub(crate) struct KeyTriangle {
    pub v: [Key; 3],
    pub leaf: usize,
}

impl QuadTree {
    /// Build, refine toward `points` and balance.
    ///
    /// `active` decides which root cells belong to the domain. The target size
    /// at a leaf is `min(base_h, size_p + (ratio - 1) * dist(leaf, p))` over all
    /// refinement points.
    pub fn build(
        xs: Vec<f64>,
        ys: Vec<f64>,
        active: &dyn Fn(&Rect) -> bool,
        points: &[RefinePoint],
        base_h: f64,
        ratio: f64,
    ) -> Result<QuadTree, String> {
        let mut tree = QuadTree {
            xs,
            ys,
            leaves: Vec::new(),
            nodes: HashSet::new(),
        };
        let mut work = Vec::new();
        for j in 0..tree.ys.len() as u32 - 1 {
            for i in 0..tree.xs.len() as u32 - 1 {
                let root = Leaf { i, j, lvl: 0, ix: 0, iy: 0 };
                if active(&tree.rect(&root)) {
                    work.push(root);
                }
            }
        }
        if work.is_empty() {
            return Err("no active cells".into());
        }
        let grow = ratio - 1.0;
        let target = |r: &Rect| {
            points.iter().fold(base_h, |acc, p| {
                let dx = (r.x0 - p.at[0]).max(p.at[0] - r.x1).max(0.0);
                let dy = (r.y0 - p.at[1]).max(p.at[1] - r.y1).max(0.0);
                acc.min(p.size + grow * dx.hypot(dy))
            })
        };
        // depth-first refinement, children pushed in reverse so output order is stable
        work.reverse();
        while let Some(leaf) = work.pop() {
            let r = tree.rect(&leaf);
            if r.width().max(r.height()) > target(&r) * (1.0 + 1e-9) {
                if leaf.lvl >= MAX_LEVEL {
                    return Err("refinement exceeded the maximum depth".into());
                }
                let ch = leaf.children();
                work.extend(ch.iter().rev());
            } else {
                tree.leaves.push(leaf);
            }
        }
        for leaf in &tree.leaves {
            tree.nodes.extend(leaf.corners());
        }
        tree.balance()?;
        let mut keyed: Vec<(Leaf, f64, f64)> = tree
            .leaves
            .iter()
            .map(|l| {
                let r = tree.rect(l);
                (*l, r.y0, r.x0)
            })
            .collect();
        keyed.sort_by(|a, b| {
            (a.0.j, a.0.i)
                .cmp(&(b.0.j, b.0.i))
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
        });
        tree.leaves = keyed.into_iter().map(|k| k.0).collect();
        Ok(tree)
    }

    fn balance(&mut self) -> Result<(), String> {
        loop {
            let mut changed = false;
            let mut next = Vec::with_capacity(self.leaves.len());
            for leaf in std::mem::take(&mut self.leaves) {
                if leaf.quarter_points().iter().any(|q| self.nodes.contains(q)) {
                    if leaf.lvl >= MAX_LEVEL {
                        return Err("balancing exceeded the maximum depth".into());
                    }
                    for c in leaf.children() {
                        self.nodes.extend(c.corners());
                        next.push(c);
                    }
                    changed = true;
                } else {
                    next.push(leaf);
                }
            }
            self.leaves = next;
            if !changed {
                return Ok(());
            }
        }
    }

    pub fn coord_x(&self, c: Coord) -> f64 {
        axis_value(&self.xs, c)
    }

    pub fn coord_y(&self, c: Coord) -> f64 {
        axis_value(&self.ys, c)
    }

    pub fn point(&self, k: &Key) -> [f64; 2] {
        [self.coord_x(k.0), self.coord_y(k.1)]
    }

    pub fn rect(&self, leaf: &Leaf) -> Rect {
        let x0 = self.coord_x(leaf.cx(0, 0));
        let x1 = self.coord_x(leaf.cx(1, 0));
        let y0 = self.coord_y(leaf.cy(0, 0));
        let y1 = self.coord_y(leaf.cy(1, 0));
        Rect::new(x0, x1, y0, y1)
    }

    /// Triangulate every leaf. `map` transforms key positions (identity for flat
    /// meshes) and is used to pick the shorter diagonal; ties fall back to a
    /// criss-cross pattern symmetric about `reference`.
    pub fn triangulate(
        &self,
        map: &dyn Fn([f64; 2]) -> [f64; 2],
        reference: [f64; 2],
    ) -> Vec<KeyTriangle> {
        let mut out = Vec::with_capacity(self.leaves.len() * 2 + self.leaves.len() / 4);
        for (li, leaf) in self.leaves.iter().enumerate() {
            let c = leaf.corners();
            let mids = leaf.side_midpoints();
            let hanging: Vec<bool> = mids.iter().map(|m| self.nodes.contains(m)).collect();
            if hanging.iter().any(|&h| h) {
                let mut ring = Vec::with_capacity(8);
                for s in 0..4 {
                    ring.push(c[s]);
                    if hanging[s] {
                        ring.push(mids[s]);
                    }
                }
                let centre = leaf.centre();
                for t in 0..ring.len() {
                    out.push(KeyTriangle {
                        v: [centre, ring[t], ring[(t + 1) % ring.len()]],
                        leaf: li,
                    });
                }
            } else {
                let p: Vec<[f64; 2]> = c.iter().map(|k| map(self.point(k))).collect();
                let d02 = dist(p[0], p[2]);
                let d13 = dist(p[1], p[3]);
                let use02 = if (d02 - d13).abs() > 1e-9 * d02.max(d13) {
                    d02 < d13
                } else {
                    let r = self.rect(leaf);
                    let xc = 0.5 * (r.x0 + r.x1) - reference[0];
                    let yc = 0.5 * (r.y0 + r.y1) - reference[1];
                    xc * yc >= 0.0
                };
                if use02 {
                    out.push(KeyTriangle { v: [c[0], c[1], c[2]], leaf: li });
                    out.push(KeyTriangle { v: [c[0], c[2], c[3]], leaf: li });
                } else {
                    out.push(KeyTriangle { v: [c[0], c[1], c[3]], leaf: li });
                    out.push(KeyTriangle { v: [c[1], c[2], c[3]], leaf: li });
                }
            }
        }
        out
    }
}

fn axis_value(lines: &[f64], c: Coord) -> f64 {
    let base = lines[c.line as usize];
    if c.num == 0 {
        return base;
    }
    let w = lines[c.line as usize + 1] - base;
    base + w * (c.num as f64) / ((1u64 << c.lvl) as f64)
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Number the keys in order of first appearance.
pub(crate) fn number_keys<K: std::hash::Hash + Eq + Copy>(
    tris: impl Iterator<Item = [K; 3]>,
) -> (Vec<K>, Vec<[usize; 3]>) {
    let mut ids: HashMap<K, usize> = HashMap::new();
    let mut keys = Vec::new();
    let mut out = Vec::new();
    for t in tris {
        let mut tri = [0usize; 3];
        for (slot, k) in tri.iter_mut().zip(t) {
            *slot = *ids.entry(k).or_insert_with(|| {
                keys.push(k);
                keys.len() - 1
            });
        }
        out.push(tri);
    }
    (keys, out)
}
