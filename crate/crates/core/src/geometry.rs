//! Outer domains, square resonators with windows, and the window scaling laws.
//!
//! A resonator is the square `B = z + eps * ((-1/2, 1/2) x (-1, 0))`: its top edge
//! is flat and passes through the placement point `z`, so the flat part has
//! half-length `rho = 1/2` in reference units. The window is the centered
//! sub-segment of the top edge with physical half-width `ell * d`; the rest of
//! the square's boundary is the Neumann slit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-length of the flat top edge of the reference square.
pub const FLAT_HALF_LENGTH: f64 = 0.5;

/// Area of the reference square `(-1/2, 1/2) x (-1, 0)`.
pub const REFERENCE_AREA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid outer domain: {0}")]
    InvalidOuter(String),
    #[error("resonator {index}: {reason}")]
    InvalidResonator { index: usize, reason: String },
    #[error("resonators {first} and {second} overlap")]
    Overlap { first: usize, second: usize },
    #[error("resonator {index} is not compactly contained in the outer domain")]
    OutsideDomain { index: usize },
    #[error("resonator {index}: window violates ell*d < ell*eps < rho*eps ({reason})")]
    Window { index: usize, reason: String },
    #[error("window scale {d:e} is not below eps = {eps}")]
    Scale { d: f64, eps: f64 },
    #[error("dimension {0} is not supported (need n >= 2)")]
    BadDimension(u32),
    #[error("volume must be positive, got {0}")]
    NonPositiveVolume(f64),
}

/// Closed axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Rect { x0, x1, y0, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection test for the closed rectangles.
    pub fn intersects_closed(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    /// `self` lies in the open interior of `other`.
    pub fn strictly_inside(&self, other: &Rect) -> bool {
        self.x0 > other.x0 && self.x1 < other.x1 && self.y0 > other.y0 && self.y1 < other.y1
    }

    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Sup-norm gap between two disjoint rectangles (0 if they touch or overlap).
    pub fn gap(&self, other: &Rect) -> f64 {
        let dx = (other.x0 - self.x1).max(self.x0 - other.x1).max(0.0);
        let dy = (other.y0 - self.y1).max(self.y0 - other.y1).max(0.0);
        dx.max(dy)
    }
}

/// The unperturbed domain.
///
/// The rectangle occupies `[0, width] x [0, height]`. The truncated waveguide is
/// the strip `|y| < full_width/2` cut at `|x| = truncation_halflength`, narrowed
/// to `|y| < narrow_width/2` for `|x| <= narrow_halflength`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OuterSpec {
    Rectangle {
        width: f64,
        height: f64,
    },
    TruncatedWaveguide {
        full_width: f64,
        narrow_width: f64,
        narrow_halflength: f64,
        truncation_halflength: f64,
    },
}

impl OuterSpec {
    pub fn unit_square() -> Self {
        OuterSpec::Rectangle {
            width: 1.0,
            height: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(GeometryError::InvalidOuter(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            OuterSpec::Rectangle { width, height } => {
                positive("width", width)?;
                positive("height", height)
            }
            OuterSpec::TruncatedWaveguide {
                full_width,
                narrow_width,
                narrow_halflength,
                truncation_halflength,
            } => {
                positive("full_width", full_width)?;
                positive("narrow_width", narrow_width)?;
                positive("narrow_halflength", narrow_halflength)?;
                positive("truncation_halflength", truncation_halflength)?;
                if narrow_width >= full_width {
                    return Err(GeometryError::InvalidOuter(format!(
                        "narrow_width {narrow_width} must be below full_width {full_width}"
                    )));
                }
                if truncation_halflength <= narrow_halflength {
                    return Err(GeometryError::InvalidOuter(format!(
                        "truncation_halflength {truncation_halflength} must exceed narrow_halflength {narrow_halflength}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn bounding_box(&self) -> Rect {
        match *self {
            OuterSpec::Rectangle { width, height } => Rect::new(0.0, width, 0.0, height),
            OuterSpec::TruncatedWaveguide {
                full_width,
                truncation_halflength,
                ..
            } => Rect::new(
                -truncation_halflength,
                truncation_halflength,
                -full_width / 2.0,
                full_width / 2.0,
            ),
        }
    }

    /// Closed rectangles of the bounding box that are not part of the domain.
    pub fn excluded_parts(&self) -> Vec<Rect> {
        match *self {
            OuterSpec::Rectangle { .. } => Vec::new(),
            OuterSpec::TruncatedWaveguide {
                full_width,
                narrow_width,
                narrow_halflength: l,
                ..
            } => vec![
                Rect::new(-l, l, narrow_width / 2.0, full_width / 2.0),
                Rect::new(-l, l, -full_width / 2.0, -narrow_width / 2.0),
            ],
        }
    }

    /// Gridline coordinates the boundary of the domain lives on.
    pub fn feature_lines(&self) -> (Vec<f64>, Vec<f64>) {
        let bb = self.bounding_box();
        let mut xs = vec![bb.x0, bb.x1];
        let mut ys = vec![bb.y0, bb.y1];
        if let OuterSpec::TruncatedWaveguide {
            narrow_width,
            narrow_halflength,
            ..
        } = *self
        {
            xs.extend([-narrow_halflength, narrow_halflength]);
            ys.extend([-narrow_width / 2.0, narrow_width / 2.0]);
        }
        (xs, ys)
    }

    /// Whether the closed rectangle lies in the open domain.
    pub fn contains_closed(&self, r: &Rect) -> bool {
        r.strictly_inside(&self.bounding_box())
            && self.excluded_parts().iter().all(|e| !e.intersects_closed(r))
    }

    /// Whether a point lies in the open domain.
    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        let bb = self.bounding_box();
        p[0] > bb.x0
            && p[0] < bb.x1
            && p[1] > bb.y0
            && p[1] < bb.y1
            && self.excluded_parts().iter().all(|e| !e.contains_point(p))
    }

    /// Sup-norm distance from a rectangle inside the domain to its boundary.
    pub fn clearance(&self, r: &Rect) -> f64 {
        let bb = self.bounding_box();
        let mut c = (r.x0 - bb.x0)
            .min(bb.x1 - r.x1)
            .min(r.y0 - bb.y0)
            .min(bb.y1 - r.y1);
        for e in self.excluded_parts() {
            c = c.min(r.gap(&e));
        }
        c
    }

    /// Counterclockwise boundary polygon, used for rendering.
    pub fn polygon(&self) -> Vec<[f64; 2]> {
        match *self {
            OuterSpec::Rectangle { width, height } => {
                vec![[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]]
            }
            OuterSpec::TruncatedWaveguide {
                full_width,
                narrow_width,
                narrow_halflength: l,
                truncation_halflength: t,
            } => {
                let (h, n) = (full_width / 2.0, narrow_width / 2.0);
                vec![
                    [-t, -h],
                    [-l, -h],
                    [-l, -n],
                    [l, -n],
                    [l, -h],
                    [t, -h],
                    [t, h],
                    [l, h],
                    [l, n],
                    [-l, n],
                    [-l, h],
                    [-t, h],
                ]
            }
        }
    }
}

/// One resonator as written in a scene file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonatorSpec {
    /// Midpoint of the top edge.
    pub center: [f64; 2],
    pub eps: f64,
    /// Window half-length before scaling by `d`.
    pub ell: f64,
    /// Window scale `d_{k,eps}`, required to lie in `(0, eps)`.
    pub d: f64,
}

impl ResonatorSpec {
    pub fn new(center: [f64; 2], eps: f64, ell: f64, d: f64) -> Self {
        ResonatorSpec { center, eps, ell, d }
    }

    /// Closed square `B_{k,eps}`.
    pub fn bounding_rect(&self) -> Rect {
        let [cx, cy] = self.center;
        let h = self.eps * FLAT_HALF_LENGTH;
        Rect::new(cx - h, cx + h, cy - self.eps, cy)
    }

    /// Physical half-width `ell * d` of the window.
    pub fn window_halfwidth(&self) -> f64 {
        self.ell * self.d
    }

    /// `|B_{k,eps}| = eps^2 |B_k|`.
    pub fn volume(&self) -> f64 {
        self.eps * self.eps * REFERENCE_AREA
    }

    pub fn window(&self) -> Segment {
        let a = self.window_halfwidth();
        let [cx, cy] = self.center;
        Segment {
            a: [cx - a, cy],
            b: [cx + a, cy],
        }
    }

    /// Slit `S = boundary(B) minus window` as a polyline running clockwise from
    /// the right window endpoint around the square to the left one.
    pub fn slit(&self) -> Vec<[f64; 2]> {
        let r = self.bounding_rect();
        let w = self.window();
        vec![w.b, [r.x1, r.y1], [r.x1, r.y0], [r.x0, r.y0], [r.x0, r.y1], w.a]
    }

    fn check(&self, index: usize) -> Result<(), GeometryError> {
        let bad = |reason: String| GeometryError::InvalidResonator { index, reason };
        if !(self.center[0].is_finite() && self.center[1].is_finite()) {
            return Err(bad("center must be finite".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(bad(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.ell.is_finite() && self.ell > 0.0) {
            return Err(bad(format!("ell must be positive, got {}", self.ell)));
        }
        if self.ell >= FLAT_HALF_LENGTH {
            return Err(GeometryError::Window {
                index,
                reason: format!("ell = {} is not below rho = {FLAT_HALF_LENGTH}", self.ell),
            });
        }
        if !(self.d.is_finite() && self.d > 0.0) {
            return Err(GeometryError::Window {
                index,
                reason: format!("d must be positive, got {}", self.d),
            });
        }
        if self.d >= self.eps {
            return Err(GeometryError::Window {
                index,
                reason: format!("d = {} is not below eps = {}", self.d, self.eps),
            });
        }
        if self.window_halfwidth() >= FLAT_HALF_LENGTH * self.eps {
            return Err(GeometryError::Window {
                index,
                reason: "window does not fit inside the flat edge".into(),
            });
        }
        Ok(())
    }
}

/// A straight segment from `a` to `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Segment {
    pub fn length(&self) -> f64 {
        ((self.b[0] - self.a[0]).powi(2) + (self.b[1] - self.a[1]).powi(2)).sqrt()
    }
}

/// A validated perturbed domain: outer shape minus the resonator slits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainInstance {
    pub outer: OuterSpec,
    pub resonators: Vec<ResonatorSpec>,
    pub windows: Vec<Segment>,
    pub slits: Vec<Vec<[f64; 2]>>,
}

impl DomainInstance {
    /// Index of the resonator whose closed square contains `p`.
    pub fn resonator_at(&self, p: [f64; 2]) -> Option<usize> {
        self.resonators
            .iter()
            .position(|r| r.bounding_rect().contains_point(p))
    }

    /// `true` when every resonator satisfies `ell*d < ell*eps < rho*eps`.
    pub fn parameter_chain_holds(&self) -> bool {
        self.resonators.iter().all(|r| {
            r.ell * r.d < r.ell * r.eps && r.ell * r.eps < FLAT_HALF_LENGTH * r.eps
        })
    }
}

/// Validate the inputs and compute the windows and slits.
pub fn build_domain(
    outer: OuterSpec,
    resonators: Vec<ResonatorSpec>,
) -> Result<DomainInstance, GeometryError> {
    outer.validate()?;
    for (i, r) in resonators.iter().enumerate() {
        r.check(i)?;
    }
    for (i, r) in resonators.iter().enumerate() {
        let ri = r.bounding_rect();
        for (j, s) in resonators.iter().enumerate().skip(i + 1) {
            if ri.intersects_closed(&s.bounding_rect()) {
                return Err(GeometryError::Overlap { first: i, second: j });
            }
        }
        if !outer.contains_closed(&ri) {
            return Err(GeometryError::OutsideDomain { index: i });
        }
    }
    let windows = resonators.iter().map(ResonatorSpec::window).collect();
    let slits = resonators.iter().map(ResonatorSpec::slit).collect();
    Ok(DomainInstance {
        outer,
        resonators,
        windows,
        slits,
    })
}

/// Scene file: the canonical input of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub outer: OuterSpec,
    #[serde(default)]
    pub resonators: Vec<ResonatorSpec>,
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Scene, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn build(&self) -> Result<DomainInstance, GeometryError> {
        build_domain(self.outer, self.resonators.clone())
    }
}

/// Window scaling `d_{k,eps}` as a function of `eps` with coefficient `d_k`:
/// `d_k eps^{n/(n-2)}` for `n >= 3` and `exp(-1/(d_k eps^2))` for `n = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingLaw {
    pub dim: u32,
    pub coefficient: f64,
}

impl ScalingLaw {
    pub fn planar(coefficient: f64) -> Self {
        ScalingLaw {
            dim: 2,
            coefficient,
        }
    }
}

pub fn window_scale(law: ScalingLaw, eps: f64) -> Result<f64, GeometryError> {
    if law.dim < 2 {
        return Err(GeometryError::BadDimension(law.dim));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(GeometryError::Scale { d: f64::NAN, eps });
    }
    if !(law.coefficient > 0.0 && law.coefficient.is_finite()) {
        return Err(GeometryError::InvalidOuter(format!(
            "scaling coefficient must be positive, got {}",
            law.coefficient
        )));
    }
    let d = if law.dim == 2 {
        (-1.0 / (law.coefficient * eps * eps)).exp()
    } else {
        let n = law.dim as f64;
        law.coefficient * eps.powf(n / (n - 2.0))
    };
    if d >= eps || !(d > 0.0) {
        return Err(GeometryError::Scale { d, eps });
    }
    Ok(d)
}

/// `gamma = cap / (4 |B|)`.
pub fn gamma_of(cap_value: f64, volume: f64) -> Result<f64, GeometryError> {
    if !(volume > 0.0) {
        return Err(GeometryError::NonPositiveVolume(volume));
    }
    Ok(cap_value / (4.0 * volume))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn centered(d: f64) -> ResonatorSpec {
        ResonatorSpec::new([0.5, 0.5], 0.25, 0.3, d)
    }

    #[test]
    fn single_resonator_in_unit_square() {
        let dom = build_domain(OuterSpec::unit_square(), vec![centered(1e-3)]).unwrap();
        assert!((dom.resonators[0].window_halfwidth() - 3e-4).abs() < 1e-15);
        assert!((dom.windows[0].length() - 6e-4).abs() < 1e-15);
        assert_eq!(dom.slits[0].len(), 6);
        assert!(dom.parameter_chain_holds());
        let r = dom.resonators[0].bounding_rect();
        assert_eq!(r, Rect::new(0.375, 0.625, 0.25, 0.5));
    }

    #[test]
    fn coincident_resonators_overlap() {
        let err = build_domain(OuterSpec::unit_square(), vec![centered(1e-3), centered(1e-3)])
            .unwrap_err();
        assert_eq!(err, GeometryError::Overlap { first: 0, second: 1 });
    }

    #[test]
    fn window_scale_equal_to_eps_is_rejected() {
        let err = build_domain(OuterSpec::unit_square(), vec![centered(0.25)]).unwrap_err();
        assert!(matches!(err, GeometryError::Window { index: 0, .. }));
    }

    #[test]
    fn resonator_touching_boundary_is_rejected() {
        let r = ResonatorSpec::new([0.5, 1.0], 0.25, 0.3, 1e-3);
        let err = build_domain(OuterSpec::unit_square(), vec![r]).unwrap_err();
        assert_eq!(err, GeometryError::OutsideDomain { index: 0 });
    }

    #[test]
    fn waveguide_notch_excludes_resonators() {
        let wg = OuterSpec::TruncatedWaveguide {
            full_width: 1.0,
            narrow_width: 0.7,
            narrow_halflength: 1.5,
            truncation_halflength: 6.0,
        };
        let inside = ResonatorSpec::new([0.75, 0.125], 0.25, 0.3, 1e-3);
        assert!(build_domain(wg, vec![inside]).is_ok());
        // top edge at y = 0.4 pokes into the excluded band above the narrowing
        let poking = ResonatorSpec::new([0.75, 0.4], 0.25, 0.3, 1e-3);
        assert_eq!(
            build_domain(wg, vec![poking]).unwrap_err(),
            GeometryError::OutsideDomain { index: 0 }
        );
        let bad = OuterSpec::TruncatedWaveguide {
            full_width: 1.0,
            narrow_width: 1.0,
            narrow_halflength: 1.5,
            truncation_halflength: 6.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_scale_examples() {
        let d = window_scale(ScalingLaw { dim: 3, coefficient: 1.0 }, 0.1).unwrap();
        assert!((d - 1e-3).abs() < 1e-15);
        // exp(-1 / (2.546 * 0.0625)) computed independently: 1/0.159125 = 6.28436...
        let d = window_scale(ScalingLaw::planar(2.546), 0.25).unwrap();
        let expected = (-6.284_367_635_506_677_f64).exp();
        assert!((d - expected).abs() < 1e-12 * expected);
        assert!((d - 1.87e-3).abs() < 0.01e-3);
        assert!(matches!(
            window_scale(ScalingLaw::planar(100.0), 0.9),
            Err(GeometryError::Scale { .. })
        ));
        assert!(matches!(
            window_scale(ScalingLaw { dim: 1, coefficient: 1.0 }, 0.5),
            Err(GeometryError::BadDimension(1))
        ));
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_of(1.0, 0.0625).unwrap(), 4.0);
        assert_eq!(gamma_of(0.0, 0.0625).unwrap(), 0.0);
        assert!(matches!(gamma_of(1.0, 0.0), Err(GeometryError::NonPositiveVolume(_))));
    }

    #[test]
    fn scene_rejects_unknown_fields() {
        let ok = r#"{"outer":{"kind":"rectangle","width":1,"height":1},
                     "resonators":[{"center":[0.5,0.5],"eps":0.25,"ell":0.3,"d":0.001}]}"#;
        assert!(Scene::from_json(ok).unwrap().build().is_ok());
        let extra = r#"{"outer":{"kind":"rectangle","width":1,"height":1},"colour":"red"}"#;
        assert!(Scene::from_json(extra).is_err());
        let extra_res = r#"{"outer":{"kind":"rectangle","width":1,"height":1},
                     "resonators":[{"center":[0.5,0.5],"eps":0.25,"ell":0.3,"d":0.001,"r":1}]}"#;
        assert!(Scene::from_json(extra_res).is_err());
        let extra_outer = r#"{"outer":{"kind":"rectangle","width":1,"height":1,"depth":2}}"#;
        assert!(Scene::from_json(extra_outer).is_err());
    }

    proptest! {
        #[test]
        fn window_scale_increases_with_coefficient(
            eps in 0.05f64..0.6, c in 0.01f64..5.0, bump in 1.001f64..2.0, dim in 2u32..5
        ) {
            let law = |c| ScalingLaw { dim, coefficient: c };
            if let (Ok(lo), Ok(hi)) = (window_scale(law(c), eps), window_scale(law(c * bump), eps)) {
                prop_assert!(hi > lo);
                prop_assert!(hi < eps);
            }
        }

        #[test]
        fn gamma_is_linear_and_inverse(cap in 0.0f64..10.0, vol in 1e-4f64..2.0, k in 0.1f64..10.0) {
            let g = gamma_of(cap, vol).unwrap();
            prop_assert!((gamma_of(k * cap, vol).unwrap() - k * g).abs() <= 1e-12 * (1.0 + k * g));
            prop_assert!((gamma_of(cap, k * vol).unwrap() - g / k).abs() <= 1e-12 * (1.0 + g));
        }

        #[test]
        fn valid_domains_satisfy_chain(
            x in 0.2f64..0.8, y in 0.35f64..0.8, eps in 0.05f64..0.3, ell in 0.01f64..0.49, t in 0.01f64..0.99
        ) {
            let r = ResonatorSpec::new([x, y], eps, ell, t * eps);
            if let Ok(dom) = build_domain(OuterSpec::unit_square(), vec![r]) {
                prop_assert!(dom.parameter_chain_holds());
            }
        }
    }
}
