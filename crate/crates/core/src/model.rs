//! Spectrum of the limit operator and the set distances used to compare spectra.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("empty set")]
    EmptySet,
    #[error("cutoffs differ: {0} vs {1}")]
    CutoffMismatch(f64, f64),
    #[error("dimension {0} is not supported (need n >= 2)")]
    BadDimension(u32),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Label {
    Bulk,
    Resonator(usize),
}

/// Finite truncation of a spectrum below `cutoff`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSet {
    pub values: Vec<f64>,
    pub cutoff: f64,
    pub labels: Option<Vec<Label>>,
}

impl SpectrumSet {
    /// Sorts the values; the cutoff is raised to the largest value if needed.
    pub fn new(mut values: Vec<f64>, cutoff: f64) -> Result<SpectrumSet, ModelError> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::Parameter("values must be finite and nonnegative".into()));
        }
        values.sort_by(f64::total_cmp);
        let top = values.last().copied().unwrap_or(0.0);
        Ok(SpectrumSet { values, cutoff: cutoff.max(top), labels: None })
    }

    /// Keep only values not above `cutoff` and set the cutoff.
    pub fn truncate(&self, cutoff: f64) -> SpectrumSet {
        let keep: Vec<usize> = (0..self.values.len()).filter(|&i| self.values[i] <= cutoff).collect();
        SpectrumSet {
            values: keep.iter().map(|&i| self.values[i]).collect(),
            cutoff,
            labels: self.labels.as_ref().map(|l| keep.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// First `count` Dirichlet eigenvalues `π²(p²/a² + q²/b²)` of the rectangle `a × b`.
pub fn rect_dirichlet_eigs(a: f64, b: f64, count: usize) -> Result<SpectrumSet, ModelError> {
    if count == 0 {
        return Err(ModelError::Parameter("count must be at least 1".into()));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(ModelError::Parameter(format!("side lengths {a}, {b} must be positive")));
    }
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let mut vals = Vec::with_capacity(count * count);
    for p in 1..=count {
        for q in 1..=count {
            let (p, q) = (p as f64, q as f64);
            vals.push(pi2 * (p * p / (a * a) + q * q / (b * b)));
        }
    }
    vals.sort_by(f64::total_cmp);
    vals.truncate(count);
    let cutoff = vals[count - 1];
    Ok(SpectrumSet {
        labels: Some(vec![Label::Bulk; count]),
        values: vals,
        cutoff,
    })
}

/// Multiset union of the bulk spectrum with the resonator values `γ_k`.
pub fn limit_spectrum(dirichlet: &SpectrumSet, gammas: &[f64]) -> Result<SpectrumSet, ModelError> {
    if gammas.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(ModelError::Parameter("gammas must be finite and nonnegative".into()));
    }
    let base_labels = dirichlet
        .labels
        .clone()
        .unwrap_or_else(|| vec![Label::Bulk; dirichlet.values.len()]);
    let mut pairs: Vec<(f64, Label)> = dirichlet.values.iter().copied().zip(base_labels).collect();
    pairs.extend(gammas.iter().enumerate().map(|(k, &g)| (g, Label::Resonator(k))));
    // stable: for equal values the bulk entry stays first
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let cutoff = gammas.iter().copied().fold(dirichlet.cutoff, f64::max);
    Ok(SpectrumSet {
        values: pairs.iter().map(|p| p.0).collect(),
        labels: Some(pairs.iter().map(|p| p.1).collect()),
        cutoff,
    })
}

/// `sup_{x∈X} inf_{y∈Y} |x − y|` with `ys` sorted.
fn directed(xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter()
        .map(|&x| {
            let i = ys.partition_point(|&y| y < x);
            let mut best = f64::INFINITY;
            if i < ys.len() {
                best = best.min((ys[i] - x).abs());
            }
            if i > 0 {
                best = best.min((x - ys[i - 1]).abs());
            }
            best
        })
        .fold(0.0, f64::max)
}

/// Hausdorff distance between two finite point sets on the line.
pub fn hausdorff_values(x: &[f64], y: &[f64]) -> Result<f64, ModelError> {
    if x.is_empty() || y.is_empty() {
        return Err(ModelError::EmptySet);
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    Ok(directed(&xs, &ys).max(directed(&ys, &xs)))
}

pub fn hausdorff(x: &SpectrumSet, y: &SpectrumSet) -> Result<f64, ModelError> {
    hausdorff_values(&x.values, &y.values)
}

/// Distance after `t ↦ 1/(1+t)` together with the truncation bound `1/(1+Λ_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TildeDistance {
    pub value: f64,
    pub truncation_bound: f64,
}

pub fn tilde_transform(v: f64) -> f64 {
    1.0 / (1.0 + v)
}

pub fn tilde_hausdorff(x: &SpectrumSet, y: &SpectrumSet) -> Result<TildeDistance, ModelError> {
    if x.is_empty() || y.is_empty() {
        return Err(ModelError::EmptySet);
    }
    let scale = x.cutoff.abs().max(y.cutoff.abs()).max(1.0);
    if (x.cutoff - y.cutoff).abs() > 1e-12 * scale {
        return Err(ModelError::CutoffMismatch(x.cutoff, y.cutoff));
    }
    let tx: Vec<f64> = x.values.iter().map(|&v| tilde_transform(v)).collect();
    let ty: Vec<f64> = y.values.iter().map(|&v| tilde_transform(v)).collect();
    Ok(TildeDistance {
        value: hausdorff_values(&tx, &ty)?,
        truncation_bound: tilde_transform(x.cutoff),
    })
}

/// Inputs of the rate bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFactor {
    pub n: u32,
    pub eps: f64,
    /// `Σ_k |γ_{k,ε} − γ_k|`
    pub gamma_err: f64,
}

/// `gamma_err + ε|ln ε|^{3/2}` in the plane, `gamma_err + ε` for `n ≥ 3`.
pub fn rate_factor(rf: RateFactor) -> Result<f64, ModelError> {
    if rf.n < 2 {
        return Err(ModelError::BadDimension(rf.n));
    }
    if !(rf.eps > 0.0 && rf.eps < 1.0) {
        return Err(ModelError::Parameter(format!("eps = {} outside (0, 1)", rf.eps)));
    }
    if !(rf.gamma_err >= 0.0) {
        return Err(ModelError::Parameter(format!("gamma_err = {} must be nonnegative", rf.gamma_err)));
    }
    let tail = if rf.n == 2 {
        rf.eps * rf.eps.ln().abs().powf(1.5)
    } else {
        rf.eps
    };
    Ok(rf.gamma_err + tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn square_and_rectangle() {
        let s = rect_dirichlet_eigs(1.0, 1.0, 4).unwrap();
        let pi2 = PI * PI;
        assert_eq!(s.values, vec![2.0 * pi2, 5.0 * pi2, 5.0 * pi2, 8.0 * pi2]);
        let r = rect_dirichlet_eigs(2.0, 1.0, 1).unwrap();
        assert!((r.values[0] - 1.25 * pi2).abs() < 1e-12);
        assert!(rect_dirichlet_eigs(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn union_keeps_labels() {
        let d = SpectrumSet::new(vec![19.739, 49.348], 50.0).unwrap();
        let l = limit_spectrum(&d, &[4.0]).unwrap();
        assert_eq!(l.values, vec![4.0, 19.739, 49.348]);
        assert_eq!(l.labels.as_ref().unwrap()[0], Label::Resonator(0));
        assert_eq!(limit_spectrum(&d, &[]).unwrap().values, d.values);
        let l = limit_spectrum(&d, &[19.739]).unwrap();
        assert_eq!(l.values, vec![19.739, 19.739, 49.348]);
        assert_eq!(l.labels.unwrap()[..2], [Label::Bulk, Label::Resonator(0)]);
    }

    #[test]
    fn distance_examples() {
        let one = SpectrumSet::new(vec![1.0], 1.0).unwrap();
        assert_eq!(hausdorff(&one, &one).unwrap(), 0.0);
        assert_eq!(hausdorff_values(&[0.0, 1.0], &[0.0]).unwrap(), 1.0);
        let x = SpectrumSet::new(vec![0.0], 1.0).unwrap();
        let y = SpectrumSet::new(vec![1.0], 1.0).unwrap();
        assert_eq!(tilde_hausdorff(&x, &y).unwrap().value, 0.5);
        let z = SpectrumSet::new(vec![1.0], 2.0).unwrap();
        assert!(matches!(tilde_hausdorff(&x, &z), Err(ModelError::CutoffMismatch(..))));
        assert_eq!(hausdorff_values(&[], &[1.0]), Err(ModelError::EmptySet));
    }

    #[test]
    fn rate_examples() {
        let e = (-1.0f64).exp();
        let r = rate_factor(RateFactor { n: 2, eps: e, gamma_err: 0.0 }).unwrap();
        assert!((r - e).abs() < 1e-15);
        let r = rate_factor(RateFactor { n: 3, eps: 0.1, gamma_err: 0.05 }).unwrap();
        assert!((r - 0.15).abs() < 1e-15);
        assert!(rate_factor(RateFactor { n: 2, eps: 1.0, gamma_err: 0.0 }).is_err());
        assert_eq!(rate_factor(RateFactor { n: 1, eps: 0.5, gamma_err: 0.0 }), Err(ModelError::BadDimension(1)));
    }

    proptest! {
        #[test]
        fn tilde_never_exceeds_plain(xs in prop::collection::vec(0.0f64..100.0, 1..12),
                                     ys in prop::collection::vec(0.0f64..100.0, 1..12)) {
            let top = xs.iter().chain(&ys).copied().fold(0.0, f64::max);
            let x = SpectrumSet::new(xs, top).unwrap();
            let y = SpectrumSet::new(ys, top).unwrap();
            let t = tilde_hausdorff(&x, &y).unwrap().value;
            prop_assert!(t <= hausdorff(&x, &y).unwrap() + 1e-15);
            prop_assert!((0.0..=1.0).contains(&t));
        }

        #[test]
        fn union_length_and_order(vals in prop::collection::vec(0.0f64..100.0, 1..10),
                                  gammas in prop::collection::vec(0.0f64..100.0, 0..4)) {
            let d = SpectrumSet::new(vals, 100.0).unwrap();
            let l = limit_spectrum(&d, &gammas).unwrap();
            prop_assert_eq!(l.len(), d.len() + gammas.len());
            prop_assert!(l.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
