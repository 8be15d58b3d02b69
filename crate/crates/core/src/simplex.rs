//! Fisher-Rao geometry of the probability simplex.
//!
//! The square-root map `w -> sqrt(w)` sends the simplex onto the positive
//! orthant of the unit sphere, where the Fisher-Rao distance is twice the
//! great-circle angle and geodesics are spherical interpolations.

use std::f64::consts::PI;

use crate::{Error, Result};

/// Tolerance on `sum(w) == 1`.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Entries below this magnitude count as zero when testing for a degenerate
/// geodesic.
const ZERO_MASS: f64 = 1e-12;

/// A point on the probability simplex with at least two vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionWeights(Vec<f64>);

impl CompositionWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.len() < 2 {
            return Err(Error::Dimension(format!(
                "composition weights need at least 2 entries, got {}",
                w.len()
            )));
        }
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!("weight {i} is {v}, must be finite and >= 0")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("weights sum to {s}, expected 1")));
        }
        Ok(Self(w))
    }

    /// `1/M` in every entry.
    pub fn uniform(m: usize) -> Result<Self> {
        Self::new(vec![1.0 / m as f64; m])
    }

    /// Vertex `e_i` of the simplex.
    pub fn one_hot(m: usize, i: usize) -> Result<Self> {
        if i >= m {
            return Err(Error::Config(format!("basis index {i} out of range for M = {m}")));
        }
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn same_len(a: &CompositionWeights, b: &CompositionWeights) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "composition weights of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Bhattacharyya coefficient `sum_m sqrt(w_m w2_m)`, clamped to `[-1, 1]`.
fn bhattacharyya(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x * y).sqrt())
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

/// `2 arccos(sum_m sqrt(w_m w2_m))`, in `[0, pi]`.
pub fn fisher_rao_distance(w: &CompositionWeights, w2: &CompositionWeights) -> Result<f64> {
    same_len(w, w2)?;
    Ok(2.0 * bhattacharyya(w.as_slice(), w2.as_slice()).acos())
}

/// `1 - FR(w, w2) / pi`, in `[0, 1]`.
pub fn fr_similarity(w: &CompositionWeights, w2: &CompositionWeights) -> Result<f64> {
    Ok(1.0 - fisher_rao_distance(w, w2)? / PI)
}

/// Point at fraction `alpha` along the Fisher-Rao geodesic from `w` to `w2`.
pub fn geodesic_interpolate(w: &CompositionWeights, w2: &CompositionWeights, alpha: f64) -> Result<CompositionWeights> {
    same_len(w, w2)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("interpolation fraction {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(w.clone());
    }
    if alpha == 1.0 {
        return Ok(w2.clone());
    }
    let cleaned = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| if x < ZERO_MASS { 0.0 } else { x }).collect() };
    let (a, b) = (cleaned(w.as_slice()), cleaned(w2.as_slice()));
    let theta = bhattacharyya(&a, &b).acos();
    if theta == 0.0 {
        return Ok(w.clone());
    }
    let s = theta.sin();
    if (PI - theta).abs() < 1e-12 || s.abs() < 1e-15 {
        return Err(Error::GeodesicUndefined);
    }
    let ca = ((1.0 - alpha) * theta).sin() / s;
    let cb = (alpha * theta).sin() / s;
    let out: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(w2.as_slice())
        .map(|(x, y)| {
            let r = ca * x.sqrt() + cb * y.sqrt();
            r * r
        })
        .collect();
    CompositionWeights::new(out)
}
