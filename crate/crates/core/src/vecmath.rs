//! Distance and similarity kernels shared by clustering, prototype building
//! and classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to squared Euclidean distances before inversion. Collocated
/// feature/prototype pairs saturate at the corresponding ceiling instead of
/// dividing by zero; this is documented behavior, not an error.
pub const DISTANCE_FLOOR: f64 = 1e-12;

/// Similarity between a feature and a prototype. The default inverts the
/// squared Euclidean distance: `(d^2)^-gamma`. Exponents 1 and 2 are the
/// studied settings; any positive exponent up to [`MAX_GAMMA`] is accepted.
/// Because `x^-gamma` is strictly decreasing for `x > 0`, the argmax over
/// prototypes does not depend on gamma.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilarityMetric {
    InvSqEuclidean {
        #[serde(default = "default_gamma")]
        gamma: u32,
    },
    Cosine,
    DotProduct,
}

/// Largest accepted inverse-distance exponent. `(1e-12)^-16 = 1e192` still
/// leaves finite headroom in f64; larger exponents would overflow at the
/// distance floor.
pub const MAX_GAMMA: u32 = 16;

fn default_gamma() -> u32 {
    2
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        SimilarityMetric::InvSqEuclidean { gamma: default_gamma() }
    }
}

impl SimilarityMetric {
    pub fn validate(&self) -> Result<()> {
        if let SimilarityMetric::InvSqEuclidean { gamma } = self {
            if *gamma == 0 || *gamma > MAX_GAMMA {
                return Err(Error::invalid_config(format!(
                    "inverse-distance exponent must be in 1..={MAX_GAMMA}, got {gamma}"
                )));
            }
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit L2 norm. Zero-norm and non-finite inputs are domain
/// errors; `context` names the offending vector in the error.
pub fn l2_normalize(v: &[f64], context: &str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite(context.to_string()));
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::zero_vector(context.to_string()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Widens an f32 vector and scales it to unit L2 norm.
pub fn l2_normalize_f32(v: &[f32], context: &str) -> Result<Vec<f64>> {
    let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    l2_normalize(&wide, context)
}

/// Similarity of feature `f` to prototype `p` under `metric`. Callers are
/// expected to pass an L2-normalized feature; prototypes are used as stored.
pub fn similarity(f: &[f64], p: &[f64], metric: SimilarityMetric) -> Result<f64> {
    if f.len() != p.len() {
        return Err(Error::dim_mismatch("similarity operands", f.len(), p.len()));
    }
    match metric {
        SimilarityMetric::InvSqEuclidean { gamma } => {
            metric.validate()?;
            let d2 = squared_euclidean(f, p).max(DISTANCE_FLOOR);
            Ok(d2.powi(-(gamma as i32)))
        }
        SimilarityMetric::Cosine => {
            let nf = norm(f);
            let np = norm(p);
            if nf == 0.0 {
                return Err(Error::zero_vector("cosine similarity feature"));
            }
            if np == 0.0 {
                return Err(Error::zero_vector("cosine similarity prototype"));
            }
            Ok(dot(f, p) / (nf * np))
        }
        SimilarityMetric::DotProduct => Ok(dot(p, f) - 0.5 * dot(p, p)),
    }
}
