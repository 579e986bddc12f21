//! Exact arithmetic on categorical distributions over a shared vocabulary.
//!
//! All logarithms are natural. Wherever a log of the second argument is taken
//! it is floored at [`EPSILON_FLOOR`] so divergences stay finite.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to `q` before any logarithm.
pub const EPSILON_FLOOR: f64 = 1e-12;

/// Sums within this distance of one are accepted as-is.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

/// Sums within this distance of one are renormalized; anything further is rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("vocabulary mismatch: {left} vs {right} tokens")]
    VocabularyMismatch { left: usize, right: usize },
    #[error("vocabulary must contain at least 2 tokens, got {0}")]
    VocabularyTooSmall(usize),
    #[error("probability at index {index} is invalid: {value}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, too far from 1")]
    NotNormalized { sum: f64 },
    #[error("residual distribution has zero mass (p == q)")]
    DegenerateResidual,
    #[error("temperature must be non-negative, got {0}")]
    InvalidTemperature(f64),
}

/// Size of the token vocabulary shared by every model in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary(usize);

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self, DistError> {
        if size < 2 {
            return Err(DistError::VocabularyTooSmall(size));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }
}

/// A normalized probability vector over token indices `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates `probs`, renormalizing small drift (≤ 1e-6) away.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        Vocabulary::new(probs.len())?;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(DistError::InvalidProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        let drift = (sum - 1.0).abs();
        if drift <= NORMALIZATION_TOLERANCE {
            Ok(Self { probs })
        } else if drift <= RENORMALIZE_TOLERANCE {
            Ok(Self {
                probs: probs.into_iter().map(|p| p / sum).collect(),
            })
        } else {
            Err(DistError::NotNormalized { sum })
        }
    }

    /// Normalizes an arbitrary non-negative weight vector with positive mass.
    pub fn from_weights(weights: &[f64]) -> Result<Self, DistError> {
        Vocabulary::new(weights.len())?;
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(DistError::InvalidProbability { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(DistError::NotNormalized { sum });
        }
        Ok(Self {
            probs: weights.iter().map(|w| w / sum).collect(),
        })
    }

    /// Softmax of a logit vector. `-inf` entries get probability zero.
    pub fn softmax(logits: &[f64]) -> Self {
        assert!(logits.len() >= 2, "softmax needs at least two logits");
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / sum).collect(),
        }
    }

    pub fn uniform(size: usize) -> Result<Self, DistError> {
        Vocabulary::new(size)?;
        Ok(Self {
            probs: vec![1.0 / size as f64; size],
        })
    }

    pub fn one_hot(size: usize, index: usize) -> Result<Self, DistError> {
        Vocabulary::new(size)?;
        if index >= size {
            return Err(DistError::InvalidProbability {
                index,
                value: 1.0,
            });
        }
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }

    /// Lowest index among the maximal entries.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw from one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sample_with_uniform(rng.gen::<f64>())
    }

    /// Inverse-CDF lookup for a uniform `u ∈ [0, 1)`. Rounding overflow lands
    /// on the last token with positive mass.
    pub fn sample_with_uniform(&self, u: f64) -> usize {
        let mut cumulative = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                cumulative += p;
                if u < cumulative {
                    return i;
                }
            }
        }
        last_positive
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = DistError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl<'de> Deserialize<'de> for Categorical {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(deserializer)?;
        Self::new(probs).map_err(serde::de::Error::custom)
    }
}

fn check_same(p: &Categorical, q: &Categorical) -> Result<(), DistError> {
    if p.len() != q.len() {
        return Err(DistError::VocabularyMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// `Σ_x min(p(x), q(x))`, the per-step probability that a drafted token survives.
pub fn acceptance_overlap(p: &Categorical, q: &Categorical) -> Result<f64, DistError> {
    check_same(p, q)?;
    let overlap: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| a.min(b))
        .sum();
    Ok(overlap.clamp(0.0, 1.0))
}

/// `½ Σ_x |p(x) − q(x)|`.
pub fn total_variation(p: &Categorical, q: &Categorical) -> Result<f64, DistError> {
    check_same(p, q)?;
    let tv: f64 = 0.5
        * p.probs
            .iter()
            .zip(&q.probs)
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

pub fn kl_divergence(p: &Categorical, q: &Categorical) -> Result<f64, DistError> {
    kl_divergence_with_floor(p, q, EPSILON_FLOOR)
}

/// `Σ_x p(x) ln(p(x) / max(q(x), floor))`; zero-probability terms of `p` drop out.
///
/// Flooring can push the raw sum a hair below zero when `q` has entries under
/// the floor, so the result is clamped at zero.
pub fn kl_divergence_with_floor(
    p: &Categorical,
    q: &Categorical,
    floor: f64,
) -> Result<f64, DistError> {
    check_same(p, q)?;
    let kl: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(floor).ln()))
        .sum();
    Ok(kl.max(0.0))
}

pub fn cross_entropy(p: &Categorical, q: &Categorical) -> Result<f64, DistError> {
    cross_entropy_with_floor(p, q, EPSILON_FLOOR)
}

/// `−Σ_x p(x) ln max(q(x), floor)`.
pub fn cross_entropy_with_floor(
    p: &Categorical,
    q: &Categorical,
    floor: f64,
) -> Result<f64, DistError> {
    check_same(p, q)?;
    let ce: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| -a * b.max(floor).ln())
        .sum();
    Ok(ce.max(0.0))
}

/// Residual law `norm(max(p − q, 0))` sampled after a rejection.
///
/// Fails when the positive part has mass ≤ 1e-12, i.e. `p` and `q` agree.
pub fn residual(p: &Categorical, q: &Categorical) -> Result<Categorical, DistError> {
    check_same(p, q)?;
    let excess: Vec<f64> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| (a - b).max(0.0))
        .collect();
    let mass: f64 = excess.iter().sum();
    if mass <= NORMALIZATION_TOLERANCE {
        return Err(DistError::DegenerateResidual);
    }
    Ok(Categorical {
        probs: excess.into_iter().map(|e| e / mass).collect(),
    })
}

/// Rescales `d` by temperature `t`: `softmax(ln(max(d, ε)) / t)` for `t > 0`,
/// one-hot at the argmax (lowest index on ties) for `t = 0`.
/// `t = +∞` yields the uniform distribution.
pub fn temperature_scale(d: &Categorical, t: f64) -> Result<Categorical, DistError> {
    if t.is_nan() || t < 0.0 {
        return Err(DistError::InvalidTemperature(t));
    }
    if t == 0.0 {
        return Categorical::one_hot(d.len(), d.argmax());
    }
    if t == 1.0 {
        return Ok(d.clone());
    }
    if t.is_infinite() {
        return Categorical::uniform(d.len());
    }
    let logits: Vec<f64> = d
        .probs
        .iter()
        .map(|&p| p.max(EPSILON_FLOOR).ln() / t)
        .collect();
    Ok(Categorical::softmax(&logits))
}
