//! Shannon and Tsallis entropy of router distributions, their exact
//! gradients, and the normalization used by the routing threshold.
//!
//! Tsallis entropy `S_q(p) = (1 − Σ pᵢ^q) / (q − 1)` generalizes Shannon
//! entropy: as q → 1 it degenerates to `H(p) = −Σ pᵢ log pᵢ` (natural log
//! throughout). The entropic index q tunes how strongly low-probability
//! experts contribute; for q > 1 the entropy gradient vanishes as pᵢ → 0,
//! which is what makes it a stable regularizer compared to Shannon's
//! log-divergent one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Vector};

/// Tolerance for treating an entropic index as the Shannon limit q = 1.
pub const SHANNON_LIMIT_TOL: f64 = 1e-9;

/// Tolerance on Σ pᵢ = 1 when validating a distribution.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Normalized probability vector over N experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    p: Vec<f64>,
}

impl ProbDist {
    /// Validate and wrap: entries finite and ≥ 0, Σ pᵢ = 1 within 1e-9, N ≥ 1.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Domain("probability vector must be nonempty".into()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Domain(format!(
                "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOL}"
            )));
        }
        Ok(Self { p })
    }

    /// Uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("uniform distribution needs n ≥ 1".into()));
        }
        Ok(Self {
            p: vec![1.0 / n as f64; n],
        })
    }

    /// Point mass on outcome `i`.
    pub fn one_hot(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(Error::Domain(format!("one_hot index {i} out of {n}")));
        }
        let mut p = vec![0.0; n];
        p[i] = 1.0;
        Ok(Self { p })
    }

    /// Softmax of raw logits.
    pub fn from_logits(z: &[f64]) -> Result<Self> {
        let s = softmax(z)?;
        Ok(Self {
            p: s.data().to_vec(),
        })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Index of the largest probability, ties broken by ascending index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.p.iter().enumerate().skip(1) {
            if v > self.p[best] {
                best = i;
            }
        }
        best
    }
}

/// Entropic index q of the Tsallis family. q > 0; values within 1e-9 of 1
/// route to the Shannon limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntropicIndex(f64);

impl EntropicIndex {
    pub fn new(q: f64) -> Result<Self> {
        if !q.is_finite() || q <= 0.0 {
            return Err(Error::Domain(format!(
                "entropic index must be > 0, got {q}"
            )));
        }
        Ok(Self(q))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// True when q is within 1e-9 of 1, i.e. the Shannon case.
    pub fn is_shannon_limit(&self) -> bool {
        (self.0 - 1.0).abs() <= SHANNON_LIMIT_TOL
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.0).map(|_| ())
    }
}

/// Shannon entropy `H(p) = −Σ pᵢ log pᵢ` in nats, with 0·log 0 = 0.
pub fn shannon_entropy(p: &ProbDist) -> f64 {
    let h: f64 = p
        .p()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum();
    h.max(0.0)
}

/// Tsallis entropy `S_q(p) = (1 − Σ pᵢ^q) / (q − 1)`, with 0^q = 0.
///
/// For q within 1e-9 of 1 this returns [`shannon_entropy`], the q → 1 limit.
pub fn tsallis_entropy(p: &ProbDist, q: EntropicIndex) -> f64 {
    if q.is_shannon_limit() {
        return shannon_entropy(p);
    }
    let qv = q.value();
    let sum_pq: f64 = p
        .p()
        .iter()
        .map(|&v| if v > 0.0 { v.powf(qv) } else { 0.0 })
        .sum();
    ((1.0 - sum_pq) / (qv - 1.0)).max(0.0)
}

/// Maximum of `S_q` over distributions on `n` outcomes, attained at uniform:
/// `(1 − n^{1−q}) / (q − 1)` for q ≠ 1, `log n` at q = 1.
///
/// Computed as the Tsallis entropy of the uniform distribution so that it is
/// exactly the value [`normalized_tsallis`] divides by.
pub fn tsallis_max(n: usize, q: EntropicIndex) -> Result<f64> {
    let uniform = ProbDist::uniform(n)?;
    Ok(tsallis_entropy(&uniform, q))
}

/// Tsallis entropy rescaled to `[0, 1]`: 0 at one-hot, 1 at uniform.
///
/// Needs N ≥ 2 (a single-outcome distribution has a zero normalizer).
pub fn normalized_tsallis(p: &ProbDist, q: EntropicIndex) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Domain(
            "normalized entropy needs at least 2 outcomes".into(),
        ));
    }
    let max = tsallis_max(p.len(), q)?;
    Ok(tsallis_entropy(p, q) / max)
}

/// Exact gradient `∂S_q/∂pᵢ = −(q/(q−1)) pᵢ^{q−1}`.
///
/// Requires q ≠ 1 (use [`shannon_grad`] for the limit). For q > 1 the
/// component tends to 0 as pᵢ → 0 and is bounded by q/(q−1) on [0, 1]; for
/// q < 1 it diverges at pᵢ = 0, so zero entries are rejected there.
pub fn tsallis_grad(p: &ProbDist, q: EntropicIndex) -> Result<Vector> {
    if q.is_shannon_limit() {
        return Err(Error::Domain(
            "tsallis_grad needs q away from 1; use shannon_grad at the limit".into(),
        ));
    }
    let qv = q.value();
    let coeff = qv / (qv - 1.0);
    let mut g = Vec::with_capacity(p.len());
    for &v in p.p() {
        if v == 0.0 && qv < 1.0 {
            return Err(Error::Domain(
                "tsallis_grad diverges at pᵢ = 0 for q < 1".into(),
            ));
        }
        g.push(-coeff * v.powf(qv - 1.0));
    }
    Vector::new(g)
}

/// Exact Shannon gradient `∂H/∂pᵢ = −(1 + log pᵢ)`.
///
/// Diverges as pᵢ → 0, so any zero entry is a domain error. That divergence
/// is precisely the instability the bounded Tsallis gradient avoids.
pub fn shannon_grad(p: &ProbDist) -> Result<Vector> {
    let mut g = Vec::with_capacity(p.len());
    for &v in p.p() {
        if v <= 0.0 {
            return Err(Error::Domain("shannon_grad diverges at pᵢ = 0".into()));
        }
        g.push(-(1.0 + v.ln()));
    }
    Vector::new(g)
}
