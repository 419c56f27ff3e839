//! Task loss and the auxiliary objective: a Tsallis entropy loss over the
//! batch's router distributions plus a Switch-style load-balance loss, with
//! exact gradients through each token's softmax.
//!
//! `L_entropy  = β · (1/T) Σ_tokens S_q(raw_dist)`   (raw, unnormalized S_q)
//! `L_balance  = α · N · Σᵢ fᵢ · Pᵢ`
//! `L_auxiliary = L_balance + L_entropy`
//!
//! `fᵢ` is the fraction of expert-activations that went to expert i (a token
//! counts once per selected expert, so variable-size selections are handled),
//! and `Pᵢ` is the batch mean of the full router distribution. Minimizing the
//! entropy term drives router distributions toward one-hot; minimizing the
//! balance term pushes dispatch toward uniform.

use serde::{Deserialize, Serialize};

use crate::entropy::{shannon_grad, tsallis_entropy, tsallis_grad, EntropicIndex, ProbDist};
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::routing::RouterDecision;

/// Coefficients of the auxiliary objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Entropy-loss coefficient β ≥ 0.
    pub beta: f64,
    /// Load-balance coefficient α ≥ 0.
    pub alpha: f64,
    /// Entropic index of the entropy loss.
    pub q: EntropicIndex,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1e-2,
            alpha: 1e-2,
            q: EntropicIndex::new(1.1).unwrap(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be ≥ 0, got {}",
                self.beta
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be ≥ 0, got {}",
                self.alpha
            )));
        }
        self.q
            .validate()
            .map_err(|e| Error::Config(format!("loss q: {e}")))
    }
}

/// Routing statistics of one batch: the per-token decisions plus the
/// per-expert dispatch fractions fᵢ and mean probabilities Pᵢ.
#[derive(Debug, Clone)]
pub struct BatchRoutingStats {
    decisions: Vec<RouterDecision>,
    dispatch_fraction: Vec<f64>,
    mean_prob: Vec<f64>,
}

impl BatchRoutingStats {
    /// Aggregate a batch of routing decisions over `n` experts.
    pub fn from_decisions(decisions: Vec<RouterDecision>, n: usize) -> Result<Self> {
        if decisions.is_empty() {
            return Err(Error::Usage("batch must contain at least one token".into()));
        }
        let mut counts = vec![0usize; n];
        let mut mean_prob = vec![0.0; n];
        for d in &decisions {
            if d.raw_dist.len() != n {
                return Err(Error::Shape(format!(
                    "decision over {} experts in a batch of {n}",
                    d.raw_dist.len()
                )));
            }
            for &i in &d.selected {
                counts[i] += 1;
            }
            for (acc, &p) in mean_prob.iter_mut().zip(d.raw_dist.p()) {
                *acc += p;
            }
        }
        let total: usize = counts.iter().sum();
        let t = decisions.len() as f64;
        let dispatch_fraction = counts.iter().map(|&c| c as f64 / total as f64).collect();
        for acc in &mut mean_prob {
            *acc /= t;
        }
        Ok(Self {
            decisions,
            dispatch_fraction,
            mean_prob,
        })
    }

    pub fn decisions(&self) -> &[RouterDecision] {
        &self.decisions
    }

    pub fn n_tokens(&self) -> usize {
        self.decisions.len()
    }

    /// fᵢ: fraction of activations dispatched to each expert; sums to 1.
    pub fn dispatch_fraction(&self) -> &[f64] {
        &self.dispatch_fraction
    }

    /// Pᵢ: batch mean of the full router distribution; sums to 1.
    pub fn mean_prob(&self) -> &[f64] {
        &self.mean_prob
    }
}

/// `β · (1/T) Σ_tokens S_q(raw_dist)`, the mean raw Tsallis entropy of the
/// batch's router distributions.
pub fn entropy_loss(stats: &BatchRoutingStats, cfg: &LossConfig) -> f64 {
    if cfg.beta == 0.0 {
        return 0.0;
    }
    let t = stats.n_tokens() as f64;
    let sum: f64 = stats
        .decisions()
        .iter()
        .map(|d| tsallis_entropy(&d.raw_dist, cfg.q))
        .sum();
    cfg.beta * sum / t
}

/// `α · N · Σᵢ fᵢ Pᵢ`. Exactly α on a perfectly uniform batch and α·N when
/// every token collapses onto one expert with probability 1.
pub fn load_balance_loss(stats: &BatchRoutingStats, cfg: &LossConfig, n: usize) -> f64 {
    if cfg.alpha == 0.0 {
        return 0.0;
    }
    let dot: f64 = stats
        .dispatch_fraction()
        .iter()
        .zip(stats.mean_prob())
        .map(|(f, p)| f * p)
        .sum();
    cfg.alpha * n as f64 * dot
}

/// `L_balance + L_entropy`.
pub fn auxiliary_loss(stats: &BatchRoutingStats, cfg: &LossConfig, n: usize) -> f64 {
    load_balance_loss(stats, cfg, n) + entropy_loss(stats, cfg)
}

/// Squared-error task loss `½‖y − y*‖²` and its gradient `y − y*`.
pub fn task_loss(y: &Vector, y_target: &Vector) -> Result<(f64, Vector)> {
    if y.len() != y_target.len() {
        return Err(Error::Shape(format!(
            "task_loss: len {} vs {}",
            y.len(),
            y_target.len()
        )));
    }
    let mut grad = y.clone();
    grad.add_scaled(y_target, -1.0)?;
    let loss = 0.5 * grad.data().iter().map(|v| v * v).sum::<f64>();
    Ok((loss, grad))
}

/// Exact gradient of the auxiliary loss w.r.t. each token's router logits.
///
/// The dispatch fractions fᵢ are piecewise constant in the logits (they
/// change only when a selection set flips), so gradient flows through the
/// smooth parts: the entropy of each token's softmax and the mean
/// probabilities Pᵢ. Per token: `dL/ds = β/T · ∇S_q(s) + αN/T · f`, then the
/// softmax Jacobian maps dL/ds to dL/dz.
pub fn aux_loss_grads(
    stats: &BatchRoutingStats,
    cfg: &LossConfig,
    n: usize,
) -> Result<Vec<Vector>> {
    cfg.validate()?;
    let t = stats.n_tokens() as f64;
    let mut out = Vec::with_capacity(stats.n_tokens());
    for d in stats.decisions() {
        let s = d.raw_dist.p();
        let mut ds = vec![0.0; n];
        if cfg.beta != 0.0 {
            let ent_grad = entropy_grad_for(&d.raw_dist, cfg.q)?;
            for (acc, &g) in ds.iter_mut().zip(ent_grad.data()) {
                *acc += cfg.beta / t * g;
            }
        }
        if cfg.alpha != 0.0 {
            for (acc, &f) in ds.iter_mut().zip(stats.dispatch_fraction()) {
                *acc += cfg.alpha * n as f64 / t * f;
            }
        }
        // Softmax Jacobian: dzₖ = sₖ (dsₖ − Σⱼ dsⱼ sⱼ).
        let dot: f64 = ds.iter().zip(s).map(|(g, p)| g * p).sum();
        out.push(Vector::from_fn(n, |k| s[k] * (ds[k] - dot)));
    }
    Ok(out)
}

/// Entropy gradient dispatched on the entropic index: exact Tsallis away
/// from q = 1, Shannon at the limit.
fn entropy_grad_for(p: &ProbDist, q: EntropicIndex) -> Result<Vector> {
    if q.is_shannon_limit() {
        shannon_grad(p)
    } else {
        tsallis_grad(p, q)
    }
}
