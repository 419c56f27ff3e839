//! Soft, Top-k, Top-p, and Top-(p,k) expert selection, plus the
//! entropy-dispatched hybrid router.
//!
//! The hybrid rule examines each token's router distribution: when its
//! normalized Tsallis entropy exceeds a threshold the token is routed softly
//! to every expert; otherwise Top-(p,k) picks the smallest high-probability
//! prefix, with a floor of k experts, and the surviving weights are
//! renormalized to sum to 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entropy::{normalized_tsallis, EntropicIndex, ProbDist};
use crate::error::{Error, Result};

/// Slack on cumulative-probability comparisons, matching the tolerance a
/// valid [`ProbDist`] is allowed on Σ pᵢ = 1. Keeps `p = 1.0` selecting
/// exactly the nonzero support instead of tripping on rounding.
pub const CUM_PROB_TOL: f64 = 1e-9;

/// Which routing branch fired for a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// High entropy: all experts active, weighted by the full distribution.
    Soft,
    /// Top-p prefix covered at least `keep_top_k` experts.
    TopP,
    /// Top-p came up short; fell back to the k highest-probability experts.
    TopKFallback,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Soft => "Soft",
            Strategy::TopP => "TopP",
            Strategy::TopKFallback => "TopKFallback",
        };
        f.write_str(s)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Soft" => Ok(Strategy::Soft),
            "TopP" => Ok(Strategy::TopP),
            "TopKFallback" => Ok(Strategy::TopKFallback),
            other => Err(Error::Usage(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Hyperparameters of the hybrid router.
///
/// Defaults are the reference configuration: 6 experts, p = 0.75, k = 2,
/// threshold 0.9, entropic index 1.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    /// Number of experts N.
    pub n_experts: usize,
    /// Cumulative-probability threshold p ∈ (0, 1] of Top-p selection.
    pub top_p: f64,
    /// Minimum number of experts activated by the sparse branch.
    pub keep_top_k: usize,
    /// Normalized-entropy threshold in [0, 1] above which routing is soft.
    pub entropy_threshold: f64,
    /// Entropic index q used for the routing entropy.
    pub entropic_index: EntropicIndex,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            n_experts: 6,
            top_p: 0.75,
            keep_top_k: 2,
            entropy_threshold: 0.9,
            entropic_index: EntropicIndex::new(1.1).unwrap(),
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be ≥ 1".into()));
        }
        if self.keep_top_k == 0 || self.keep_top_k > self.n_experts {
            return Err(Error::Config(format!(
                "keep_top_k = {} out of range [1, {}]",
                self.keep_top_k, self.n_experts
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p = {} outside (0, 1]",
                self.top_p
            )));
        }
        if !(self.entropy_threshold >= 0.0 && self.entropy_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "entropy_threshold = {} outside [0, 1]",
                self.entropy_threshold
            )));
        }
        self.entropic_index
            .validate()
            .map_err(|e| Error::Config(format!("entropic_index: {e}")))
    }
}

/// Outcome of routing one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub strategy: Strategy,
    /// Selected expert indices, ascending. All N experts under `Soft`.
    pub selected: Vec<usize>,
    /// Length-N mixture weights: zero outside `selected`, summing to 1.
    pub weights: Vec<f64>,
    /// The full pre-selection distribution.
    pub raw_dist: ProbDist,
    /// Normalized Tsallis entropy the dispatch compared against.
    pub entropy_norm: f64,
}

impl RouterDecision {
    /// Index of the most confidently routed expert (argmax of `raw_dist`).
    pub fn argmax_expert(&self) -> usize {
        self.raw_dist.argmax()
    }
}

/// Probabilities in non-increasing order, ties broken by ascending index.
pub fn sort_probs(dist: &ProbDist) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = dist.p().iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// The k highest-probability experts under the tie rule, ascending indices.
pub fn top_k_select(dist: &ProbDist, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > dist.len() {
        return Err(Error::Config(format!(
            "top_k_select: k = {k} out of range [1, {}]",
            dist.len()
        )));
    }
    let mut sel: Vec<usize> = sort_probs(dist).iter().take(k).map(|(i, _)| *i).collect();
    sel.sort_unstable();
    Ok(sel)
}

/// Smallest prefix of the sorted distribution whose cumulative probability
/// reaches `p` (within [`CUM_PROB_TOL`]); never empty. Ascending indices.
pub fn top_p_select(dist: &ProbDist, p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!(
            "top_p_select: p = {p} outside (0, 1]"
        )));
    }
    let ranked = sort_probs(dist);
    let mut cum = 0.0;
    let mut cutoff = ranked.len();
    for (i, (_, prob)) in ranked.iter().enumerate() {
        cum += prob;
        if cum >= p - CUM_PROB_TOL {
            cutoff = i + 1;
            break;
        }
    }
    let mut sel: Vec<usize> = ranked[..cutoff].iter().map(|(i, _)| *i).collect();
    sel.sort_unstable();
    Ok(sel)
}

/// Top-p with a floor of k experts: returns the Top-p set when it already
/// activates at least k experts, otherwise the Top-k set, with a flag saying
/// whether the fallback fired.
pub fn top_pk_select(dist: &ProbDist, p: f64, k: usize) -> Result<(Vec<usize>, bool)> {
    let by_p = top_p_select(dist, p)?;
    if by_p.len() >= k {
        Ok((by_p, false))
    } else {
        Ok((top_k_select(dist, k)?, true))
    }
}

/// Entropy-dispatched hybrid routing.
///
/// Computes the normalized Tsallis entropy `e` of `dist`; when `e` strictly
/// exceeds the threshold the token is routed softly to all experts with the
/// distribution itself as weights, otherwise Top-(p,k) selects a sparse set
/// and the surviving probabilities are renormalized to sum to 1.
pub fn hybrid_route(dist: &ProbDist, cfg: &RoutingConfig) -> Result<RouterDecision> {
    cfg.validate()?;
    if dist.len() != cfg.n_experts {
        return Err(Error::Shape(format!(
            "distribution over {} experts, config says {}",
            dist.len(),
            cfg.n_experts
        )));
    }
    if cfg.n_experts < 2 {
        return Err(Error::Domain(
            "hybrid routing needs at least 2 experts".into(),
        ));
    }
    let e = normalized_tsallis(dist, cfg.entropic_index)?;
    if e > cfg.entropy_threshold {
        return Ok(RouterDecision {
            strategy: Strategy::Soft,
            selected: (0..cfg.n_experts).collect(),
            weights: dist.p().to_vec(),
            raw_dist: dist.clone(),
            entropy_norm: e,
        });
    }
    let (selected, used_fallback) = top_pk_select(dist, cfg.top_p, cfg.keep_top_k)?;
    let total: f64 = selected.iter().map(|&i| dist.p()[i]).sum();
    let mut weights = vec![0.0; cfg.n_experts];
    for &i in &selected {
        weights[i] = dist.p()[i] / total;
    }
    Ok(RouterDecision {
        strategy: if used_fallback {
            Strategy::TopKFallback
        } else {
            Strategy::TopP
        },
        selected,
        weights,
        raw_dist: dist.clone(),
        entropy_norm: e,
    })
}
