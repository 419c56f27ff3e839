//! LoRA experts and the routed mixture layer: forward pass, exact backward
//! pass, initialization, and bit-exact JSON checkpoints.
//!
//! A layer computes `y = W₀x + Σᵢ wᵢ · Eᵢ(x)` where each expert is a
//! low-rank update `Eᵢ(x) = (α/r) · Bᵢ Aᵢ x`, the mixture weights come from
//! the hybrid router, and `W₀` is a frozen stand-in for pretrained weights.
//! Gradients flow through the continuous weights of the selected experts
//! only; the discrete selection set is treated as a constant.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::ProbDist;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState, Vector};
use crate::routing::{hybrid_route, RouterDecision, RoutingConfig, Strategy};

/// Shape and LoRA hyperparameters of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerDims {
    /// Input dimension (the k of W₀ ∈ R^{d×k}).
    pub d_in: usize,
    /// Output dimension (the d of W₀).
    pub d_out: usize,
    /// Low-rank dimension r of each expert.
    pub rank: usize,
    /// LoRA alpha; each expert scales its update by `lora_alpha / rank`.
    pub lora_alpha: f64,
}

impl Default for LayerDims {
    fn default() -> Self {
        Self::desk()
    }
}

impl LayerDims {
    /// Desk-scale defaults: 16 → 8 with rank-4 experts.
    pub fn desk() -> Self {
        Self {
            d_in: 16,
            d_out: 8,
            rank: 4,
            lora_alpha: 8.0,
        }
    }

    /// Rank-16 preset used by some reference configurations.
    pub fn rank16(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            rank: 16,
            lora_alpha: 48.0,
        }
    }

    /// Rank-24 preset used by some reference configurations.
    pub fn rank24(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            rank: 24,
            lora_alpha: 48.0,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.rank == 0 {
            return Err(Error::Config("layer dimensions must be ≥ 1".into()));
        }
        if 2 * self.rank > self.d_in.min(self.d_out) {
            return Err(Error::Config(format!(
                "rank {} too large for {}x{} (need r ≤ min/2)",
                self.rank, self.d_out, self.d_in
            )));
        }
        if !self.lora_alpha.is_finite() || self.lora_alpha <= 0.0 {
            return Err(Error::Config(format!(
                "lora_alpha must be positive, got {}",
                self.lora_alpha
            )));
        }
        Ok(())
    }
}

/// One expert's low-rank pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraExpert {
    /// Down-projection, rank × d_in.
    pub a: Matrix,
    /// Up-projection, d_out × rank. Zero-initialized.
    pub b: Matrix,
    pub rank: usize,
    /// Multiplier `lora_alpha / rank` applied to the update.
    pub scaling: f64,
}

impl LoraExpert {
    /// `scaling · B(Ax)`.
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let mut out = self.b.matvec(&self.a.matvec(x)?)?;
        out.scale(self.scaling);
        Ok(out)
    }
}

/// The gating network's weight, d_in × N; logits are `x · W_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub w_g: Matrix,
}

impl Router {
    pub fn logits(&self, x: &Vector) -> Result<Vector> {
        self.w_g.tr_matvec(x)
    }
}

/// A routed mixture-of-LoRA-experts layer over a frozen base weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoleLayer {
    /// Frozen base weight, d_out × d_in. Never receives gradients.
    pub w0: Matrix,
    pub router: Router,
    pub experts: Vec<LoraExpert>,
    pub cfg: RoutingConfig,
    pub dims: LayerDims,
    /// Seed of the RNG the layer was initialized from.
    pub init_seed: u64,
    /// Bumped on every parameter update; guards against stale caches.
    #[serde(skip)]
    version: u64,
}

/// Intermediates retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Vector,
    decision: RouterDecision,
    /// `Aᵢx` for selected experts.
    ax: Vec<Option<Vector>>,
    /// `scaling · Bᵢ Aᵢ x` for selected experts.
    expert_out: Vec<Option<Vector>>,
    layer_version: u64,
}

impl ForwardCache {
    pub fn decision(&self) -> &RouterDecision {
        &self.decision
    }

    pub fn input(&self) -> &Vector {
        &self.x
    }

    /// Output of selected expert `i`, if it was active.
    pub fn expert_output(&self, i: usize) -> Option<&Vector> {
        self.expert_out.get(i).and_then(|o| o.as_ref())
    }
}

/// Gradients of one layer's trainable parameters. `w0` has no slot: it is
/// frozen by construction.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub d_a: Vec<Matrix>,
    pub d_b: Vec<Matrix>,
    pub d_wg: Matrix,
}

impl LayerGradients {
    pub fn zeros_like(layer: &MoleLayer) -> Self {
        Self {
            d_a: layer
                .experts
                .iter()
                .map(|e| Matrix::zeros(e.a.rows(), e.a.cols()))
                .collect(),
            d_b: layer
                .experts
                .iter()
                .map(|e| Matrix::zeros(e.b.rows(), e.b.cols()))
                .collect(),
            d_wg: Matrix::zeros(layer.router.w_g.rows(), layer.router.w_g.cols()),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &LayerGradients, s: f64) -> Result<()> {
        for (a, b) in self.d_a.iter_mut().zip(&other.d_a) {
            a.add_scaled(b, s)?;
        }
        for (a, b) in self.d_b.iter_mut().zip(&other.d_b) {
            a.add_scaled(b, s)?;
        }
        self.d_wg.add_scaled(&other.d_wg, s)
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.d_a.iter_mut().chain(self.d_b.iter_mut()) {
            m.scale(s);
        }
        self.d_wg.scale(s);
    }

    /// Gradient matrices in canonical parameter order: a₀, b₀, a₁, b₁, …, w_g.
    pub fn param_order(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 * self.d_a.len() + 1);
        for i in 0..self.d_a.len() {
            out.push(&self.d_a[i]);
            out.push(&self.d_b[i]);
        }
        out.push(&self.d_wg);
        out
    }
}

impl MoleLayer {
    /// Initialize a layer: `B = 0` and `W_g = 0` so the very first forward
    /// pass returns `W₀x` and the router distribution is exactly uniform;
    /// `A` entries are uniform in `[−1/√d_in, 1/√d_in]`, and the frozen `W₀`
    /// is a fixed random matrix standing in for pretrained weights.
    pub fn init(dims: LayerDims, cfg: RoutingConfig, rng: &mut RngState) -> Result<Self> {
        dims.validate()?;
        cfg.validate()?;
        let bound = 1.0 / (dims.d_in as f64).sqrt();
        let w0 = rng.uniform_matrix(dims.d_out, dims.d_in, -bound, bound);
        let experts = (0..cfg.n_experts)
            .map(|_| LoraExpert {
                a: rng.uniform_matrix(dims.rank, dims.d_in, -bound, bound),
                b: Matrix::zeros(dims.d_out, dims.rank),
                rank: dims.rank,
                scaling: dims.scaling(),
            })
            .collect();
        Ok(Self {
            w0,
            router: Router {
                w_g: Matrix::zeros(dims.d_in, cfg.n_experts),
            },
            experts,
            cfg,
            dims,
            init_seed: rng.seed(),
            version: 0,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Route one token: softmax of the gate logits fed to the hybrid rule.
    ///
    /// A single-expert layer short-circuits to a degenerate soft decision
    /// (the mixture is fully determined; normalized entropy is defined as 0).
    pub fn route(&self, x: &Vector) -> Result<RouterDecision> {
        let logits = self.router.logits(x)?;
        let dist = ProbDist::from_logits(logits.data())?;
        if self.n_experts() == 1 {
            return Ok(RouterDecision {
                strategy: Strategy::Soft,
                selected: vec![0],
                weights: vec![1.0],
                raw_dist: dist,
                entropy_norm: 0.0,
            });
        }
        hybrid_route(&dist, &self.cfg)
    }

    /// Full forward pass: `y = W₀x + Σ_{i ∈ selected} wᵢ Eᵢ(x)`.
    pub fn forward(&self, x: &Vector) -> Result<(Vector, RouterDecision, ForwardCache)> {
        if x.len() != self.dims.d_in {
            return Err(Error::Shape(format!(
                "input length {} vs d_in {}",
                x.len(),
                self.dims.d_in
            )));
        }
        let decision = self.route(x)?;
        let mut y = self.w0.matvec(x)?;
        let mut ax = vec![None; self.n_experts()];
        let mut expert_out = vec![None; self.n_experts()];
        for &i in &decision.selected {
            let e = &self.experts[i];
            let u = e.a.matvec(x)?;
            let mut out = e.b.matvec(&u)?;
            out.scale(e.scaling);
            y.add_scaled(&out, decision.weights[i])?;
            ax[i] = Some(u);
            expert_out[i] = Some(out);
        }
        let cache = ForwardCache {
            x: x.clone(),
            decision: decision.clone(),
            ax,
            expert_out,
            layer_version: self.version,
        };
        Ok((y, decision, cache))
    }

    /// Exact gradients of a scalar loss w.r.t. the trainable parameters,
    /// given `dy = ∂L/∂y` and the cache of the matching forward pass.
    ///
    /// Selected experts receive their chain-rule gradients; unselected
    /// experts get exact zeros. The gate gradient passes through the
    /// renormalization over the selected set (quotient rule) and then the
    /// softmax Jacobian; the discrete selection itself is held constant.
    pub fn backward(&self, cache: &ForwardCache, dy: &Vector) -> Result<LayerGradients> {
        if cache.layer_version != self.version {
            return Err(Error::Usage(
                "stale forward cache: layer parameters changed since forward".into(),
            ));
        }
        if dy.len() != self.dims.d_out {
            return Err(Error::Shape(format!(
                "dy length {} vs d_out {}",
                dy.len(),
                self.dims.d_out
            )));
        }
        let n = self.n_experts();
        let s = cache.decision.raw_dist.p();
        let mut grads = LayerGradients::zeros_like(self);

        // Expert parameters: dL/dBᵢ = wᵢ·α·(dy uᵢᵀ), dL/dAᵢ = wᵢ·α·(Bᵢᵀdy) xᵀ.
        for &i in &cache.decision.selected {
            let e = &self.experts[i];
            let u = cache.ax[i].as_ref().expect("selected expert has cache");
            let coeff = cache.decision.weights[i] * e.scaling;
            if coeff != 0.0 {
                let mut db = Matrix::outer(dy, u);
                db.scale(coeff);
                grads.d_b[i] = db;
                let bt_dy = e.b.tr_matvec(dy)?;
                let mut da = Matrix::outer(&bt_dy, &cache.x);
                da.scale(coeff);
                grads.d_a[i] = da;
            }
        }

        // Mixture-weight gradients gᵢ = dy · Eᵢ(x) on the selected set.
        let mut ds = vec![0.0; n];
        match cache.decision.strategy {
            Strategy::Soft => {
                for &i in &cache.decision.selected {
                    let e_out = cache.expert_out[i].as_ref().expect("cached");
                    ds[i] = dy.dot(e_out)?;
                }
            }
            Strategy::TopP | Strategy::TopKFallback => {
                // wᵢ = sᵢ / T with T the selected mass: quotient rule.
                let t: f64 = cache.decision.selected.iter().map(|&j| s[j]).sum();
                let mut g = vec![0.0; n];
                let mut g_dot_w = 0.0;
                for &i in &cache.decision.selected {
                    let e_out = cache.expert_out[i].as_ref().expect("cached");
                    g[i] = dy.dot(e_out)?;
                    g_dot_w += g[i] * cache.decision.weights[i];
                }
                for &j in &cache.decision.selected {
                    ds[j] = (g[j] - g_dot_w) / t;
                }
            }
        }

        // Softmax Jacobian: dzₖ = sₖ (dsₖ − Σⱼ dsⱼ sⱼ).
        let dot: f64 = ds.iter().zip(s).map(|(d, p)| d * p).sum();
        let dz = Vector::from_fn(n, |k| s[k] * (ds[k] - dot));
        grads.d_wg = Matrix::outer(&cache.x, &dz);
        Ok(grads)
    }

    /// Apply an in-place update to every trainable parameter via the
    /// provided closure, in canonical order a₀, b₀, a₁, b₁, …, w_g.
    /// Invalidates outstanding forward caches.
    pub fn update_params(&mut self, mut f: impl FnMut(usize, &mut Matrix)) {
        let mut idx = 0;
        for e in &mut self.experts {
            f(idx, &mut e.a);
            idx += 1;
            f(idx, &mut e.b);
            idx += 1;
        }
        f(idx, &mut self.router.w_g);
        self.version += 1;
    }

    /// Trainable parameter matrices in canonical order (read-only).
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 * self.experts.len() + 1);
        for e in &self.experts {
            out.push(&e.a);
            out.push(&e.b);
        }
        out.push(&self.router.w_g);
        out
    }

    /// Human-readable name of the parameter matrix at `slot` in canonical
    /// order, e.g. `expert2.a` or `w_g`.
    pub fn param_name(&self, slot: usize) -> String {
        let n = self.experts.len();
        if slot < 2 * n {
            let expert = slot / 2;
            let which = if slot.is_multiple_of(2) { "a" } else { "b" };
            format!("expert{expert}.{which}")
        } else {
            "w_g".to_string()
        }
    }

    /// Serialize the full layer (shapes, parameters, config, seed) to JSON.
    /// The round trip is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Load a layer checkpoint written by [`MoleLayer::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layer: MoleLayer =
            serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        layer.cfg.validate()?;
        layer.dims.validate()?;
        if layer.experts.len() != layer.cfg.n_experts {
            return Err(Error::Config(format!(
                "checkpoint has {} experts, config says {}",
                layer.experts.len(),
                layer.cfg.n_experts
            )));
        }
        Ok(layer)
    }
}

/// Give every trainable parameter nonzero random values; test helper shared
/// across the crate's unit tests.
#[cfg(test)]
pub(crate) fn randomize(layer: &mut MoleLayer, rng: &mut RngState) {
    layer.update_params(|_, m| {
        for v in m.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    });
}
