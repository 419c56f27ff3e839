//! Synthetic task generation, the deterministic training loop, ablation
//! grids, and a finite-difference gradient checker for the whole layer.
//!
//! The synthetic task draws tokens around well-separated Gaussian cluster
//! centers and maps each cluster through its own hidden affine map, so a
//! routed mixture can only fit it by specializing experts per cluster. That
//! is enough to demonstrate the peaked-distribution dynamics at desk scale:
//! router entropy collapses and each cluster settles on a dominant expert.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{aux_loss_grads, auxiliary_loss, task_loss, BatchRoutingStats, LossConfig};
use crate::metrics::{round_stats, RoundStat, RoutingTrace, TraceRecord};
use crate::mole::{LayerGradients, MoleLayer};
use crate::numerics::{Matrix, RngState, Vector};
use crate::routing::{RoutingConfig, Strategy};

/// Parameters of the synthetic clustered-regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_clusters: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub samples_per_cluster: usize,
    /// Standard deviation of the target noise; cluster centers are kept at
    /// pairwise distance ≥ 4·noise_std (and ≥ 4 input-noise deviations).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            input_dim: 16,
            output_dim: 8,
            samples_per_cluster: 64,
            noise_std: 0.05,
            seed: 17,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::Config("n_clusters must be ≥ 2".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.samples_per_cluster == 0 {
            return Err(Error::Config("task dimensions must be ≥ 1".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std must be ≥ 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// One (input, target) pair with the cluster it was drawn from.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Vector,
    pub target: Vector,
    pub cluster: usize,
}

/// Generated dataset; samples are ordered cluster by cluster.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generate the synthetic task: tokens from Gaussian clusters (unit
/// within-cluster spread), targets from a distinct hidden affine map per
/// cluster plus `noise_std` Gaussian noise. Deterministic under the seed.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let min_sep = (4.0 * spec.noise_std).max(4.0);

    // Rejection-sample centers until all pairwise distances clear the bound,
    // widening the spread if a round fails. Per-coordinate spread starts at
    // min_sep/√dim so typical pairwise distances sit just above the bound
    // without inflating input norms.
    let mut spread = min_sep / (spec.input_dim as f64).sqrt();
    let centers = loop {
        let mut ok = true;
        let candidate: Vec<Vector> = (0..spec.n_clusters)
            .map(|_| rng.normal_vector(spec.input_dim, 0.0, spread))
            .collect();
        'pairs: for i in 0..candidate.len() {
            for j in (i + 1)..candidate.len() {
                let mut diff = candidate[i].clone();
                diff.add_scaled(&candidate[j], -1.0)?;
                if diff.norm2() < min_sep {
                    ok = false;
                    break 'pairs;
                }
            }
        }
        if ok {
            break candidate;
        }
        spread *= 2.0;
    };

    // Hidden affine map per cluster.
    let maps: Vec<(Matrix, Vector)> = (0..spec.n_clusters)
        .map(|_| {
            (
                rng.uniform_matrix(spec.output_dim, spec.input_dim, -0.5, 0.5),
                Vector::from_fn(spec.output_dim, |_| rng.uniform(-0.5, 0.5)),
            )
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.n_clusters * spec.samples_per_cluster);
    for c in 0..spec.n_clusters {
        for _ in 0..spec.samples_per_cluster {
            let mut x = centers[c].clone();
            let jitter = rng.normal_vector(spec.input_dim, 0.0, 1.0);
            x.add_scaled(&jitter, 1.0)?;
            let (m, b) = &maps[c];
            let mut target = m.matvec(&x)?;
            target.add_scaled(b, 1.0)?;
            if spec.noise_std > 0.0 {
                let noise = rng.normal_vector(spec.output_dim, 0.0, spec.noise_std);
                target.add_scaled(&noise, 1.0)?;
            }
            samples.push(Sample {
                x,
                target,
                cluster: c,
            });
        }
    }
    Ok(Dataset { samples })
}

/// Gradient-descent flavor used by [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with decoupled weight decay fixed at 0: β₁ = 0.9, β₂ = 0.999,
    /// ε = 1e-8, bias correction on.
    Adamw,
}

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub routing: RoutingConfig,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Steps per reporting round.
    pub round_length: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            routing: RoutingConfig {
                n_experts: 4,
                ..RoutingConfig::default()
            },
            loss: LossConfig::default(),
            learning_rate: 0.01,
            batch_size: 16,
            steps: 2000,
            round_length: 320,
            optimizer: Optimizer::Sgd,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.routing.validate()?;
        self.loss.validate()?;
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if self.round_length == 0 {
            return Err(Error::Config("round_length must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total_loss: f64,
    pub task_loss: f64,
    pub aux_loss: f64,
    /// Mean normalized Tsallis entropy of the batch's router distributions.
    pub mean_entropy_norm: f64,
    pub soft_count: usize,
    pub top_p_count: usize,
    pub top_k_fallback_count: usize,
}

/// Everything a training run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    /// Mean/std of the total loss over consecutive `round_length` windows.
    pub rounds: Vec<RoundStat>,
    /// Mean normalized router entropy over the full dataset before training.
    pub initial_entropy_mean: f64,
    /// Same measurement after the final step.
    pub final_entropy_mean: f64,
    /// Routing decisions over the full dataset after training.
    pub trace: RoutingTrace,
    /// Wall-clock seconds per step. Not serialized: report files must be
    /// byte-identical across reruns of the same seed.
    #[serde(skip)]
    pub wall_clock_per_step: Vec<f64>,
}

impl TrainReport {
    /// Fraction of Soft routing decisions per round, from the step records.
    pub fn soft_fraction_per_round(&self) -> Vec<f64> {
        let round_length = self.config.round_length;
        self.steps
            .chunks(round_length)
            .map(|chunk| {
                let soft: usize = chunk.iter().map(|s| s.soft_count).sum();
                let total: usize = chunk
                    .iter()
                    .map(|s| s.soft_count + s.top_p_count + s.top_k_fallback_count)
                    .sum();
                soft as f64 / total as f64
            })
            .collect()
    }
}

/// First-order state for [`Optimizer::Adamw`].
struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(
    layer: &mut MoleLayer,
    grads: &LayerGradients,
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    let lr = cfg.learning_rate;
    let grad_mats = grads.param_order();
    match cfg.optimizer {
        Optimizer::Sgd => {
            layer.update_params(|slot, param| {
                let g = grad_mats[slot];
                for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            });
        }
        Optimizer::Adamw => {
            let state = adam.as_mut().expect("adam state initialized");
            state.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
            let (ms, vs) = (&mut state.m, &mut state.v);
            layer.update_params(|slot, param| {
                let g = grad_mats[slot];
                let m = &mut ms[slot];
                let v = &mut vs[slot];
                for i in 0..g.data().len() {
                    let gv = g.data()[i];
                    m.data_mut()[i] = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gv;
                    v.data_mut()[i] = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gv * gv;
                    let m_hat = m.data()[i] / bc1;
                    let v_hat = v.data()[i] / bc2;
                    param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            });
        }
    }
}

/// One batch's losses, exact gradients, and routing statistics.
#[derive(Debug)]
pub struct BatchEval {
    /// `task_loss + aux_loss`.
    pub total_loss: f64,
    /// Mean task loss over the batch.
    pub task_loss: f64,
    pub aux_loss: f64,
    /// Exact gradients of the total loss.
    pub grads: LayerGradients,
    pub stats: BatchRoutingStats,
}

/// Evaluate the batch: forward every token, aggregate routing stats, total
/// loss = mean task loss + auxiliary loss, and exact gradients of that total.
pub fn batch_eval(layer: &MoleLayer, batch: &[Sample], loss_cfg: &LossConfig) -> Result<BatchEval> {
    let n = layer.n_experts();
    let t = batch.len() as f64;
    let mut grads = LayerGradients::zeros_like(layer);
    let mut decisions = Vec::with_capacity(batch.len());
    let mut task_total = 0.0;
    let mut caches = Vec::with_capacity(batch.len());
    for sample in batch {
        let (y, decision, cache) = layer.forward(&sample.x)?;
        let (loss, mut dy) = task_loss(&y, &sample.target)?;
        task_total += loss / t;
        dy.scale(1.0 / t);
        let g = layer.backward(&cache, &dy)?;
        grads.add_scaled(&g, 1.0)?;
        decisions.push(decision);
        caches.push(cache);
    }
    let stats = BatchRoutingStats::from_decisions(decisions, n)?;
    let aux = auxiliary_loss(&stats, loss_cfg, n);
    // Auxiliary gradient reaches the gate through each token's logits.
    let dzs = aux_loss_grads(&stats, loss_cfg, n)?;
    for (cache, dz) in caches.iter().zip(&dzs) {
        grads
            .d_wg
            .add_scaled(&Matrix::outer(cache.input(), dz), 1.0)?;
    }
    Ok(BatchEval {
        total_loss: task_total + aux,
        task_loss: task_total,
        aux_loss: aux,
        grads,
        stats,
    })
}

/// Per-token (strategy, selected set) pairs: the discrete part of a batch's
/// routing, compared before and after each finite-difference perturbation.
type SelectionFingerprint = Vec<(Strategy, Vec<usize>)>;

/// Total loss only (no gradients), for the finite-difference checker.
fn batch_loss(
    layer: &MoleLayer,
    batch: &[Sample],
    loss_cfg: &LossConfig,
) -> Result<(f64, SelectionFingerprint)> {
    let n = layer.n_experts();
    let t = batch.len() as f64;
    let mut task_total = 0.0;
    let mut decisions = Vec::with_capacity(batch.len());
    for sample in batch {
        let (y, decision, _) = layer.forward(&sample.x)?;
        task_total += task_loss(&y, &sample.target)?.0 / t;
        decisions.push(decision);
    }
    let selections = decisions
        .iter()
        .map(|d| (d.strategy, d.selected.clone()))
        .collect();
    let stats = BatchRoutingStats::from_decisions(decisions, n)?;
    Ok((task_total + auxiliary_loss(&stats, loss_cfg, n), selections))
}

/// Mean normalized router entropy and the full routing trace of a dataset.
pub fn eval_trace(layer: &MoleLayer, data: &Dataset) -> Result<(f64, RoutingTrace)> {
    if data.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let mut records = Vec::with_capacity(data.len());
    let mut entropy_sum = 0.0;
    for (i, sample) in data.samples.iter().enumerate() {
        let decision = layer.route(&sample.x)?;
        entropy_sum += decision.entropy_norm;
        records.push(TraceRecord {
            token_id: i,
            layer_id: 0,
            entropy_norm: decision.entropy_norm,
            strategy: decision.strategy,
            selected: decision.selected.clone(),
            weights: decision.weights.clone(),
            argmax_expert: decision.argmax_expert(),
        });
    }
    Ok((entropy_sum / data.len() as f64, RoutingTrace { records }))
}

/// Run the training loop: deterministic minibatch SGD/AdamW on the experts
/// and the gate, with the frozen base untouched. Aborts with a divergence
/// error if the loss leaves the finite range.
pub fn train(layer: &mut MoleLayer, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let (initial_entropy_mean, _) = eval_trace(layer, data)?;

    let mut rng = RngState::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut adam = match cfg.optimizer {
        Optimizer::Sgd => None,
        Optimizer::Adamw => {
            let zeros = LayerGradients::zeros_like(layer);
            let mats: Vec<Matrix> = zeros.param_order().iter().map(|m| (*m).clone()).collect();
            Some(AdamState {
                m: mats.clone(),
                v: mats,
                t: 0,
            })
        }
    };

    let mut steps = Vec::with_capacity(cfg.steps);
    let mut wall = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        let started = Instant::now();
        batch.clear();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(data.samples[order[cursor]].clone());
            cursor += 1;
        }

        let eval = batch_eval(layer, &batch, &cfg.loss)?;
        if !eval.total_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: eval.total_loss,
            });
        }
        apply_update(layer, &eval.grads, cfg, &mut adam);

        let mut soft = 0;
        let mut top_p = 0;
        let mut top_k_fallback = 0;
        let mut entropy_sum = 0.0;
        for d in eval.stats.decisions() {
            entropy_sum += d.entropy_norm;
            match d.strategy {
                Strategy::Soft => soft += 1,
                Strategy::TopP => top_p += 1,
                Strategy::TopKFallback => top_k_fallback += 1,
            }
        }
        steps.push(StepRecord {
            step,
            total_loss: eval.total_loss,
            task_loss: eval.task_loss,
            aux_loss: eval.aux_loss,
            mean_entropy_norm: entropy_sum / batch.len() as f64,
            soft_count: soft,
            top_p_count: top_p,
            top_k_fallback_count: top_k_fallback,
        });
        wall.push(started.elapsed().as_secs_f64());
    }

    let losses: Vec<f64> = steps.iter().map(|s| s.total_loss).collect();
    let rounds = round_stats(&losses, cfg.round_length)?;
    let (final_entropy_mean, trace) = eval_trace(layer, data)?;
    Ok(TrainReport {
        config: cfg.clone(),
        steps,
        rounds,
        initial_entropy_mean,
        final_entropy_mean,
        trace,
        wall_clock_per_step: wall,
    })
}

/// One axis of an ablation grid: a parameter name and the values to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<f64>,
}

/// One grid point's settings and its finished report.
#[derive(Debug)]
pub struct AblationRow {
    pub settings: Vec<(String, f64)>,
    pub report: TrainReport,
}

/// Apply one swept value to the run configuration. Short names cover the
/// usual ablation knobs; dotted names address config fields directly.
fn apply_axis(spec: &mut RunSpec, name: &str, value: f64) -> Result<()> {
    let train = &mut spec.train;
    match name {
        // q is one knob: routing entropy and entropy loss move together.
        "q" => {
            let q = crate::entropy::EntropicIndex::new(value)
                .map_err(|e| Error::Config(format!("axis q: {e}")))?;
            train.routing.entropic_index = q;
            train.loss.q = q;
        }
        "beta" | "loss.beta" => train.loss.beta = value,
        "alpha" | "loss.alpha" => train.loss.alpha = value,
        "threshold" | "routing.entropy_threshold" => train.routing.entropy_threshold = value,
        "p" | "routing.top_p" => train.routing.top_p = value,
        "k" | "routing.keep_top_k" => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::Config(format!("axis k: {value} is not a count")));
            }
            train.routing.keep_top_k = value as usize;
        }
        "lr" | "train.learning_rate" => train.learning_rate = value,
        "steps" | "train.steps" => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::Config(format!("axis steps: {value} is not a count")));
            }
            train.steps = value as usize;
        }
        "routing.entropic_index" => {
            train.routing.entropic_index = crate::entropy::EntropicIndex::new(value)
                .map_err(|e| Error::Config(format!("axis: {e}")))?;
        }
        "loss.q" => {
            train.loss.q = crate::entropy::EntropicIndex::new(value)
                .map_err(|e| Error::Config(format!("axis: {e}")))?;
        }
        other => {
            return Err(Error::Config(format!("unknown ablation axis '{other}'")));
        }
    }
    Ok(())
}

/// Everything one experiment run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task: SyntheticTaskSpec,
    pub dims: crate::mole::LayerDims,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.dims.validate()?;
        self.train.validate()?;
        if self.dims.d_in != self.task.input_dim || self.dims.d_out != self.task.output_dim {
            return Err(Error::Config(format!(
                "layer is {}x{} but task is {}-in/{}-out",
                self.dims.d_out, self.dims.d_in, self.task.input_dim, self.task.output_dim
            )));
        }
        Ok(())
    }
}

/// Generate the task, initialize a fresh layer, and train it.
pub fn run_experiment(spec: &RunSpec) -> Result<TrainReport> {
    spec.validate()?;
    let data = generate_task(&spec.task)?;
    let mut rng = RngState::new(spec.train.seed);
    let mut layer = MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng)?;
    train(&mut layer, &data, &spec.train)
}

/// One resolved grid point: the swept (name, value) settings and the run
/// spec they produce.
pub type GridPoint = (Vec<(String, f64)>, RunSpec);

/// Expand the cartesian product of the grid axes onto the base spec and
/// validate every point, without running anything. Points come back in
/// row-major order (first axis slowest).
pub fn expand_grid(base: &RunSpec, grid: &[GridAxis]) -> Result<Vec<GridPoint>> {
    base.validate()?;
    for axis in grid {
        if axis.values.is_empty() {
            return Err(Error::Config(format!("axis '{}' has no values", axis.name)));
        }
    }

    let mut points: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    for axis in grid {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for point in &points {
            for &v in &axis.values {
                let mut p = point.clone();
                p.push((axis.name.clone(), v));
                next.push(p);
            }
        }
        points = next;
    }

    points
        .into_iter()
        .map(|settings| {
            let mut spec = base.clone();
            for (name, value) in &settings {
                apply_axis(&mut spec, name, *value)?;
            }
            spec.validate()?;
            Ok((settings, spec))
        })
        .collect()
}

/// Sweep the cartesian product of the grid axes, one independently seeded
/// run per point. Every grid point is validated before any run starts.
pub fn ablate(base: &RunSpec, grid: &[GridAxis]) -> Result<Vec<AblationRow>> {
    let points = expand_grid(base, grid)?;
    let mut rows = Vec::with_capacity(points.len());
    for (settings, spec) in points {
        let report = run_experiment(&spec)?;
        rows.push(AblationRow { settings, report });
    }
    Ok(rows)
}

/// Result of checking every parameter gradient against central differences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Largest guarded relative error over all checked parameters.
    pub max_rel_err: f64,
    /// Name and indices of the worst parameter entry.
    pub worst_param: String,
    pub checked: usize,
    /// Parameters whose perturbation flipped a selection set; excluded from
    /// the comparison because finite differences are invalid across the flip.
    pub skipped: Vec<String>,
}

/// Compare the analytic gradient of the total batch loss against central
/// finite differences for every trainable parameter entry.
///
/// Relative error uses `|a − fd| / max(|a|, |fd|, 1e-3)`; the floor keeps
/// near-zero components from amplifying finite-difference roundoff.
pub fn grad_check(
    layer: &MoleLayer,
    batch: &[Sample],
    loss_cfg: &LossConfig,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-4]"
        )));
    }
    if batch.is_empty() {
        return Err(Error::Usage("grad_check needs a nonempty batch".into()));
    }
    let analytic = batch_eval(layer, batch, loss_cfg)?.grads;
    let (_, baseline_selection) = batch_loss(layer, batch, loss_cfg)?;

    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut checked = 0usize;
    let mut skipped = Vec::new();

    let grad_mats = analytic.param_order();
    for (slot, grad_mat) in grad_mats.iter().enumerate() {
        let (rows, cols) = (grad_mat.rows(), grad_mat.cols());
        for r in 0..rows {
            for c in 0..cols {
                let mut probe = layer.clone();
                perturb(&mut probe, slot, r, c, eps);
                let (f_plus, sel_plus) = batch_loss(&probe, batch, loss_cfg)?;
                let mut probe = layer.clone();
                perturb(&mut probe, slot, r, c, -eps);
                let (f_minus, sel_minus) = batch_loss(&probe, batch, loss_cfg)?;

                let name = format!("{}[{r},{c}]", layer.param_name(slot));
                if sel_plus != baseline_selection || sel_minus != baseline_selection {
                    skipped.push(name);
                    continue;
                }
                let fd = (f_plus - f_minus) / (2.0 * eps);
                let a = grad_mat.get(r, c);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                checked += 1;
                if rel > max_rel_err {
                    max_rel_err = rel;
                    worst_param = name;
                }
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_param,
        checked,
        skipped,
    })
}

fn perturb(layer: &mut MoleLayer, slot: usize, r: usize, c: usize, delta: f64) {
    layer.update_params(|s, m| {
        if s == slot {
            let v = m.get(r, c);
            m.set(r, c, v + delta);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mole::LayerDims;

    fn small_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_clusters: 2,
            input_dim: 6,
            output_dim: 4,
            samples_per_cluster: 8,
            noise_std: 0.0,
            seed: 5,
        }
    }

    fn small_run_spec() -> RunSpec {
        RunSpec {
            task: small_spec(),
            dims: LayerDims {
                d_in: 6,
                d_out: 4,
                rank: 2,
                lora_alpha: 4.0,
            },
            train: TrainConfig {
                routing: RoutingConfig {
                    n_experts: 2,
                    keep_top_k: 1,
                    ..RoutingConfig::default()
                },
                steps: 12,
                batch_size: 4,
                round_length: 5,
                learning_rate: 0.02,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn generate_task_is_deterministic() {
        let a = generate_task(&small_spec()).unwrap();
        let b = generate_task(&small_spec()).unwrap();
        assert_eq!(a.len(), b.len());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.x, sb.x);
            assert_eq!(sa.target, sb.target);
            assert_eq!(sa.cluster, sb.cluster);
        }
    }

    #[test]
    fn generate_task_zero_noise_targets_are_affine() {
        // Solve for each cluster's hidden affine map from input_dim + 1
        // samples, then check that the remaining samples land on it exactly.
        let data = generate_task(&small_spec()).unwrap();
        let dim = small_spec().input_dim;
        for cluster in 0..2 {
            let samples: Vec<&Sample> = data
                .samples
                .iter()
                .filter(|s| s.cluster == cluster)
                .collect();
            let n_unknowns = dim + 1;
            assert!(samples.len() > n_unknowns);
            for out_coord in 0..small_spec().output_dim {
                // Rows are [x, 1], unknowns are one row of M plus the offset.
                let mut system: Vec<Vec<f64>> = Vec::new();
                for s in samples.iter().take(n_unknowns) {
                    let mut row: Vec<f64> = s.x.data().to_vec();
                    row.push(1.0);
                    row.push(s.target.get(out_coord));
                    system.push(row);
                }
                let coeffs = solve_dense(&mut system);
                for s in samples.iter().skip(n_unknowns) {
                    let predicted: f64 =
                        s.x.data()
                            .iter()
                            .zip(&coeffs)
                            .map(|(x, c)| x * c)
                            .sum::<f64>()
                            + coeffs[dim];
                    assert!((predicted - s.target.get(out_coord)).abs() < 1e-8);
                }
            }
        }
    }

    /// Gaussian elimination with partial pivoting on an augmented system;
    /// test-only oracle for the affine-target check.
    #[allow(clippy::needless_range_loop)]
    fn solve_dense(rows: &mut [Vec<f64>]) -> Vec<f64> {
        let n = rows.len();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&a, &b| rows[a][col].abs().total_cmp(&rows[b][col].abs()))
                .unwrap();
            rows.swap(col, pivot);
            let lead = rows[col][col];
            assert!(lead.abs() > 1e-12, "singular probe system");
            for r in 0..n {
                if r != col {
                    let factor = rows[r][col] / lead;
                    for c in col..=n {
                        let v = rows[col][c];
                        rows[r][c] -= factor * v;
                    }
                }
            }
        }
        (0..n).map(|r| rows[r][n] / rows[r][r]).collect()
    }

    #[test]
    fn generate_task_centers_are_separated() {
        let spec = SyntheticTaskSpec {
            noise_std: 2.0,
            ..small_spec()
        };
        let data = generate_task(&spec).unwrap();
        // Cluster means must respect the 4·noise_std separation (the means
        // sit within ~1 unit of the true centers with 8 samples each, far
        // less than the 8.0 bound here).
        let mean = |c: usize| {
            let mut acc = Vector::zeros(spec.input_dim);
            let mut count = 0.0;
            for s in data.samples.iter().filter(|s| s.cluster == c) {
                acc.add_scaled(&s.x, 1.0).unwrap();
                count += 1.0;
            }
            acc.scale(1.0 / count);
            acc
        };
        let m0 = mean(0);
        let m1 = mean(1);
        let mut diff = m0.clone();
        diff.add_scaled(&m1, -1.0).unwrap();
        assert!(diff.norm2() > 4.0 * spec.noise_std - 2.0);
    }

    #[test]
    fn train_zero_lr_leaves_parameters_untouched() {
        let spec = small_run_spec();
        let data = generate_task(&spec.task).unwrap();
        let mut rng = RngState::new(spec.train.seed);
        let mut layer = MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng).unwrap();
        let before: Vec<Vec<u64>> = layer
            .params()
            .iter()
            .map(|m| m.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..spec.train.clone()
        };
        train(&mut layer, &data, &cfg).unwrap();
        let after: Vec<Vec<u64>> = layer
            .params()
            .iter()
            .map(|m| m.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn train_single_step_equals_manual_update() {
        let spec = small_run_spec();
        let data = generate_task(&spec.task).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            ..spec.train.clone()
        };

        let mut rng = RngState::new(cfg.seed);
        let mut trained = MoleLayer::init(spec.dims, cfg.routing.clone(), &mut rng).unwrap();
        let mut manual = trained.clone();
        train(&mut trained, &data, &cfg).unwrap();

        // Rebuild the same first batch by replaying the shuffle.
        let mut loop_rng = RngState::new(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        loop_rng.shuffle(&mut order);
        let batch: Vec<Sample> = order[..cfg.batch_size]
            .iter()
            .map(|&i| data.samples[i].clone())
            .collect();
        let eval = batch_eval(&manual, &batch, &cfg.loss).unwrap();
        let grad_mats: Vec<Matrix> = eval
            .grads
            .param_order()
            .iter()
            .map(|m| (*m).clone())
            .collect();
        manual.update_params(|slot, param| {
            for (p, g) in param.data_mut().iter_mut().zip(grad_mats[slot].data()) {
                *p -= cfg.learning_rate * g;
            }
        });

        for (a, b) in trained.params().iter().zip(manual.params().iter()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn train_is_deterministic_and_freezes_w0() {
        let spec = small_run_spec();
        let data = generate_task(&spec.task).unwrap();

        let run = || {
            let mut rng = RngState::new(spec.train.seed);
            let mut layer =
                MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng).unwrap();
            let w0_before: Vec<u64> = layer.w0.data().iter().map(|v| v.to_bits()).collect();
            let report = train(&mut layer, &data, &spec.train).unwrap();
            let w0_after: Vec<u64> = layer.w0.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(w0_before, w0_after);
            report
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.steps.len(), spec.train.steps);
    }

    #[test]
    fn train_adamw_runs_and_differs_from_sgd() {
        let spec = small_run_spec();
        let data = generate_task(&spec.task).unwrap();
        let sgd_cfg = spec.train.clone();
        let adam_cfg = TrainConfig {
            optimizer: Optimizer::Adamw,
            learning_rate: 0.01,
            ..spec.train.clone()
        };
        let mut rng = RngState::new(7);
        let mut l1 = MoleLayer::init(spec.dims, sgd_cfg.routing.clone(), &mut rng).unwrap();
        let mut l2 = l1.clone();
        let r1 = train(&mut l1, &data, &sgd_cfg).unwrap();
        let r2 = train(&mut l2, &data, &adam_cfg).unwrap();
        assert_ne!(
            r1.steps.last().unwrap().total_loss,
            r2.steps.last().unwrap().total_loss
        );
    }

    #[test]
    fn ablate_grid_shapes() {
        let base = small_run_spec();
        // Empty grid: one base run.
        let rows = ablate(&base, &[]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].settings.is_empty());

        let rows = ablate(
            &base,
            &[GridAxis {
                name: "k".into(),
                values: vec![1.0, 2.0],
            }],
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].report.config.routing.keep_top_k, 1);
        assert_eq!(rows[1].report.config.routing.keep_top_k, 2);

        let rows = ablate(
            &base,
            &[
                GridAxis {
                    name: "beta".into(),
                    values: vec![0.0, 1e-2],
                },
                GridAxis {
                    name: "p".into(),
                    values: vec![0.6, 0.75, 0.9],
                },
            ],
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
    }

    #[test]
    fn ablate_q_one_runs_shannon_path() {
        let base = small_run_spec();
        let rows = ablate(
            &base,
            &[GridAxis {
                name: "q".into(),
                values: vec![1.0, 1.1],
            }],
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.report.final_entropy_mean.is_finite());
            assert_eq!(row.report.steps.len(), base.train.steps);
        }
        assert!(rows[0].report.config.loss.q.is_shannon_limit());
    }

    #[test]
    fn ablate_rejects_invalid_grid_before_running() {
        let base = small_run_spec();
        let err = ablate(
            &base,
            &[GridAxis {
                name: "p".into(),
                values: vec![0.75, 1.5],
            }],
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let err = ablate(
            &base,
            &[GridAxis {
                name: "nonsense".into(),
                values: vec![1.0],
            }],
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn grad_check_validates_eps_range() {
        let spec = small_run_spec();
        let data = generate_task(&spec.task).unwrap();
        let mut rng = RngState::new(3);
        let layer = MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng).unwrap();
        assert!(grad_check(&layer, &data.samples[..2], &spec.train.loss, 1e-3).is_err());
        assert!(grad_check(&layer, &data.samples[..2], &spec.train.loss, 1e-8).is_err());
    }

    #[test]
    fn grad_check_fresh_layer_passes() {
        let spec = small_run_spec();
        let data = generate_task(&spec.task).unwrap();
        let mut rng = RngState::new(3);
        let layer = MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng).unwrap();
        let report = grad_check(&layer, &data.samples[..4], &spec.train.loss, 1e-6).unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_param
        );
        assert!(report.checked > 0);
    }

    #[test]
    fn grad_check_task_only_is_tighter() {
        let spec = small_run_spec();
        let data = generate_task(&spec.task).unwrap();
        let mut rng = RngState::new(9);
        let mut layer = MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng).unwrap();
        crate::mole::randomize(&mut layer, &mut rng);
        let cfg = LossConfig {
            beta: 0.0,
            alpha: 0.0,
            ..LossConfig::default()
        };
        let report = grad_check(&layer, &data.samples[..4], &cfg, 1e-6).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn grad_check_reports_boundary_flips_as_skipped() {
        // Craft a layer whose router sits exactly on a Top-p tie so that any
        // w_g perturbation flips the selection for the probe token.
        let dims = LayerDims {
            d_in: 4,
            d_out: 4,
            rank: 1,
            lora_alpha: 1.0,
        };
        let routing = RoutingConfig {
            n_experts: 2,
            keep_top_k: 1,
            top_p: 0.5,
            entropy_threshold: 0.0,
            ..RoutingConfig::default()
        };
        let mut rng = RngState::new(1);
        let mut layer = MoleLayer::init(dims, routing, &mut rng).unwrap();
        crate::mole::randomize(&mut layer, &mut rng);
        // Zero gate weights: logits are [0, 0] and the softmax is exactly
        // [0.5, 0.5], a Top-p tie at p = 0.5. Any perturbation of one gate
        // column reorders the sort and moves the selected set.
        layer.router.w_g = Matrix::zeros(4, 2);
        // Threshold exactly 1.0: the uniform distribution (entropy 1.0, not
        // strictly greater) stays on the sparse branch.
        layer.cfg.entropy_threshold = 1.0;
        let x = Vector::new(vec![1.0, 0.5, -0.5, 0.25]).unwrap();
        let target = Vector::zeros(4);
        let batch = vec![Sample {
            x,
            target,
            cluster: 0,
        }];
        let cfg = LossConfig {
            beta: 0.0,
            alpha: 0.0,
            ..LossConfig::default()
        };
        let report = grad_check(&layer, &batch, &cfg, 1e-6).unwrap();
        assert!(
            report.skipped.iter().any(|name| name.starts_with("w_g")),
            "expected w_g entries to be skipped, got {:?}",
            report.skipped
        );
    }

    #[test]
    fn run_experiment_rejects_mismatched_dims() {
        let mut spec = small_run_spec();
        spec.dims.d_in = 5;
        assert!(matches!(run_experiment(&spec), Err(Error::Config(_))));
    }
}
