//! Objective composition, seeded adaptive-moment training, and whole-run
//! orchestration for a single (configuration, seed) cell.

mod gradcheck;

pub use gradcheck::{gradcheck, GradcheckReport};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{checkpoint_hash, save_checkpoint};
use crate::corpus::{make_batches, Batch, Splits, TokenSequence};
use crate::error::{Error, Result};
use crate::locality::{layer_mean_distance, BlockMetric, LocalityObjective, LocalityScheduleSpec, PenaltyBreakdown};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{AttentionObjective, ModelConfig, ModelParams};
use crate::partition::{Partition, PartitionMethod, PartitionSource};
use crate::scalar::Scalar;
use crate::segment::segment_split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub context_length: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 2000,
            batch_size: 16,
            context_length: 128,
            grad_clip_norm: 1.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.context_length < 2 {
            return bad("context_length must be >= 2");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be > 0");
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub lm_loss: f64,
    pub penalty: PenaltyBreakdown,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// `L_total = L_LM + Σ_ℓ λ(ℓ)·P_ℓ`; the schedule is already folded into
/// `penalty.total`.
pub fn total_loss(lm: f64, penalty: &PenaltyBreakdown) -> Result<f64> {
    if !lm.is_finite() || !penalty.total.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "lm loss {lm}, penalty {}",
            penalty.total
        )));
    }
    Ok(lm + penalty.total)
}

fn clip_and_update<T: Scalar>(params: &mut [T], grads: &mut [T], state: &mut AdamState<T>, cfg: &TrainConfig) -> f64 {
    let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > cfg.grad_clip_norm {
        let s = T::of(cfg.grad_clip_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let c1 = T::of(1.0 - cfg.adam_beta1.powi(t));
    let c2 = T::of(1.0 - cfg.adam_beta2.powi(t));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.adam_eps);
    for (((p, &g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    norm
}

/// Per-layer mean block distance of a batch's attention, averaged over rows.
fn batch_penalty<T: Scalar>(
    pass: &crate::model::ForwardPass<T>,
    partitions: Option<&[Partition]>,
    schedule: &LocalityScheduleSpec,
    metric: BlockMetric,
    num_layers: usize,
    heads: usize,
) -> PenaltyBreakdown {
    let lambdas = schedule.lambdas(num_layers);
    let per_layer = match partitions {
        Some(parts) => (0..num_layers)
            .map(|l| {
                parts
                    .iter()
                    .enumerate()
                    .map(|(b, p)| layer_mean_distance(pass.attention(l, b), heads, p.len(), p.block_of(), metric).f64())
                    .sum::<f64>()
                    / parts.len() as f64
            })
            .collect(),
        None => vec![0.0; num_layers],
    };
    PenaltyBreakdown::from_layers(per_layer, lambdas)
}

/// One clipped adaptive-moment update on the full objective. With an
/// inactive schedule no attention objective is attached at all, so the
/// update is exactly the language-model-only update.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    batch: &Batch,
    partitions: Option<&[Partition]>,
    schedule: &LocalityScheduleSpec,
    metric: BlockMetric,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let (num_layers, heads) = (params.config().num_layers, params.config().num_heads);
    if let Some(parts) = partitions {
        if parts.len() != batch.batch_size() || parts.iter().any(|p| p.len() != batch.context_length) {
            return Err(Error::ShapeMismatch("partitions do not match batch rows".into()));
        }
    }
    let objective = match (schedule.is_inactive(), partitions) {
        (true, _) => None,
        (false, Some(parts)) => Some(LocalityObjective::<T>::new(schedule, num_layers, heads, parts, metric)),
        (false, None) => {
            return Err(Error::InvalidPartition(
                "an active locality schedule needs partitions".into(),
            ))
        }
    };
    let obj_ref = objective.as_ref().map(|o| o as &dyn AttentionObjective<T>);
    let mut out = params.loss_and_grad(&batch.inputs, &batch.targets, batch.context_length, obj_ref)?;
    let penalty = batch_penalty(&out.pass, partitions, schedule, metric, num_layers, heads);
    let lm = out.lm_loss.f64();
    let total = total_loss(lm, &penalty).map_err(|e| match e {
        Error::NonFiniteLoss(msg) => Error::NonFiniteLoss(format!("step {}: {msg}", state.step + 1)),
        other => other,
    })?;
    let grad_norm = clip_and_update(params.data_mut(), &mut out.grads, state, cfg);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "step {}: gradient norm {grad_norm}",
            state.step
        )));
    }
    Ok(StepReport {
        lm_loss: lm,
        penalty,
        total,
        grad_norm,
    })
}

/// Partitions used for training batches and for test evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub train: Option<PartitionSource>,
    pub test: PartitionSource,
    /// Hash of the reference checkpoint for semantic plans.
    pub reference_hash: Option<String>,
}

impl PartitionPlan {
    /// Builds the plan for a method. Semantic methods need the reference
    /// model; the training split is only segmented when `need_train` holds.
    pub fn build(
        method: &PartitionMethod,
        splits: &Splits,
        reference: Option<&ModelParams<f32>>,
        need_train: bool,
    ) -> Result<Self> {
        match method {
            PartitionMethod::Fixed { window } => Ok(Self {
                train: need_train.then_some(PartitionSource::Fixed { window: *window }),
                test: PartitionSource::Fixed { window: *window },
                reference_hash: None,
            }),
            PartitionMethod::Semantic { policy, .. } => {
                let reference = reference.ok_or_else(|| {
                    Error::InvalidPartition("semantic partitions need a reference checkpoint".into())
                })?;
                let train = if need_train {
                    Some(PartitionSource::Global(segment_split(reference, &splits.train, policy)?))
                } else {
                    None
                };
                Ok(Self {
                    train,
                    test: PartitionSource::Global(segment_split(reference, &splits.test, policy)?),
                    reference_hash: Some(checkpoint_hash(reference)?),
                })
            }
        }
    }
}

/// Everything that determines a run apart from corpus and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: LocalityScheduleSpec,
    pub metric: BlockMetric,
    pub partition: PartitionMethod,
}

impl RunSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.train.seed = seed;
        s.model.init_seed = seed;
        s
    }

    /// Seed-independent hash of the run configuration, corpus and partition
    /// reference.
    pub fn fingerprint(&self, corpus_hash: &str, reference_hash: Option<&str>) -> String {
        let mut unseeded = self.with_seed(0);
        unseeded.label.clear();
        let doc = serde_json::json!({
            "spec": unseeded,
            "corpus": corpus_hash,
            "reference": reference_hash,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }
}

/// Hex SHA-256 over the tokens of all three splits.
pub fn corpus_hash(splits: &Splits) -> String {
    let mut h = Sha256::new();
    for s in [&splits.train, &splits.val, &splits.test] {
        h.update((s.len() as u64).to_le_bytes());
        for t in &s.tokens {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub loss_curve: Vec<f64>,
    pub penalty_curve: Vec<f64>,
    pub seconds: f64,
}

/// Trains from a seeded initialization. Batching and initialization are
/// both seeded from `cfg.seed`.
pub fn train_model(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    schedule: &LocalityScheduleSpec,
    metric: BlockMetric,
    train: &TokenSequence,
    partitions: Option<&PartitionSource>,
    mut on_step: impl FnMut(usize, &StepReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    schedule.validate()?;
    if cfg.context_length > model_cfg.context_length {
        return Err(Error::WindowTooLong {
            len: cfg.context_length,
            max: model_cfg.context_length,
        });
    }
    let start = Instant::now();
    let mut params = ModelParams::<f32>::init(&model_cfg.clone().with_seed(cfg.seed))?;
    let mut state = AdamState::new(params.num_params());
    let mut batches = make_batches(train, cfg.context_length, cfg.batch_size, cfg.seed)?;
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut penalty_curve = Vec::with_capacity(cfg.steps);
    let use_partitions = !schedule.is_inactive();
    for step in 0..cfg.steps {
        let batch = batches.next().expect("batch stream is endless");
        let parts = match (use_partitions, partitions) {
            (true, Some(src)) => Some(
                batch
                    .offsets
                    .iter()
                    .map(|&o| src.window(o, cfg.context_length))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let report = train_step(&mut params, &batch, parts.as_deref(), schedule, metric, &mut state, cfg)?;
        loss_curve.push(report.lm_loss);
        penalty_curve.push(report.penalty.total);
        on_step(step, &report);
    }
    Ok(TrainOutcome {
        params,
        loss_curve,
        penalty_curve,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Metrics and provenance of one trained (configuration, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub fingerprint: String,
    pub label: String,
    pub seed: u64,
    pub perplexity: f64,
    pub entropy_bits: f64,
    pub fidelity: f64,
    pub per_layer_entropy: Vec<f64>,
    pub per_layer_fidelity: Vec<f64>,
    pub loss_curve: Vec<f64>,
    pub penalty_curve: Vec<f64>,
    pub wall_clock_seconds: f64,
}

impl RunResult {
    pub fn from_parts(fingerprint: String, spec: &RunSpec, outcome: &TrainOutcome, metrics: MetricsReport) -> Self {
        Self {
            fingerprint,
            label: spec.label.clone(),
            seed: spec.train.seed,
            perplexity: metrics.perplexity,
            entropy_bits: metrics.entropy_bits,
            fidelity: metrics.fidelity,
            per_layer_entropy: metrics.per_layer_entropy,
            per_layer_fidelity: metrics.per_layer_fidelity,
            loss_curve: outcome.loss_curve.clone(),
            penalty_curve: outcome.penalty_curve.clone(),
            wall_clock_seconds: outcome.seconds,
        }
    }

    /// Metric fields only, for determinism comparisons.
    pub fn metrics_equal(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
            && self.seed == other.seed
            && self.perplexity.to_bits() == other.perplexity.to_bits()
            && self.entropy_bits.to_bits() == other.entropy_bits.to_bits()
            && self.fidelity.to_bits() == other.fidelity.to_bits()
            && self.per_layer_entropy == other.per_layer_entropy
            && self.per_layer_fidelity == other.per_layer_fidelity
            && self.loss_curve == other.loss_curve
            && self.penalty_curve == other.penalty_curve
    }
}

/// Trains, evaluates on the held-out test split and optionally writes a
/// checkpoint.
pub fn train_run(
    spec: &RunSpec,
    splits: &Splits,
    plan: &PartitionPlan,
    checkpoint: Option<&Path>,
    on_step: impl FnMut(usize, &StepReport),
) -> Result<RunResult> {
    let outcome = train_model(
        &spec.model,
        &spec.train,
        &spec.schedule,
        spec.metric,
        &splits.train,
        plan.train.as_ref(),
        on_step,
    )?;
    if let Some(path) = checkpoint {
        save_checkpoint(&outcome.params, path)?;
    }
    let metrics = evaluate(&outcome.params, &splits.test, spec.train.context_length, &plan.test)?;
    let fp = spec.fingerprint(&corpus_hash(splits), plan.reference_hash.as_deref());
    Ok(RunResult::from_parts(fp, spec, &outcome, metrics))
}

#[cfg(test)]
mod tests;
