use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::locality::{BlockMetric, LocalityObjective, LocalityScheduleSpec};
use crate::model::{AttentionObjective, ModelParams};
use crate::partition::Partition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

fn objective_loss(
    params: &ModelParams<f64>,
    batch: &Batch,
    objective: Option<&dyn AttentionObjective<f64>>,
) -> Result<(f64, Vec<f64>)> {
    let out = params.loss_and_grad(&batch.inputs, &batch.targets, batch.context_length, objective)?;
    let loss = out.lm_loss + out.aux_loss;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("loss {loss} during gradcheck")));
    }
    Ok((loss, out.grads))
}

/// Compares the analytic gradient of the full objective against central
/// differences on `samples` randomly chosen coordinates.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck(
    params: &ModelParams<f64>,
    batch: &Batch,
    partitions: Option<&[Partition]>,
    schedule: &LocalityScheduleSpec,
    metric: BlockMetric,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    let cfg = params.config();
    let objective = match (schedule.is_inactive(), partitions) {
        (true, _) => None,
        (false, Some(parts)) => Some(LocalityObjective::<f64>::new(schedule, cfg.num_layers, cfg.num_heads, parts, metric)),
        (false, None) => {
            return Err(Error::InvalidPartition(
                "an active locality schedule needs partitions".into(),
            ))
        }
    };
    let obj = objective.as_ref().map(|o| o as &dyn AttentionObjective<f64>);
    let (_, analytic) = objective_loss(params, batch, obj)?;

    let n = params.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, n, samples.min(n));
    let mut probe = params.clone();
    let mut worst = (0.0f64, 0usize);
    for idx in coords.iter() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + epsilon;
        let (plus, _) = objective_loss(&probe, batch, obj)?;
        probe.data_mut()[idx] = orig - epsilon;
        let (minus, _) = objective_loss(&probe, batch, obj)?;
        probe.data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, idx);
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        coordinates: coords.len(),
    })
}
