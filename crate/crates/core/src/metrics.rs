//! Evaluation metrics: perplexity, attention entropy (bits) and block
//! fidelity of attention mass.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{lm_loss, AttentionTensor, ModelParams};
use crate::partition::{Partition, PartitionSource};
use crate::scalar::Scalar;

/// Evaluation windows are batched this many at a time.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub bits: f64,
    pub per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fidelity: f64,
    pub per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub perplexity: f64,
    pub entropy_bits: f64,
    pub fidelity: f64,
    pub per_layer_entropy: Vec<f64>,
    pub per_layer_fidelity: Vec<f64>,
    pub windows: usize,
}

/// Shannon entropy in bits with `0·log 0 = 0`.
pub fn row_entropy_bits(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

/// Entropy per row, averaged over queries, then heads, then layers.
pub fn attention_entropy(attn: &AttentionTensor) -> EntropyReport {
    let (layers, heads, n) = (attn.layers(), attn.heads(), attn.len());
    let per_layer: Vec<f64> = (0..layers)
        .map(|l| {
            let head_means: f64 = (0..heads)
                .map(|h| (0..n).map(|i| row_entropy_bits(&attn.row(l, h, i)[..=i])).sum::<f64>() / n as f64)
                .sum();
            head_means / heads as f64
        })
        .collect();
    EntropyReport {
        bits: per_layer.iter().sum::<f64>() / layers as f64,
        per_layer,
    }
}

/// Within-block and total causal attention mass of one layer.
fn layer_masses(attn: &AttentionTensor, p: &Partition, layer: usize) -> (f64, f64) {
    let n = attn.len();
    let block_of = p.block_of();
    let mut within = 0.0;
    let mut total = 0.0;
    for h in 0..attn.heads() {
        for i in 0..n {
            for (j, &a) in attn.row(layer, h, i)[..=i].iter().enumerate() {
                total += a;
                if block_of[j] == block_of[i] {
                    within += a;
                }
            }
        }
    }
    (within, total)
}

/// Fraction of causal attention mass whose query and key share a block.
pub fn fidelity(attn: &AttentionTensor, p: &Partition) -> Result<FidelityReport> {
    if attn.len() != p.len() {
        return Err(Error::LengthMismatch {
            attn: attn.len(),
            partition: p.len(),
        });
    }
    let masses: Vec<(f64, f64)> = (0..attn.layers()).map(|l| layer_masses(attn, p, l)).collect();
    let (w, t) = masses.iter().fold((0.0, 0.0), |acc, m| (acc.0 + m.0, acc.1 + m.1));
    Ok(FidelityReport {
        fidelity: w / t,
        per_layer: masses.iter().map(|(w, t)| w / t).collect(),
    })
}

/// Within-block share of a single query row.
pub fn row_fidelity(attn: &AttentionTensor, p: &Partition, layer: usize, head: usize, query: usize) -> Result<f64> {
    if query >= attn.len() || attn.len() != p.len() {
        return Err(Error::PositionOutOfRange {
            pos: query,
            len: attn.len().min(p.len()),
        });
    }
    let row = &attn.row(layer, head, query)[..=query];
    let total: f64 = row.iter().sum();
    let within: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| p.block(*j) == p.block(query))
        .map(|(_, a)| a)
        .sum();
    Ok(within / total)
}

/// Start offsets of non-overlapping evaluation windows over a split.
pub fn eval_offsets(len: usize, context_length: usize) -> Result<Vec<usize>> {
    if context_length == 0 || len < context_length + 1 {
        return Err(Error::CorpusTooSmall {
            split: "test",
            len,
            needed: context_length + 1,
        });
    }
    Ok((0..(len - 1) / context_length).map(|k| k * context_length).collect())
}

/// `exp` of the mean cross-entropy over non-overlapping windows.
pub fn perplexity<T: Scalar>(params: &ModelParams<T>, test: &TokenSequence, context_length: usize) -> Result<f64> {
    let offsets = eval_offsets(test.len(), context_length)?;
    let mut total = 0.0;
    for chunk in offsets.chunks(EVAL_BATCH) {
        let (inputs, targets) = gather(test, chunk, context_length);
        let pass = params.forward_batch(&inputs, context_length, false)?;
        total += lm_loss(pass.logits(), &targets, params.config().vocab_size)?.f64() * chunk.len() as f64;
    }
    Ok((total / offsets.len() as f64).exp())
}

fn gather(seq: &TokenSequence, offsets: &[usize], n: usize) -> (Vec<u32>, Vec<u32>) {
    let mut inputs = Vec::with_capacity(offsets.len() * n);
    let mut targets = Vec::with_capacity(offsets.len() * n);
    for &p in offsets {
        inputs.extend_from_slice(&seq.tokens[p..p + n]);
        targets.extend_from_slice(&seq.tokens[p + 1..p + n + 1]);
    }
    (inputs, targets)
}

/// Perplexity, entropy and fidelity over the same non-overlapping windows.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    test: &TokenSequence,
    context_length: usize,
    partitions: &PartitionSource,
) -> Result<MetricsReport> {
    let offsets = eval_offsets(test.len(), context_length)?;
    let layers = params.config().num_layers;
    let mut loss_sum = 0.0;
    let mut entropy_sum = vec![0.0; layers];
    let mut within = vec![0.0; layers];
    let mut mass = vec![0.0; layers];
    for chunk in offsets.chunks(EVAL_BATCH) {
        let (inputs, targets) = gather(test, chunk, context_length);
        let pass = params.forward_batch(&inputs, context_length, true)?;
        loss_sum += lm_loss(pass.logits(), &targets, params.config().vocab_size)?.f64() * chunk.len() as f64;
        for (row, &offset) in chunk.iter().enumerate() {
            let attn = pass.attention_tensor(row);
            let p = partitions.window(offset, context_length)?;
            let e = attention_entropy(&attn);
            for l in 0..layers {
                entropy_sum[l] += e.per_layer[l];
                let (w, t) = layer_masses(&attn, &p, l);
                within[l] += w;
                mass[l] += t;
            }
        }
    }
    let windows = offsets.len() as f64;
    let per_layer_entropy: Vec<f64> = entropy_sum.iter().map(|e| e / windows).collect();
    let per_layer_fidelity: Vec<f64> = within.iter().zip(&mass).map(|(w, t)| w / t).collect();
    Ok(MetricsReport {
        perplexity: (loss_sum / windows).exp(),
        entropy_bits: per_layer_entropy.iter().sum::<f64>() / layers as f64,
        fidelity: within.iter().sum::<f64>() / mass.iter().sum::<f64>(),
        per_layer_entropy,
        per_layer_fidelity,
        windows: offsets.len(),
    })
}
