//! Block distances, per-layer penalty schedules and the locality penalty
//! on attention weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionObjective, AttentionTensor};
use crate::partition::Partition;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    UniformDistributed,
    UniformLocalist,
    Progressive,
}

/// Per-layer penalty weights `λ(ℓ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalityScheduleSpec {
    pub kind: ScheduleKind,
    /// Polynomial degree of the progressive ramp.
    pub beta: u32,
    pub lambda_max: f64,
    /// Constant weight of the uniform-localist schedule.
    pub lambda_const: f64,
}

impl LocalityScheduleSpec {
    pub const fn distributed() -> Self {
        Self {
            kind: ScheduleKind::UniformDistributed,
            beta: 1,
            lambda_max: 0.0,
            lambda_const: 0.0,
        }
    }

    pub const fn localist(lambda: f64) -> Self {
        Self {
            kind: ScheduleKind::UniformLocalist,
            beta: 1,
            lambda_max: lambda,
            lambda_const: lambda,
        }
    }

    pub const fn progressive(beta: u32, lambda_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Progressive,
            beta,
            lambda_max,
            lambda_const: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max >= 0.0) || !self.lambda_max.is_finite() {
            return Err(Error::InvalidSchedule("lambda_max must be a non-negative number".into()));
        }
        if !(self.lambda_const >= 0.0) || !self.lambda_const.is_finite() {
            return Err(Error::InvalidSchedule("lambda_const must be a non-negative number".into()));
        }
        if self.kind == ScheduleKind::Progressive && self.beta == 0 {
            return Err(Error::InvalidSchedule("beta must be a positive integer".into()));
        }
        Ok(())
    }

    /// `λ(ℓ)` for layer `layer` of `num_layers`. The progressive ramp is
    /// `λ_max·(ℓ/(L−1))^β`, so the last layer always receives `λ_max`.
    pub fn lambda(&self, layer: usize, num_layers: usize) -> f64 {
        debug_assert!(layer < num_layers);
        match self.kind {
            ScheduleKind::UniformDistributed => 0.0,
            ScheduleKind::UniformLocalist => self.lambda_const,
            ScheduleKind::Progressive => {
                if num_layers < 2 {
                    return self.lambda_max;
                }
                let x = layer as f64 / (num_layers - 1) as f64;
                self.lambda_max * x.powi(self.beta as i32)
            }
        }
    }

    pub fn lambdas(&self, num_layers: usize) -> Vec<f64> {
        (0..num_layers).map(|l| self.lambda(l, num_layers)).collect()
    }

    /// True when every layer weight is zero.
    pub fn is_inactive(&self) -> bool {
        match self.kind {
            ScheduleKind::UniformDistributed => true,
            ScheduleKind::UniformLocalist => self.lambda_const == 0.0,
            ScheduleKind::Progressive => self.lambda_max == 0.0,
        }
    }

    /// Short human label, e.g. `progressive-b5`.
    pub fn label(&self) -> String {
        match self.kind {
            ScheduleKind::UniformDistributed => "uniform_distributed".into(),
            ScheduleKind::UniformLocalist => format!("uniform_localist-l{}", self.lambda_const),
            ScheduleKind::Progressive => format!("progressive-b{}-l{}", self.beta, self.lambda_max),
        }
    }
}

impl fmt::Display for LocalityScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::UniformDistributed => write!(f, "uniform_distributed"),
            ScheduleKind::UniformLocalist => write!(f, "uniform_localist:0:{}", self.lambda_const),
            ScheduleKind::Progressive => write!(f, "progressive:{}:{}", self.beta, self.lambda_max),
        }
    }
}

impl FromStr for LocalityScheduleSpec {
    type Err = Error;

    /// Parses `kind[:beta[:lambda]]` where kind is `uniform_distributed`
    /// (`distributed`), `uniform_localist` (`localist`) or `progressive`.
    /// For the localist schedule the third field is the constant weight.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let num = |i: usize, default: f64| -> Result<f64> {
            parts.get(i).filter(|p| !p.is_empty()).map_or(Ok(default), |p| {
                p.parse().map_err(|e| Error::Parse(format!("schedule field {p:?}: {e}")))
            })
        };
        let beta = parts
            .get(1)
            .filter(|p| !p.is_empty())
            .map_or(Ok(1), |p| p.parse::<u32>())
            .map_err(|e| Error::Parse(format!("beta in {s:?}: {e}")))?;
        let spec = match parts[0] {
            "uniform_distributed" | "distributed" => Self::distributed(),
            "uniform_localist" | "localist" => Self::localist(num(2, 1.0)?),
            "progressive" => Self::progressive(beta, num(2, 1.0)?),
            other => return Err(Error::Parse(format!("unknown schedule kind {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// How block indices translate into a penalty distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMetric {
    /// `|block(i) − block(j)|`
    #[default]
    Index,
    /// 0 within a block, 1 across blocks.
    Indicator,
}

impl BlockMetric {
    #[inline]
    pub fn distance(self, bi: usize, bj: usize) -> f64 {
        match self {
            BlockMetric::Index => bi.abs_diff(bj) as f64,
            BlockMetric::Indicator => f64::from(u8::from(bi != bj)),
        }
    }
}

pub fn block_distance(p: &Partition, i: usize, j: usize, metric: BlockMetric) -> Result<f64> {
    for pos in [i, j] {
        if pos >= p.len() {
            return Err(Error::PositionOutOfRange { pos, len: p.len() });
        }
    }
    Ok(metric.distance(p.block(i), p.block(j)))
}

/// Per-layer penalties and their schedule-weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBreakdown {
    pub total: f64,
    /// Mean expected block distance per query, per layer.
    pub per_layer: Vec<f64>,
    pub lambda_values: Vec<f64>,
}

impl PenaltyBreakdown {
    pub fn from_layers(per_layer: Vec<f64>, lambda_values: Vec<f64>) -> Self {
        let total = per_layer.iter().zip(&lambda_values).map(|(p, l)| p * l).sum();
        Self {
            total,
            per_layer,
            lambda_values,
        }
    }
}

/// `(1/(H·n))·Σ_h Σ_i Σ_{j≤i} A_ij·d(i,j)` for one layer laid out
/// `heads × n × n`.
pub fn layer_mean_distance<T: Scalar>(att: &[T], heads: usize, n: usize, block_of: &[usize], metric: BlockMetric) -> T {
    debug_assert_eq!(att.len(), heads * n * n);
    debug_assert_eq!(block_of.len(), n);
    let mut acc = T::zero();
    for head in 0..heads {
        for i in 0..n {
            let row = &att[(head * n + i) * n..(head * n + i) * n + i + 1];
            let bi = block_of[i];
            for (j, &a) in row.iter().enumerate() {
                let dist = metric.distance(bi, block_of[j]);
                if dist != 0.0 {
                    acc += a * T::of(dist);
                }
            }
        }
    }
    acc / T::of((heads * n) as f64)
}

pub fn locality_penalty(
    attn: &AttentionTensor,
    p: &Partition,
    spec: &LocalityScheduleSpec,
    metric: BlockMetric,
) -> Result<PenaltyBreakdown> {
    if attn.len() != p.len() {
        return Err(Error::LengthMismatch {
            attn: attn.len(),
            partition: p.len(),
        });
    }
    spec.validate()?;
    let per_layer = (0..attn.layers())
        .map(|l| layer_mean_distance(attn.layer(l), attn.heads(), attn.len(), p.block_of(), metric))
        .collect();
    Ok(PenaltyBreakdown::from_layers(per_layer, spec.lambdas(attn.layers())))
}

/// The locality penalty as a training objective over a batch: each row has
/// its own partition and the penalty is averaged over rows.
pub struct LocalityObjective<'a, T> {
    lambdas: Vec<T>,
    partitions: &'a [Partition],
    metric: BlockMetric,
    heads: usize,
}

impl<'a, T: Scalar> LocalityObjective<'a, T> {
    pub fn new(spec: &LocalityScheduleSpec, num_layers: usize, heads: usize, partitions: &'a [Partition], metric: BlockMetric) -> Self {
        Self {
            lambdas: spec.lambdas(num_layers).into_iter().map(T::of).collect(),
            partitions,
            metric,
            heads,
        }
    }

    fn rows(&self) -> T {
        T::of(self.partitions.len() as f64)
    }
}

impl<T: Scalar> AttentionObjective<T> for LocalityObjective<'_, T> {
    fn layer_value(&self, layer: usize, row: usize, att: &[T]) -> T {
        let lambda = self.lambdas[layer];
        if lambda == T::zero() {
            return T::zero();
        }
        let p = &self.partitions[row];
        lambda * layer_mean_distance(att, self.heads, p.len(), p.block_of(), self.metric) / self.rows()
    }

    fn add_layer_grad(&self, layer: usize, row: usize, _att: &[T], d_att: &mut [T]) {
        let lambda = self.lambdas[layer];
        if lambda == T::zero() {
            return;
        }
        let p = &self.partitions[row];
        let n = p.len();
        let coef = lambda / (T::of((self.heads * n) as f64) * self.rows());
        let block_of = p.block_of();
        for head in 0..self.heads {
            for i in 0..n {
                let g = &mut d_att[(head * n + i) * n..(head * n + i) * n + i + 1];
                for (j, gj) in g.iter_mut().enumerate() {
                    let dist = self.metric.distance(block_of[i], block_of[j]);
                    if dist != 0.0 {
                        *gj += coef * T::of(dist);
                    }
                }
            }
        }
    }
}
