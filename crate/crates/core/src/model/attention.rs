use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Causal attention weights indexed `(layer, head, query, key)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    len: usize,
    weights: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(layers: usize, heads: usize, len: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != layers * heads * len * len {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {layers}×{heads}×{len}×{len}",
                weights.len()
            )));
        }
        Ok(Self {
            layers,
            heads,
            len,
            weights,
        })
    }

    /// Uniform attention over each causal prefix.
    pub fn uniform(layers: usize, heads: usize, len: usize) -> Self {
        let mut weights = vec![0.0; layers * heads * len * len];
        for row in weights.chunks_mut(len).enumerate() {
            let i = row.0 % len;
            row.1[..=i].fill(1.0 / (i + 1) as f64);
        }
        Self {
            layers,
            heads,
            len,
            weights,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn index(&self, layer: usize, head: usize, i: usize, j: usize) -> usize {
        ((layer * self.heads + head) * self.len + i) * self.len + j
    }

    pub fn get(&self, layer: usize, head: usize, i: usize, j: usize) -> f64 {
        self.weights[self.index(layer, head, i, j)]
    }

    pub fn set(&mut self, layer: usize, head: usize, i: usize, j: usize, value: f64) {
        let idx = self.index(layer, head, i, j);
        self.weights[idx] = value;
    }

    /// Key weights of one query row, full length (masked keys are zero).
    pub fn row(&self, layer: usize, head: usize, i: usize) -> &[f64] {
        let start = self.index(layer, head, i, 0);
        &self.weights[start..start + self.len]
    }

    /// All heads of one layer, `heads × len × len`.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let size = self.heads * self.len * self.len;
        &self.weights[layer * size..(layer + 1) * size]
    }

    /// Checks causality, non-negativity and row normalization.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for l in 0..self.layers {
            for h in 0..self.heads {
                for i in 0..self.len {
                    let row = self.row(l, h, i);
                    if row[i + 1..].iter().any(|&w| w != 0.0) {
                        return Err(Error::ShapeMismatch(format!(
                            "non-causal weight in layer {l} head {h} row {i}"
                        )));
                    }
                    if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                        return Err(Error::ShapeMismatch(format!(
                            "negative or non-finite weight in layer {l} head {h} row {i}"
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > tol {
                        return Err(Error::ShapeMismatch(format!(
                            "row sum {sum} in layer {l} head {h} row {i}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
