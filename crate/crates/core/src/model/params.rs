use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Normal,
    Ones,
    Zeros,
}

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: InitKind,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Offsets {
    pub wte: usize,
    pub wpe: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
}

/// Layout of every tensor in the flat buffer, in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub(crate) offsets: Offsets,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let f = cfg.mlp_dim;
        let mut entries = Vec::new();
        let mut cursor = 0;
        let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
            let offset = cursor;
            cursor += shape.iter().product::<usize>();
            entries.push(ParamEntry {
                name,
                shape,
                offset,
                init,
            });
            offset
        };
        let wte = push("wte".into(), vec![cfg.vocab_size, d], InitKind::Normal);
        let wpe = push("wpe".into(), vec![cfg.context_length, d], InitKind::Normal);
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let mut p = |suffix: &str, shape: Vec<usize>, init| push(format!("h{l}.{suffix}"), shape, init);
                BlockOffsets {
                    ln1_g: p("ln_1.weight", vec![d], InitKind::Ones),
                    ln1_b: p("ln_1.bias", vec![d], InitKind::Zeros),
                    qkv_w: p("attn.c_attn.weight", vec![d, 3 * d], InitKind::Normal),
                    qkv_b: p("attn.c_attn.bias", vec![3 * d], InitKind::Zeros),
                    proj_w: p("attn.c_proj.weight", vec![d, d], InitKind::Normal),
                    proj_b: p("attn.c_proj.bias", vec![d], InitKind::Zeros),
                    ln2_g: p("ln_2.weight", vec![d], InitKind::Ones),
                    ln2_b: p("ln_2.bias", vec![d], InitKind::Zeros),
                    fc_w: p("mlp.c_fc.weight", vec![d, f], InitKind::Normal),
                    fc_b: p("mlp.c_fc.bias", vec![f], InitKind::Zeros),
                    out_w: p("mlp.c_proj.weight", vec![f, d], InitKind::Normal),
                    out_b: p("mlp.c_proj.bias", vec![d], InitKind::Zeros),
                }
            })
            .collect();
        let lnf_g = push("ln_f.weight".into(), vec![d], InitKind::Ones);
        let lnf_b = push("ln_f.bias".into(), vec![d], InitKind::Zeros);
        Self {
            entries,
            offsets: Offsets {
                wte,
                wpe,
                blocks,
                lnf_g,
                lnf_b,
            },
            total: cursor,
        }
    }
}

/// Model weights in one flat buffer. The LM head is tied to `wte`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layout: ParamLayout,
    data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: normal(0, 0.02) weights and embeddings, unit
    /// layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        let mut data = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for entry in &layout.entries {
            let slot = &mut data[entry.range()];
            match entry.init {
                InitKind::Normal => slot.iter_mut().for_each(|x| *x = T::of(normal.sample(&mut rng))),
                InitKind::Ones => slot.fill(T::one()),
                InitKind::Zeros => {}
            }
        }
        Ok(Self {
            config: cfg.clone(),
            layout,
            data,
        })
    }

    pub fn from_data(cfg: &ModelConfig, data: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters supplied, config needs {}",
                data.len(),
                layout.total
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite parameter".into()));
        }
        Ok(Self {
            config: cfg.clone(),
            layout,
            data,
        })
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.data[e.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.entries.iter().find(|e| e.name == name)?.range();
        Some(&mut self.data[range])
    }
}
