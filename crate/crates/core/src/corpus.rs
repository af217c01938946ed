//! Byte-level corpus ingestion, contiguous splitting and seeded batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Byte vocabulary size.
pub const BYTE_VOCAB: usize = 256;

/// A corpus (or a slice of one) as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub vocab_size: usize,
    pub source: String,
}

impl TokenSequence {
    /// Tokenizes text at byte level.
    pub fn from_text(text: &str, source: impl Into<String>) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            tokens: text.bytes().map(TokenId::from).collect(),
            vocab_size: BYTE_VOCAB,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Inverse of byte tokenization. Ids >= 256 are not representable and are skipped.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tokens
            .iter()
            .filter_map(|&t| u8::try_from(t).ok())
            .collect()
    }

    fn slice(&self, range: std::ops::Range<usize>, tag: &str) -> Self {
        Self {
            tokens: self.tokens[range].to_vec(),
            vocab_size: self.vocab_size,
            source: format!("{}#{tag}", self.source),
        }
    }
}

pub fn detokenize(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Reads a UTF-8 text file as a byte-level token sequence.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<TokenSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::InvalidUtf8(e.valid_up_to()))?;
    TokenSequence::from_text(text, path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let spec = Self {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train_fraction, self.val_fraction, self.test_fraction];
        if parts.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::InvalidSplit(format!(
                "fractions must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    /// Parses `a,b,c`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("split fraction {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            [a, b, c] => SplitSpec::new(*a, *b, *c),
            _ => Err(Error::Parse(format!(
                "expected three comma-separated fractions, got {s:?}"
            ))),
        }
    }
}

/// Train, validation and test slices of one corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: TokenSequence,
    pub val: TokenSequence,
    pub test: TokenSequence,
}

/// Splits contiguously in corpus order. Train and validation lengths are the
/// rounded fractional lengths; test takes the remainder.
pub fn split_corpus(seq: &TokenSequence, spec: &SplitSpec, context_length: usize) -> Result<Splits> {
    spec.validate()?;
    let n = seq.len();
    let n_train = ((n as f64) * spec.train_fraction).round() as usize;
    let n_val = ((n as f64) * spec.val_fraction).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let n_test = n - n_train - n_val;
    let needed = context_length + 1;
    for (split, len) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if len < needed {
            return Err(Error::CorpusTooSmall { split, len, needed });
        }
    }
    Ok(Splits {
        train: seq.slice(0..n_train, "train"),
        val: seq.slice(n_train..n_train + n_val, "val"),
        test: seq.slice(n_train + n_val..n, "test"),
    })
}

/// One training batch laid out row-major as `batch_size × context_length`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub offsets: Vec<usize>,
    pub context_length: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.offsets.len()
    }

    pub fn input_row(&self, b: usize) -> &[TokenId] {
        &self.inputs[b * self.context_length..(b + 1) * self.context_length]
    }

    pub fn target_row(&self, b: usize) -> &[TokenId] {
        &self.targets[b * self.context_length..(b + 1) * self.context_length]
    }

    /// Builds a batch from explicit window offsets.
    pub fn from_offsets(seq: &[TokenId], offsets: Vec<usize>, context_length: usize) -> Self {
        let mut inputs = Vec::with_capacity(offsets.len() * context_length);
        let mut targets = Vec::with_capacity(offsets.len() * context_length);
        for &p in &offsets {
            inputs.extend_from_slice(&seq[p..p + context_length]);
            targets.extend_from_slice(&seq[p + 1..p + context_length + 1]);
        }
        Self {
            offsets,
            context_length,
            inputs,
            targets,
        }
    }
}

/// Endless, deterministic stream of batches. Each epoch visits every valid
/// window offset once, in an order drawn from the seeded generator.
pub struct BatchStream<'a> {
    tokens: &'a [TokenId],
    context_length: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn num_offsets(&self) -> usize {
        self.order.len()
    }

    fn next_offset(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let p = self.order[self.cursor];
        self.cursor += 1;
        p
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let offsets: Vec<usize> = (0..self.batch_size).map(|_| self.next_offset()).collect();
        Some(Batch::from_offsets(self.tokens, offsets, self.context_length))
    }
}

pub fn make_batches(
    seq: &TokenSequence,
    context_length: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream<'_>> {
    if context_length < 2 {
        return Err(Error::InvalidContextLength(context_length));
    }
    if batch_size == 0 {
        return Err(Error::InvalidBatchSize(batch_size));
    }
    if seq.len() < context_length + 1 {
        return Err(Error::CorpusTooSmall {
            split: "batching",
            len: seq.len(),
            needed: context_length + 1,
        });
    }
    let num_offsets = seq.len() - context_length;
    let order: Vec<usize> = (0..num_offsets).collect();
    Ok(BatchStream {
        tokens: &seq.tokens,
        context_length,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
        cursor: order.len(),
        order,
    })
}

/// Token counts reported by the `ingest` command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub source: String,
    pub total_tokens: usize,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub test_tokens: usize,
    pub distinct_tokens: usize,
}

pub fn ingest_summary(seq: &TokenSequence, splits: &Splits) -> IngestSummary {
    let mut seen = [false; BYTE_VOCAB];
    for &t in &seq.tokens {
        if let Some(slot) = seen.get_mut(t as usize) {
            *slot = true;
        }
    }
    IngestSummary {
        source: seq.source.clone(),
        total_tokens: seq.len(),
        train_tokens: splits.train.len(),
        val_tokens: splits.val.len(),
        test_tokens: splits.test.len(),
        distinct_tokens: seen.iter().filter(|&&s| s).count(),
    }
}
