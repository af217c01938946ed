//! Block partitions of token positions: fixed positional windows and
//! adaptive segmentation by adjacent-embedding cosine similarity.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monotone assignment of positions to contiguous blocks `0..num_blocks`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    block_of: Vec<usize>,
    num_blocks: usize,
}

impl Partition {
    /// Validates a raw block assignment.
    pub fn from_block_of(block_of: Vec<usize>) -> Result<Self> {
        let Some(&first) = block_of.first() else {
            return Err(Error::InvalidPartition("empty".into()));
        };
        if first != 0 {
            return Err(Error::InvalidPartition("first block index must be 0".into()));
        }
        for (i, w) in block_of.windows(2).enumerate() {
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(Error::InvalidPartition(format!(
                    "block index jumps from {} to {} at position {}",
                    w[0],
                    w[1],
                    i + 1
                )));
            }
        }
        let num_blocks = block_of[block_of.len() - 1] + 1;
        Ok(Self {
            block_of,
            num_blocks,
        })
    }

    /// Builds a partition from sorted block start positions (excluding 0).
    pub fn from_starts(len: usize, starts: &[usize]) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidPartition("empty".into()));
        }
        let mut block_of = vec![0; len];
        let mut block = 0;
        let mut next = starts.iter().copied().peekable();
        for (i, slot) in block_of.iter_mut().enumerate() {
            while next.peek() == Some(&i) {
                next.next();
                if i > 0 {
                    block += 1;
                }
            }
            *slot = block;
        }
        Self::from_block_of(block_of)
    }

    pub fn single_block(len: usize) -> Result<Self> {
        Self::from_block_of(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.block_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_of.is_empty()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }

    pub fn block(&self, i: usize) -> usize {
        self.block_of[i]
    }

    /// Sizes of the blocks in order.
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_blocks];
        for &b in &self.block_of {
            sizes[b] += 1;
        }
        sizes
    }

    /// Start position of every block after the first.
    pub fn starts(&self) -> Vec<usize> {
        (1..self.len())
            .filter(|&i| self.block_of[i] != self.block_of[i - 1])
            .collect()
    }

    /// The partition seen by a window `[offset, offset + len)`, renumbered from 0.
    pub fn restrict(&self, offset: usize, len: usize) -> Result<Self> {
        if len == 0 || offset + len > self.len() {
            return Err(Error::PositionOutOfRange {
                pos: offset + len,
                len: self.len(),
            });
        }
        let base = self.block_of[offset];
        Ok(Self {
            block_of: self.block_of[offset..offset + len]
                .iter()
                .map(|b| b - base)
                .collect(),
            num_blocks: self.block_of[offset + len - 1] - base + 1,
        })
    }

    /// Text form: one block index per line.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * 3);
        for b in &self.block_of {
            out.push_str(&b.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let block_of = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("block index {l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_block_of(block_of)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Positional windows: position `i` belongs to block `i / window`.
pub fn fixed_window_partition(length: usize, window: usize) -> Result<Partition> {
    if length == 0 || window == 0 {
        return Err(Error::InvalidPartition(format!(
            "length {length} and window {window} must be positive"
        )));
    }
    Partition::from_block_of((0..length).map(|i| i / window).collect())
}

/// Cosine similarity between each embedding and its successor.
pub fn adjacent_similarity(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    if embeddings.len() < 2 {
        return Err(Error::TooFewEmbeddings {
            needed: 2,
            got: embeddings.len(),
        });
    }
    let norms = embeddings
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::DegenerateEmbedding(i))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((0..embeddings.len() - 1)
        .map(|i| {
            let dot: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[i + 1])
                .map(|(a, b)| a * b)
                .sum();
            (dot / (norms[i] * norms[i + 1])).clamp(-1.0, 1.0)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `τ = mean(s) − k·std(s)`
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPolicy {
    pub threshold_mode: ThresholdMode,
    pub fixed_tau: f64,
    pub adaptive_k: f64,
    pub min_block_len: usize,
    pub max_block_len: usize,
}

impl Default for BoundaryPolicy {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Adaptive,
            fixed_tau: 0.5,
            adaptive_k: 0.5,
            min_block_len: 2,
            max_block_len: 12,
        }
    }
}

impl BoundaryPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_block_len < 1 {
            return Err(Error::InvalidPolicy("min_block_len must be >= 1".into()));
        }
        if self.max_block_len < self.min_block_len {
            return Err(Error::InvalidPolicy(format!(
                "max_block_len {} < min_block_len {}",
                self.max_block_len, self.min_block_len
            )));
        }
        if !(self.adaptive_k >= 0.0) {
            return Err(Error::InvalidPolicy("adaptive_k must be >= 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.fixed_tau) {
            return Err(Error::InvalidPolicy("fixed_tau must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    /// The boundary threshold for a similarity signal.
    pub fn threshold(&self, sims: &[f64]) -> f64 {
        match self.threshold_mode {
            ThresholdMode::Fixed => self.fixed_tau,
            ThresholdMode::Adaptive => {
                let n = sims.len() as f64;
                let mean = sims.iter().sum::<f64>() / n;
                let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
                mean - self.adaptive_k * var.sqrt()
            }
        }
    }
}

/// Block starts proposed before filtering: a new block begins at `i + 1`
/// whenever `sims[i] < tau`.
pub fn propose_boundaries(sims: &[f64], tau: f64) -> Vec<usize> {
    sims.iter()
        .enumerate()
        .filter(|(_, &s)| s < tau)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Drops the weakest (highest-similarity) boundaries that leave a block
/// shorter than `min_len`, until none does or none is left.
///
/// Blocks only grow when a boundary is dropped, so a single pass in order of
/// decreasing similarity drops exactly what the repeated "drop the weakest
/// offender" rule would.
fn enforce_min_len(len: usize, starts: &[usize], sims: &[f64], min_len: usize) -> Vec<usize> {
    let k = starts.len();
    if k == 0 || min_len <= 1 {
        return starts.to_vec();
    }
    let mut prev: Vec<Option<usize>> = (0..k).map(|i| i.checked_sub(1)).collect();
    let mut next: Vec<Option<usize>> = (0..k).map(|i| (i + 1 < k).then_some(i + 1)).collect();
    let mut alive = vec![true; k];
    let mut order: Vec<usize> = (0..k).collect();
    // weakest first; ties broken by position for determinism
    order.sort_by(|&a, &b| {
        sims[starts[b] - 1]
            .total_cmp(&sims[starts[a] - 1])
            .then(a.cmp(&b))
    });
    for idx in order {
        let left_start = prev[idx].map_or(0, |p| starts[p]);
        let right_end = next[idx].map_or(len, |q| starts[q]);
        let left = starts[idx] - left_start;
        let right = right_end - starts[idx];
        if left < min_len || right < min_len {
            alive[idx] = false;
            if let Some(p) = prev[idx] {
                next[p] = next[idx];
            }
            if let Some(q) = next[idx] {
                prev[q] = prev[idx];
            }
        }
    }
    starts
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .collect()
}

/// Recursively splits `[start, end)` at its lowest internal similarity until
/// every piece fits in `max_len`. Split points that keep both sides at least
/// `min_len` long are preferred.
fn split_long(start: usize, end: usize, sims: &[f64], min_len: usize, max_len: usize, out: &mut Vec<usize>) {
    if end - start <= max_len {
        return;
    }
    // a split at c starts a new block at c; its similarity is sims[c - 1]
    let pick = |lo: usize, hi: usize| -> Option<usize> {
        (lo..=hi)
            .filter(|&c| c > start && c < end)
            .min_by(|&a, &b| sims[a - 1].total_cmp(&sims[b - 1]).then(a.cmp(&b)))
    };
    let cut = if end - start >= 2 * min_len {
        pick(start + min_len, end - min_len)
    } else {
        None
    }
    .or_else(|| pick(start + 1, end - 1))
    .expect("block longer than max_len >= 1 has an interior split point");
    split_long(start, cut, sims, min_len, max_len, out);
    out.push(cut);
    split_long(cut, end, sims, min_len, max_len, out);
}

/// Segments a sequence of embeddings at low adjacent-similarity points.
pub fn semantic_partition(embeddings: &[Vec<f64>], policy: &BoundaryPolicy) -> Result<Partition> {
    policy.validate()?;
    let sims = adjacent_similarity(embeddings)?;
    partition_from_similarities(embeddings.len(), &sims, policy)
}

/// Segmentation given a precomputed similarity signal of length `len - 1`.
pub fn partition_from_similarities(len: usize, sims: &[f64], policy: &BoundaryPolicy) -> Result<Partition> {
    policy.validate()?;
    if sims.len() + 1 != len {
        return Err(Error::ShapeMismatch(format!(
            "{} similarities for {} positions",
            sims.len(),
            len
        )));
    }
    let tau = policy.threshold(sims);
    let proposed = propose_boundaries(sims, tau);
    let kept = enforce_min_len(len, &proposed, sims, policy.min_block_len);
    let mut starts = Vec::with_capacity(kept.len());
    let mut block_start = 0;
    for &s in kept.iter().chain(std::iter::once(&len)) {
        split_long(block_start, s, sims, policy.min_block_len, policy.max_block_len, &mut starts);
        if s < len {
            starts.push(s);
        }
        block_start = s;
    }
    Partition::from_starts(len, &starts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub num_blocks: usize,
    pub mean_len: f64,
    pub min_len: usize,
    pub max_len: usize,
}

pub fn partition_stats(p: &Partition) -> PartitionStats {
    let sizes = p.block_sizes();
    PartitionStats {
        num_blocks: p.num_blocks(),
        mean_len: p.len() as f64 / p.num_blocks() as f64,
        min_len: sizes.iter().copied().min().unwrap_or(0),
        max_len: sizes.iter().copied().max().unwrap_or(0),
    }
}

/// How partitions are produced for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PartitionMethod {
    /// Positional windows of the given width, relative to each window start.
    Fixed { window: usize },
    /// Semantic blocks from a reference checkpoint's hidden states. `reference`
    /// is a checkpoint path; `None` means the experiment's pinned baseline.
    Semantic {
        reference: Option<String>,
        policy: BoundaryPolicy,
    },
}

impl Default for PartitionMethod {
    fn default() -> Self {
        PartitionMethod::Semantic {
            reference: None,
            policy: BoundaryPolicy::default(),
        }
    }
}

impl FromStr for PartitionMethod {
    type Err = Error;

    /// Parses `fixed:W`, `semantic`, or `semantic:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("fixed", Some(w)) => {
                let window = w
                    .parse()
                    .map_err(|e| Error::Parse(format!("window {w:?}: {e}")))?;
                if window == 0 {
                    return Err(Error::Parse("window must be positive".into()));
                }
                Ok(PartitionMethod::Fixed { window })
            }
            ("semantic", reference) => Ok(PartitionMethod::Semantic {
                reference: reference.filter(|r| !r.is_empty()).map(str::to_owned),
                policy: BoundaryPolicy::default(),
            }),
            _ => Err(Error::Parse(format!(
                "partition spec {s:?}: expected fixed:W or semantic[:PATH]"
            ))),
        }
    }
}

impl std::fmt::Display for PartitionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionMethod::Fixed { window } => write!(f, "fixed:{window}"),
            PartitionMethod::Semantic { reference: None, .. } => write!(f, "semantic"),
            PartitionMethod::Semantic {
                reference: Some(r), ..
            } => write!(f, "semantic:{r}"),
        }
    }
}

/// Supplies the partition of any window `[offset, offset + len)` of a split.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionSource {
    /// Positional windows restarting at every window start.
    Fixed { window: usize },
    /// One partition over the whole split, restricted per window.
    Global(Partition),
}

impl PartitionSource {
    pub fn window(&self, offset: usize, len: usize) -> Result<Partition> {
        match self {
            PartitionSource::Fixed { window } => fixed_window_partition(len, *window),
            PartitionSource::Global(p) => p.restrict(offset, len),
        }
    }
}
