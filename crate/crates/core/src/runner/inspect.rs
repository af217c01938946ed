use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, TokenSequence};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::partition::Partition;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryPosition {
    Last,
    Index(usize),
}

impl FromStr for QueryPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            n => n
                .parse()
                .map(Self::Index)
                .map_err(|_| Error::Parse(format!("query must be `last` or an index, got {n:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockShare {
    pub block: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub share: f64,
    pub text: String,
    /// The query's own block.
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBreakdown {
    pub layer: usize,
    pub within_share: f64,
    /// Sorted by share, largest first.
    pub blocks: Vec<BlockShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub query: usize,
    pub query_block: usize,
    pub layers: Vec<LayerBreakdown>,
}

/// Head-averaged attention of one query position, aggregated by block. Only
/// the final layer is reported unless `per_layer` is set.
pub fn inspect_attention<T: Scalar>(
    params: &ModelParams<T>,
    text: &str,
    partition: &Partition,
    query: QueryPosition,
    per_layer: bool,
) -> Result<InspectReport> {
    let seq = TokenSequence::from_text(text, "inspect")?;
    let n = seq.len();
    if partition.len() != n {
        return Err(Error::LengthMismatch {
            attn: n,
            partition: partition.len(),
        });
    }
    let q = match query {
        QueryPosition::Last => n - 1,
        QueryPosition::Index(i) if i < n => i,
        QueryPosition::Index(i) => return Err(Error::PositionOutOfRange { pos: i, len: n }),
    };
    let attn = params.forward(&seq.tokens)?.attention;
    let layers = attn.layers();
    let first = if per_layer { 0 } else { layers - 1 };
    let starts: Vec<usize> = std::iter::once(0).chain(partition.starts()).collect();
    let qb = partition.block(q);
    let mut out = Vec::new();
    for l in first..layers {
        let mut mass = vec![0.0; partition.num_blocks()];
        for h in 0..attn.heads() {
            for (j, w) in attn.row(l, h, q).iter().enumerate().take(q + 1) {
                mass[partition.block(j)] += w / attn.heads() as f64;
            }
        }
        let mut blocks: Vec<BlockShare> = (0..=qb)
            .map(|b| {
                let start = starts[b];
                let end = starts.get(b + 1).copied().unwrap_or(n);
                BlockShare {
                    block: b,
                    start,
                    end,
                    share: mass[b],
                    text: detokenize(&seq.tokens[start..end]),
                    within: b == qb,
                }
            })
            .collect();
        blocks.sort_by(|a, b| b.share.total_cmp(&a.share).then(a.block.cmp(&b.block)));
        out.push(LayerBreakdown {
            layer: l,
            within_share: mass[qb],
            blocks,
        });
    }
    Ok(InspectReport {
        query: q,
        query_block: qb,
        layers: out,
    })
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "query position {} (block B{})", self.query, self.query_block)?;
        for layer in &self.layers {
            writeln!(f, "\nlayer {}: within-block share {:.4}", layer.layer, layer.within_share)?;
            for b in &layer.blocks {
                let marker = if b.within { "*" } else { " " };
                writeln!(f, "{marker} B{:<3} {:>7.4}  {:?}", b.block, b.share, b.text)?;
            }
        }
        Ok(())
    }
}
