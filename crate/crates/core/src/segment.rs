//! Semantic segmentation of whole token splits using a reference model's
//! middle-layer hidden states.

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::partition::{partition_from_similarities, BoundaryPolicy, Partition};
use crate::scalar::Scalar;

fn cosine(a: &[f64], b: &[f64], pos: usize) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0) {
        return Err(Error::DegenerateEmbedding(pos));
    }
    if !(nb > 0.0) {
        return Err(Error::DegenerateEmbedding(pos + 1));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Adjacent cosine similarities of the reference model's hidden states over
/// a whole split, computed window by window (context-length chunks).
pub fn split_similarities<T: Scalar>(reference: &ModelParams<T>, seq: &TokenSequence) -> Result<Vec<f64>> {
    let ctx = reference.config().context_length;
    let layer = reference.config().embedding_layer();
    let mut sims = Vec::with_capacity(seq.len().saturating_sub(1));
    let mut prev: Option<Vec<f64>> = None;
    for (chunk_idx, chunk) in seq.tokens.chunks(ctx).enumerate() {
        let states = reference.hidden_states(chunk, layer)?;
        let base = chunk_idx * ctx;
        if let Some(p) = prev.take() {
            sims.push(cosine(&p, &states[0], base - 1)?);
        }
        for (k, pair) in states.windows(2).enumerate() {
            sims.push(cosine(&pair[0], &pair[1], base + k)?);
        }
        prev = states.into_iter().last();
    }
    Ok(sims)
}

/// One semantic partition covering the whole split.
pub fn segment_split<T: Scalar>(reference: &ModelParams<T>, seq: &TokenSequence, policy: &BoundaryPolicy) -> Result<Partition> {
    if seq.len() < 2 {
        return Partition::single_block(seq.len());
    }
    let sims = split_similarities(reference, seq)?;
    partition_from_similarities(seq.len(), &sims, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::partition::{adjacent_similarity, semantic_partition};

    #[test]
    fn chunked_similarities_match_per_chunk_states() {
        let params = ModelParams::<f64>::init(&ModelConfig::tiny()).unwrap();
        let seq = TokenSequence::from_text("The neural network detected suspicious activity.", "t").unwrap();
        let sims = split_similarities(&params, &seq).unwrap();
        assert_eq!(sims.len(), seq.len() - 1);
        let ctx = 12;
        let layer = params.config().embedding_layer();
        let mut states = Vec::new();
        for chunk in seq.tokens.chunks(ctx) {
            states.extend(params.hidden_states(chunk, layer).unwrap());
        }
        let direct = adjacent_similarity(&states).unwrap();
        for (a, b) in sims.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let policy = BoundaryPolicy::default();
        assert_eq!(segment_split(&params, &seq, &policy).unwrap(), semantic_partition(&states, &policy).unwrap());
    }
}
