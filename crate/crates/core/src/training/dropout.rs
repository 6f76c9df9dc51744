use std::collections::BTreeSet;

use rand::Rng;

use super::DropoutRates;
use crate::corpus::EncodedSentence;
use crate::model::{DirectionMasks, ModelParams, SentenceMasks};
use crate::numerics::LstmWeights;

/// Inverted-dropout mask: `0` with probability `p`, else `1 / (1 - p)`.
pub fn bernoulli_mask<R: Rng>(len: usize, p: f64, rng: &mut R) -> Option<Vec<f64>> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

fn direction_masks<R: Rng>(
    layers: &[LstmWeights],
    embed_dim: usize,
    rates: &DropoutRates,
    rng: &mut R,
) -> DirectionMasks {
    let embedding = bernoulli_mask(embed_dim, rates.embedding, rng);
    let between = layers[..layers.len() - 1]
        .iter()
        .map(|l| bernoulli_mask(l.hidden_width, rates.layers, rng))
        .collect();
    let output = bernoulli_mask(embed_dim, rates.output, rng);
    let recurrent = layers
        .iter()
        .map(|l| bernoulli_mask(4 * l.hidden_width * l.hidden_width, rates.weight, rng))
        .collect();
    DirectionMasks {
        embedding,
        between,
        output,
        recurrent,
    }
}

/// Draws every mask needed for one training sequence. Embedding-row
/// dropout is sampled once per distinct row in the sentence, so repeated
/// words are dropped together.
pub fn sample_masks<R: Rng>(
    model: &ModelParams,
    sentence: &EncodedSentence,
    rates: &DropoutRates,
    rng: &mut R,
) -> SentenceMasks {
    let mut masks = SentenceMasks::default();
    if rates.embedding_rows > 0.0 {
        let keep = 1.0 / (1.0 - rates.embedding_rows);
        let rows: BTreeSet<usize> = sentence.tokens.iter().copied().collect();
        for row in rows {
            let scale = if rng.gen::<f64>() < rates.embedding_rows { 0.0 } else { keep };
            masks.embedding_rows.insert(row, scale);
        }
    }
    let layout = model.layout();
    let e = model.config().embed_dim;
    masks.forward = direction_masks(&layout.forward.layers, e, rates, rng);
    if let Some(bwd) = &layout.backward {
        masks.backward = direction_masks(&bwd.layers, e, rates, rng);
    }
    masks
}
