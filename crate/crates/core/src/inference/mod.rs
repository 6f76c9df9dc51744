//! Perplexity, prior-mixed type decoding, tagging and entity-level scoring.

mod score;

pub use score::{
    gold_spans, predicted_spans, score_ner, Counts, NerScores, Span, TypeMapping,
};

use crate::corpus::{EncodedSentence, TaggedTokens, VocabularySet};
use crate::error::{Error, Result};
use crate::kb::TypePrior;
use crate::model::ModelParams;
use crate::parallel::{map_indexed, Execution};

/// Summed log-likelihood over the scored tokens of a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusScore {
    pub log_prob: f64,
    pub tokens: usize,
}

impl CorpusScore {
    pub fn mean_nll(&self) -> f64 {
        -self.log_prob / self.tokens as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }
}

/// Scores every sentence without dropout. Sentence results are reduced in
/// input order, so the total does not depend on `exec`.
pub fn score_corpus(
    model: &ModelParams,
    sentences: &[EncodedSentence],
    exec: Execution,
) -> Result<CorpusScore> {
    let per_sentence = map_indexed(exec, sentences, |_, s| model.score_sentence(s));
    let mut total = CorpusScore {
        log_prob: 0.0,
        tokens: 0,
    };
    for scores in per_sentence {
        let scores = scores?;
        for lp in scores.log_probs {
            total.log_prob += lp;
            total.tokens += 1;
        }
    }
    Ok(total)
}

/// `exp(-mean log P(y_t))` over next-word targets (unidirectional) or
/// interior tokens (bidirectional).
pub fn perplexity(model: &ModelParams, sentences: &[EncodedSentence], exec: Execution) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Data("perplexity of an empty corpus".into()));
    }
    let score = score_corpus(model, sentences, exec)?;
    if score.tokens == 0 {
        return Err(Error::Data("corpus has no scored tokens".into()));
    }
    Ok(score.perplexity())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub use_prior: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            alpha: 0.4,
            beta: 0.6,
            use_prior: true,
        }
    }
}

impl DecodeConfig {
    /// Posterior only.
    pub fn basic() -> Self {
        DecodeConfig {
            use_prior: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "alpha and beta must be >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.use_prior && self.alpha + self.beta <= 0.0 {
            return Err(Error::Config("alpha + beta must be positive".into()));
        }
        Ok(())
    }
}

/// `α·posterior + β·prior`, renormalised; the posterior itself when the
/// prior is switched off.
pub fn mix(posterior: &[f64], prior: &[f64], config: &DecodeConfig) -> Vec<f64> {
    if !config.use_prior {
        return posterior.to_vec();
    }
    let mixed: Vec<f64> = posterior
        .iter()
        .zip(prior)
        .map(|(p, q)| config.alpha * p + config.beta * q)
        .collect();
    let total: f64 = mixed.iter().sum();
    mixed.into_iter().map(|v| v / total).collect()
}

pub fn decode_types(
    posteriors: &[Vec<f64>],
    priors: &[Vec<f64>],
    config: &DecodeConfig,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    if posteriors.len() != priors.len() {
        return Err(Error::dim("decode_types", posteriors.len(), priors.len()));
    }
    posteriors
        .iter()
        .zip(priors)
        .map(|(p, q)| {
            if p.len() != q.len() {
                return Err(Error::dim("decode_types", p.len(), q.len()));
            }
            Ok(mix(p, q, config))
        })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index, so type 0 wins
/// any tie it takes part in.
pub fn argmax_type(dist: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in dist.iter().enumerate().skip(1) {
        if v > dist[best] {
            best = j;
        }
    }
    best
}

/// Tag label for the general type.
pub const OUTSIDE: &str = "O";

#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    /// Type name, or `"O"` for the general type.
    pub predicted_type: Vec<String>,
    /// The (possibly prior-mixed) distribution over `K + 1` types that
    /// `predicted_type` was read from.
    pub posterior: Vec<Vec<f64>>,
}

impl TaggedSentence {
    pub fn to_tagged_tokens(&self) -> TaggedTokens {
        TaggedTokens {
            tokens: self.tokens.clone(),
            tags: self.predicted_type.clone(),
        }
    }
}

/// Tags the tokens of one sentence with the most likely type at each
/// position.
pub fn tag_sentence<S: AsRef<str>>(
    model: &ModelParams,
    vocab: &VocabularySet,
    tokens: &[S],
    prior: Option<&TypePrior>,
    config: &DecodeConfig,
) -> Result<TaggedSentence> {
    config.validate()?;
    if !model.fits(vocab) {
        return Err(Error::Config("vocabulary does not match the model".into()));
    }
    if let Some(p) = prior {
        if p.num_types() != model.num_types() {
            return Err(Error::dim("type prior", model.num_types(), p.num_types()));
        }
    }
    let encoded = vocab.encode_tokens(tokens);
    let scores = model.score_sentence(&encoded)?;
    let k1 = model.num_types() + 1;
    let mut general = vec![0.0; k1];
    general[0] = 1.0;

    let mut posterior = vec![general; tokens.len()];
    for (&t, post) in scores.positions.iter().zip(scores.posteriors) {
        if (1..=tokens.len()).contains(&t) {
            posterior[t - 1] = post;
        }
    }
    if config.use_prior {
        if let Some(prior) = prior {
            for (i, post) in posterior.iter_mut().enumerate() {
                let surface = &encoded.surfaces[i + 1];
                let mut q = prior.get(surface);
                if q[0] == 1.0 && surface != tokens[i].as_ref() {
                    q = prior.get(tokens[i].as_ref());
                }
                *post = mix(post, &q, config);
            }
        }
    }
    let names = vocab.type_names();
    let predicted_type = posterior
        .iter()
        .map(|d| match argmax_type(d) {
            0 => OUTSIDE.to_string(),
            j => names[j - 1].clone(),
        })
        .collect();
    Ok(TaggedSentence {
        tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        predicted_type,
        posterior,
    })
}

pub fn tag_corpus<S: AsRef<str> + Sync>(
    model: &ModelParams,
    vocab: &VocabularySet,
    sentences: &[Vec<S>],
    prior: Option<&TypePrior>,
    config: &DecodeConfig,
    exec: Execution,
) -> Result<Vec<TaggedSentence>> {
    map_indexed(exec, sentences, |_, s| tag_sentence(model, vocab, s, prior, config))
        .into_iter()
        .collect()
}

/// `token<TAB>tag` lines with a blank line after each sentence.
pub fn to_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.predicted_type) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
