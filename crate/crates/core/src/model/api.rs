//! Plain-value views of the forward computation, for inspection and tests.
//! Everything here records on a throwaway tape and copies values out.

use super::ModelParams;
use crate::corpus::{EncodedSentence, VocabularySet};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Per-layer hidden and cell vectors of one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
}

impl StepState {
    pub fn top(&self) -> &[f64] {
        self.hidden.last().expect("at least one layer")
    }
}

/// Next-word distribution as a type mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    /// `P(type = j | context)` for `j = 0..=K`.
    pub type_posterior: Vec<f64>,
    /// `log P(word | type = j, context)` over `V_j`; `None` for inactive types.
    pub word_log_probs: Vec<Option<Vec<f64>>>,
}

impl MixtureDistribution {
    /// `log P(y)` for a token with general index `general` and per-type
    /// candidate indices `candidates` (types `1..=K`).
    pub fn log_prob(&self, general: Option<usize>, candidates: &[Option<usize>]) -> f64 {
        let mut terms = Vec::with_capacity(2);
        let mut add = |j: usize, idx: usize| {
            if let Some(dist) = &self.word_log_probs[j] {
                if self.type_posterior[j] > 0.0 {
                    terms.push(self.type_posterior[j].ln() + dist[idx]);
                }
            }
        };
        if let Some(g) = general {
            add(0, g);
        }
        for (j0, c) in candidates.iter().enumerate() {
            if let Some(c) = c {
                add(j0 + 1, *c);
            }
        }
        log_sum_exp(&terms)
    }

    pub fn log_prob_surface(&self, vocab: &VocabularySet, surface: &str) -> f64 {
        let e = vocab.encode_tokens(&[surface]);
        self.log_prob(e.general_index(1), &e.candidates[1])
    }

    /// `Σ_j P(j) Σ_{w ∈ V_j} P(w | j)`, which must be 1.
    pub fn total_probability(&self) -> f64 {
        self.type_posterior
            .iter()
            .zip(&self.word_log_probs)
            .filter_map(|(p, d)| d.as_ref().map(|d| p * d.iter().map(|l| l.exp()).sum::<f64>()))
            .sum()
    }
}

/// Bidirectional contexts for the interior positions of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct BidiEncoding {
    pub positions: Vec<usize>,
    /// `[h_left(t-1); h_right(t+1)]` per interior position.
    pub fused: Vec<Vec<f64>>,
    /// Type posterior over `K + 1` types per interior position.
    pub posteriors: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn initial_state(&self) -> StepState {
        let layers = &self.layout.forward.layers;
        StepState {
            hidden: layers.iter().map(|l| vec![0.0; l.hidden_width]).collect(),
            cell: layers.iter().map(|l| vec![0.0; l.hidden_width]).collect(),
        }
    }

    fn state_vars(&self, tape: &mut Tape<'_>, state: &StepState) -> super::forward::DirState {
        let h: Vec<Var> = state.hidden.iter().map(|v| tape.constant(v.clone())).collect();
        let c: Vec<Var> = state.cell.iter().map(|v| tape.constant(v.clone())).collect();
        let top = *h.last().expect("at least one layer");
        super::forward::DirState { h, c, top }
    }

    /// Consumes `token`. With feedback enabled the input is extended by the
    /// expected type embedding under the posterior computed from the
    /// incoming state, before the token is seen.
    pub fn step(&self, state: &StepState, token: usize, direction: Direction) -> Result<StepState> {
        if token >= self.num_rows {
            return Err(Error::Data(format!("token row {token} outside the embedding")));
        }
        let dir = match direction {
            Direction::Forward => &self.layout.forward,
            Direction::Backward => self
                .layout
                .backward
                .as_ref()
                .ok_or_else(|| Error::Config("unidirectional model has no backward direction".into()))?,
        };
        let widths_ok = state.hidden.len() == dir.layers.len()
            && state
                .hidden
                .iter()
                .chain(&state.cell)
                .zip(dir.layers.iter().chain(&dir.layers))
                .all(|(v, l)| v.len() == l.hidden_width);
        if !widths_ok {
            return Err(Error::Config("state does not match the layer widths".into()));
        }
        let mut tape = Tape::new(&self.store);
        let s = self.state_vars(&mut tape, state);
        let proj = if self.config.bidirectional {
            dir.feedback_proj
        } else {
            self.config.feedback.then_some(self.layout.context_proj)
        };
        let feedback = proj.map(|p| self.log_posterior_var(&mut tape, s.top, p));
        let masks = super::forward::MaskVars::default();
        let (next, _) = self.direction_step(&mut tape, dir, &masks, 1.0, &s, token, feedback);
        Ok(StepState {
            hidden: next.h.iter().map(|&v| tape.value(v).to_vec()).collect(),
            cell: next.c.iter().map(|&v| tape.value(v).to_vec()).collect(),
        })
    }

    /// `P(type | context)` over `K + 1` types.
    pub fn type_posterior(&self, context: &[f64]) -> Result<Vec<f64>> {
        let width = self.config.context_width();
        if context.len() != width {
            return Err(Error::dim("type_posterior", width, context.len()));
        }
        let mut tape = Tape::new(&self.store);
        let c = tape.constant(context.to_vec());
        let lp = self.log_posterior_var(&mut tape, c, self.layout.context_proj);
        Ok(self.expand_posterior(tape.value(lp)))
    }

    /// `log P(word | type = j, h)` over `V_j`; `None` when `V_j` is empty.
    pub fn word_given_type(&self, hidden: &[f64], j: usize) -> Result<Option<Vec<f64>>> {
        if hidden.len() != self.config.embed_dim {
            return Err(Error::dim("word_given_type", self.config.embed_dim, hidden.len()));
        }
        if j > self.num_types() {
            return Err(Error::Config(format!("type {j} out of range")));
        }
        let mut tape = Tape::new(&self.store);
        let h = tape.constant(hidden.to_vec());
        Ok(self
            .word_log_dist_var(&mut tape, h, j)
            .map(|v| tape.value(v).to_vec()))
    }

    /// Expected type embedding `Σ_j posterior_j · W^e_j`.
    pub fn type_feedback(&self, posterior: &[f64]) -> Result<Vec<f64>> {
        let k1 = self.num_types() + 1;
        if posterior.len() != k1 {
            return Err(Error::dim("type_feedback", k1, posterior.len()));
        }
        let mut tape = Tape::new(&self.store);
        let p = tape.constant(posterior.to_vec());
        let we = tape.param(self.layout.type_embedding);
        let nu = tape.vecmat(p, we);
        Ok(tape.value(nu).to_vec())
    }

    /// Mixture over the next word given a unidirectional state.
    pub fn next_word_distribution(&self, state: &StepState) -> Result<MixtureDistribution> {
        if self.config.bidirectional {
            return Err(Error::Config(
                "next-word distribution needs a unidirectional model".into(),
            ));
        }
        self.mixture_from_context(state.top(), state.top())
    }

    fn mixture_from_context(&self, context: &[f64], hidden: &[f64]) -> Result<MixtureDistribution> {
        let type_posterior = self.type_posterior(context)?;
        let word_log_probs = (0..=self.num_types())
            .map(|j| self.word_given_type(hidden, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureDistribution {
            type_posterior,
            word_log_probs,
        })
    }

    /// Fused left/right contexts and type posteriors for interior positions.
    pub fn encode_bidirectional(&self, sentence: &EncodedSentence) -> Result<BidiEncoding> {
        if !self.config.bidirectional {
            return Err(Error::Config("model is unidirectional".into()));
        }
        if sentence.len() < 2 {
            return Err(Error::Data(format!(
                "bidirectional encoding needs the boundary symbols, got length {}",
                sentence.len()
            )));
        }
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, sentence, None)?;
        Ok(BidiEncoding {
            positions: out.positions.clone(),
            fused: out.contexts.iter().map(|&v| tape.value(v).to_vec()).collect(),
            posteriors: out
                .log_posteriors
                .iter()
                .map(|&v| self.expand_posterior(tape.value(v)))
                .collect(),
        })
    }

    /// Per-position `log P(y_t)` and posteriors without dropout.
    pub fn score_sentence(&self, sentence: &EncodedSentence) -> Result<SentenceScores> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, sentence, None)?;
        Ok(SentenceScores {
            positions: out.positions.clone(),
            log_probs: out.log_probs.iter().map(|&v| tape.scalar(v)).collect(),
            posteriors: out
                .log_posteriors
                .iter()
                .map(|&v| self.expand_posterior(tape.value(v)))
                .collect(),
        })
    }
}

/// Dropout-free per-position scores for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceScores {
    pub positions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub posteriors: Vec<Vec<f64>>,
}
