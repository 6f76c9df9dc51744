use std::collections::HashMap;

use super::{DirectionLayout, ModelParams};
use crate::corpus::EncodedSentence;
use crate::error::{Error, Result};
use crate::numerics::{lstm_step_on_tape, ParamId, Tape, Var};

/// Per-sequence dropout masks for one direction. Each mask is reused at every
/// time step (locked dropout); entries are `0` or `1 / (1 - p)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DirectionMasks {
    pub embedding: Option<Vec<f64>>,
    /// After layer `l` for `l < layers - 1`.
    pub between: Vec<Option<Vec<f64>>>,
    pub output: Option<Vec<f64>>,
    /// Weight-dropout masks over each layer's recurrent matrix.
    pub recurrent: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SentenceMasks {
    /// Scale applied to whole embedding rows; rows not listed keep scale 1.
    pub embedding_rows: HashMap<usize, f64>,
    pub forward: DirectionMasks,
    pub backward: DirectionMasks,
}

/// Final-layer outputs of one direction, before and after output dropout.
#[derive(Clone, Debug, Default)]
pub struct DirectionActivations {
    pub raw: Vec<Var>,
    pub dropped: Vec<Var>,
}

/// Tape handles produced by [`ModelParams::forward`]. All per-position vectors
/// are aligned with `positions`.
#[derive(Clone, Debug, Default)]
pub struct ForwardOutput {
    /// Scored positions: `1..n` unidirectionally, `1..n-1` bidirectionally.
    pub positions: Vec<usize>,
    /// Scalar `log P(y_t | context)` under the type mixture.
    pub log_probs: Vec<Var>,
    /// Log type posterior over the active types.
    pub log_posteriors: Vec<Var>,
    /// The vector each posterior was computed from.
    pub contexts: Vec<Var>,
    pub activations: Vec<DirectionActivations>,
}

pub(crate) struct DirState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    /// Final-layer output after output dropout.
    pub top: Var,
}

#[derive(Default)]
pub(crate) struct MaskVars {
    embedding: Option<Var>,
    between: Vec<Option<Var>>,
    output: Option<Var>,
    recurrent: Vec<Option<Var>>,
}

impl ModelParams {
    pub(crate) fn zero_state(&self, tape: &mut Tape<'_>) -> DirState {
        let layers = &self.layout.forward.layers;
        let h: Vec<Var> = layers.iter().map(|l| tape.zeros(l.hidden_width)).collect();
        let c: Vec<Var> = layers.iter().map(|l| tape.zeros(l.hidden_width)).collect();
        let top = *h.last().expect("at least one layer");
        DirState { h, c, top }
    }

    pub(crate) fn mask_vars(
        &self,
        tape: &mut Tape<'_>,
        dir: &DirectionLayout,
        masks: Option<&DirectionMasks>,
    ) -> MaskVars {
        let Some(m) = masks else {
            return MaskVars::default();
        };
        let mut constant = |v: &Option<Vec<f64>>| v.as_ref().map(|v| tape.constant(v.clone()));
        let embedding = constant(&m.embedding);
        let between = m.between.iter().map(&mut constant).collect();
        let output = constant(&m.output);
        let recurrent = dir
            .layers
            .iter()
            .zip(m.recurrent.iter().chain(std::iter::repeat(&None)))
            .map(|(w, mask)| {
                mask.as_ref().map(|mask| {
                    let (r, c) = tape.store().shape(w.recurrent_weights);
                    let mv = tape.constant_matrix(r, c, mask.clone());
                    let p = tape.param(w.recurrent_weights);
                    tape.mul(p, mv)
                })
            })
            .collect();
        MaskVars {
            embedding,
            between,
            output,
            recurrent,
        }
    }

    /// Consumes `token` in one direction. Returns the new state and the
    /// final-layer output before output dropout.
    pub(crate) fn direction_step(
        &self,
        tape: &mut Tape<'_>,
        dir: &DirectionLayout,
        masks: &MaskVars,
        row_scale: f64,
        state: &DirState,
        token: usize,
        feedback: Option<Var>,
    ) -> (DirState, Var) {
        let emb = tape.param(self.layout.embedding);
        let mut x = tape.gather(emb, token);
        if row_scale != 1.0 {
            x = tape.scale(x, row_scale);
        }
        if let Some(m) = masks.embedding {
            x = tape.mul(x, m);
        }
        if let Some(log_post) = feedback {
            let nu = self.type_feedback_var(tape, log_post);
            x = tape.concat(&[x, nu]);
        }
        let mut h_out = Vec::with_capacity(dir.layers.len());
        let mut c_out = Vec::with_capacity(dir.layers.len());
        let mut input = x;
        for (l, weights) in dir.layers.iter().enumerate() {
            let recurrent = masks.recurrent.get(l).copied().flatten();
            let (h, c) =
                lstm_step_on_tape(tape, weights, recurrent, state.h[l], state.c[l], input);
            h_out.push(h);
            c_out.push(c);
            input = match masks.between.get(l).copied().flatten() {
                Some(m) if l + 1 < dir.layers.len() => tape.mul(h, m),
                _ => h,
            };
        }
        let raw = *h_out.last().expect("at least one layer");
        let top = match masks.output {
            Some(m) => tape.mul(raw, m),
            None => raw,
        };
        (
            DirState {
                h: h_out,
                c: c_out,
                top,
            },
            raw,
        )
    }

    /// Log type posterior over the active types from `context`.
    pub(crate) fn log_posterior_var(&self, tape: &mut Tape<'_>, context: Var, proj: ParamId) -> Var {
        let p = tape.param(proj);
        let z = tape.matvec(p, context);
        let we = tape.param(self.layout.type_embedding);
        let logits = if self.active.len() == self.sizes.len() {
            tape.matvec(we, z)
        } else {
            tape.matvec_rows(we, z, self.active.clone())
        };
        tape.log_softmax(logits)
    }

    /// Posterior-weighted sum of the type embedding rows.
    pub(crate) fn type_feedback_var(&self, tape: &mut Tape<'_>, log_post: Var) -> Var {
        let probs = tape.exp(log_post);
        let full = if self.active.len() == self.sizes.len() {
            probs
        } else {
            let mut pieces = Vec::with_capacity(self.sizes.len());
            let mut a = 0;
            for j in 0..self.sizes.len() {
                if self.active.get(a) == Some(&j) {
                    pieces.push(tape.slice(probs, a..a + 1));
                    a += 1;
                } else {
                    pieces.push(tape.zeros(1));
                }
            }
            tape.concat(&pieces)
        };
        let we = tape.param(self.layout.type_embedding);
        tape.vecmat(full, we)
    }

    /// Log-softmax over `V_j` from hidden vector `h`; `None` for an empty
    /// vocabulary.
    pub(crate) fn word_log_dist_var(&self, tape: &mut Tape<'_>, h: Var, j: usize) -> Option<Var> {
        let logits = if j == 0 {
            let emb = tape.param(self.layout.embedding);
            let l = tape.matvec_range(emb, h, 0..self.sizes[0]);
            let b = tape.param(self.layout.general_bias);
            tape.add(l, b)
        } else {
            let (w, b) = self.layout.type_out[j - 1]?;
            let w = tape.param(w);
            let l = tape.matvec(w, h);
            let b = tape.param(b);
            tape.add(l, b)
        };
        Some(tape.log_softmax(logits))
    }

    fn active_slot(&self, j: usize) -> Option<usize> {
        self.active.iter().position(|&a| a == j)
    }

    /// `log Σ_j P(y | type j, h) P(type j | context)` for the token at `t`.
    pub(crate) fn mixture_log_prob_var(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        log_post: Var,
        sentence: &EncodedSentence,
        t: usize,
    ) -> Result<Var> {
        let mut components = Vec::with_capacity(2);
        if let Some(g) = sentence.general_index(t) {
            let dist = self.word_log_dist_var(tape, h, 0).expect("general vocabulary");
            let lw = tape.pick(dist, g);
            let lt = tape.pick(log_post, 0);
            components.push(tape.add(lw, lt));
        }
        for (j0, cand) in sentence.candidates[t].iter().enumerate() {
            let j = j0 + 1;
            let (Some(c), Some(slot)) = (cand, self.active_slot(j)) else {
                continue;
            };
            let dist = self.word_log_dist_var(tape, h, j).expect("active type");
            let lw = tape.pick(dist, *c);
            let lt = tape.pick(log_post, slot);
            components.push(tape.add(lw, lt));
        }
        match components.len() {
            0 => Err(Error::Data(format!(
                "token {:?} at position {t} has zero probability under every type",
                sentence.surfaces[t]
            ))),
            1 => Ok(components[0]),
            _ => {
                let v = tape.concat(&components);
                Ok(tape.log_sum_exp(v))
            }
        }
    }

    fn check_sentence(&self, sentence: &EncodedSentence) -> Result<()> {
        if sentence.len() < 2 {
            return Err(Error::Data(
                "sentence must contain both boundary symbols".into(),
            ));
        }
        if let Some(&bad) = sentence.tokens.iter().find(|&&r| r >= self.num_rows) {
            return Err(Error::Data(format!("token row {bad} outside the embedding")));
        }
        if sentence.candidates.iter().any(|c| c.len() != self.num_types()) {
            return Err(Error::Data(
                "sentence was encoded with a different number of types".into(),
            ));
        }
        Ok(())
    }

    /// Records the whole-sentence forward pass on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        sentence: &EncodedSentence,
        masks: Option<&SentenceMasks>,
    ) -> Result<ForwardOutput> {
        self.check_sentence(sentence)?;
        if self.config.bidirectional {
            self.forward_bidirectional(tape, sentence, masks)
        } else {
            self.forward_unidirectional(tape, sentence, masks)
        }
    }

    fn row_scale(masks: Option<&SentenceMasks>, row: usize) -> f64 {
        masks
            .and_then(|m| m.embedding_rows.get(&row).copied())
            .unwrap_or(1.0)
    }

    fn forward_unidirectional(
        &self,
        tape: &mut Tape<'_>,
        sentence: &EncodedSentence,
        masks: Option<&SentenceMasks>,
    ) -> Result<ForwardOutput> {
        let n = sentence.len();
        let dir = &self.layout.forward;
        let mvars = self.mask_vars(tape, dir, masks.map(|m| &m.forward));
        let mut state = self.zero_state(tape);
        let mut feedback = self
            .config
            .feedback
            .then(|| self.log_posterior_var(tape, state.top, self.layout.context_proj));
        let mut out = ForwardOutput::default();
        let mut acts = DirectionActivations::default();
        for t in 0..n - 1 {
            let token = sentence.tokens[t];
            let (next, raw) = self.direction_step(
                tape,
                dir,
                &mvars,
                Self::row_scale(masks, token),
                &state,
                token,
                feedback,
            );
            state = next;
            acts.raw.push(raw);
            acts.dropped.push(state.top);
            let lp = self.log_posterior_var(tape, state.top, self.layout.context_proj);
            let logp = self.mixture_log_prob_var(tape, state.top, lp, sentence, t + 1)?;
            out.positions.push(t + 1);
            out.log_probs.push(logp);
            out.log_posteriors.push(lp);
            out.contexts.push(state.top);
            if self.config.feedback {
                feedback = Some(lp);
            }
        }
        out.activations.push(acts);
        Ok(out)
    }

    /// Runs one direction over `order`, returning the dropped final-layer
    /// output after each consumed token, keyed by position.
    fn run_direction(
        &self,
        tape: &mut Tape<'_>,
        sentence: &EncodedSentence,
        dir: &DirectionLayout,
        masks: Option<&SentenceMasks>,
        dir_masks: Option<&DirectionMasks>,
        order: impl Iterator<Item = usize>,
        tops: &mut [Option<Var>],
    ) -> DirectionActivations {
        let mvars = self.mask_vars(tape, dir, dir_masks);
        let mut state = self.zero_state(tape);
        let mut acts = DirectionActivations::default();
        let mut feedback = dir
            .feedback_proj
            .map(|proj| self.log_posterior_var(tape, state.top, proj));
        for t in order {
            let token = sentence.tokens[t];
            let (next, raw) = self.direction_step(
                tape,
                dir,
                &mvars,
                Self::row_scale(masks, token),
                &state,
                token,
                feedback,
            );
            state = next;
            acts.raw.push(raw);
            acts.dropped.push(state.top);
            tops[t] = Some(state.top);
            if let Some(proj) = dir.feedback_proj {
                feedback = Some(self.log_posterior_var(tape, state.top, proj));
            }
        }
        acts
    }

    fn forward_bidirectional(
        &self,
        tape: &mut Tape<'_>,
        sentence: &EncodedSentence,
        masks: Option<&SentenceMasks>,
    ) -> Result<ForwardOutput> {
        let n = sentence.len();
        let mut out = ForwardOutput::default();
        if n < 3 {
            return Ok(out);
        }
        let backward = self.layout.backward.as_ref().expect("bidirectional layout");
        let (fuse_w, fuse_b) = self.layout.fuse.expect("bidirectional layout");

        let mut left: Vec<Option<Var>> = vec![None; n];
        let mut right: Vec<Option<Var>> = vec![None; n];
        let left_acts = self.run_direction(
            tape,
            sentence,
            &self.layout.forward,
            masks,
            masks.map(|m| &m.forward),
            0..n - 2,
            &mut left,
        );
        let right_acts = self.run_direction(
            tape,
            sentence,
            backward,
            masks,
            masks.map(|m| &m.backward),
            (2..n).rev(),
            &mut right,
        );

        for t in 1..n - 1 {
            let l = left[t - 1].expect("left context");
            let r = right[t + 1].expect("right context");
            let ctx = tape.concat(&[l, r]);
            let lp = self.log_posterior_var(tape, ctx, self.layout.context_proj);
            let fw = tape.param(fuse_w);
            let fb = tape.param(fuse_b);
            let g = tape.matvec(fw, ctx);
            let g = tape.add(g, fb);
            let logp = self.mixture_log_prob_var(tape, g, lp, sentence, t)?;
            out.positions.push(t);
            out.log_probs.push(logp);
            out.log_posteriors.push(lp);
            out.contexts.push(ctx);
        }
        out.activations.push(left_acts);
        out.activations.push(right_acts);
        Ok(out)
    }
}
