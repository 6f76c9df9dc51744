use std::time::Instant;

use rand::seq::SliceRandom;

use super::dropout::sample_masks;
use super::loss::sentence_objective;
use super::TrainConfig;
use crate::corpus::EncodedSentence;
use crate::error::{Error, Result};
use crate::inference::perplexity;
use crate::kb::TypePrior;
use crate::model::ModelParams;
use crate::numerics::{
    check_gradients, GradCheckOptions, GradCheckReport, Gradients, ParamStore, Tape,
};
use crate::parallel::{map_indexed, Execution};
use crate::rng;

/// Encoded training and validation sentences plus the optional prior used by
/// the KL term.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [EncodedSentence],
    pub valid: &'a [EncodedSentence],
    pub prior: Option<&'a TypePrior>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean negative log-likelihood per scored token, dropout active.
    pub train_loss: f64,
    /// Mean full objective per scored token, penalties included.
    pub train_objective: f64,
    pub valid_perplexity: f64,
    /// Whether the validated parameters were the running average.
    pub averaging: bool,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    /// Averaging was active and validation stopped improving.
    NoImprovement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_valid_perplexity: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch after which iterate averaging began.
    pub averaging_start: Option<usize>,
    pub best_epoch: usize,
    pub best_valid_perplexity: f64,
    pub stop_reason: StopReason,
    pub wall_seconds: f64,
}

/// Everything needed to continue training bit-exactly from an epoch
/// boundary. Random streams are derived from `(seed, epoch)`, so no
/// generator state needs saving.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// The SGD iterate.
    pub current: ParamStore,
    /// Running mean of the iterates once averaging has started.
    pub average: Option<ParamStore>,
    pub averaged_steps: u64,
    pub averaging_start: Option<usize>,
    /// Parameters with the best validation perplexity so far.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_valid_perplexity: f64,
    pub since_best: usize,
    pub initial_valid_perplexity: f64,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
}

/// Splits a sentence into windows of at most `bptt` tokens so that every
/// scored position falls in exactly one window. Windows overlap by one token
/// unidirectionally and by two bidirectionally.
pub fn split_windows(sentence: &EncodedSentence, bptt: usize, bidirectional: bool) -> Vec<EncodedSentence> {
    let n = sentence.len();
    if n <= bptt {
        return vec![sentence.clone()];
    }
    let overlap = if bidirectional { 2 } else { 1 };
    let stride = bptt - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    while start + overlap < n {
        let end = (start + bptt).min(n);
        out.push(sentence.window(start..end));
        if end == n {
            break;
        }
        start += stride;
    }
    out
}

struct BatchResult {
    grads: Gradients,
    objective: f64,
    nll: f64,
    scored: usize,
}

pub struct Trainer<'a> {
    model: ModelParams,
    config: TrainConfig,
    data: TrainData<'a>,
    windows: Vec<EncodedSentence>,
    exec: Execution,
    frozen: Vec<bool>,
    state: TrainState,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Validates the configuration and measures the starting validation
    /// perplexity.
    pub fn new(model: ModelParams, config: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        Self::check_inputs(&model, &config, &data)?;
        let initial = perplexity(&model, data.valid, Execution::default())
            .map_err(|e| Error::Data(format!("validation set: {e}")))?;
        let state = TrainState {
            epoch: 0,
            current: model.store().clone(),
            average: None,
            averaged_steps: 0,
            averaging_start: None,
            best: model.store().clone(),
            best_epoch: 0,
            best_valid_perplexity: initial,
            since_best: 0,
            initial_valid_perplexity: initial,
            history: Vec::new(),
            stopped: false,
        };
        Ok(Self::assemble(model, config, data, state))
    }

    /// Continues from a saved state; `model` supplies the layout.
    pub fn resume(mut model: ModelParams, config: TrainConfig, data: TrainData<'a>, state: TrainState) -> Result<Self> {
        Self::check_inputs(&model, &config, &data)?;
        model.replace_store(state.current.clone())?;
        let layouts_match = state.best.same_layout(model.store())
            && state.average.as_ref().map_or(true, |a| a.same_layout(model.store()));
        if !layouts_match {
            return Err(Error::Config("training state does not match the model".into()));
        }
        Ok(Self::assemble(model, config, data, state))
    }

    fn check_inputs(model: &ModelParams, config: &TrainConfig, data: &TrainData<'_>) -> Result<()> {
        config.validate()?;
        if model.config().bidirectional && config.bptt < 3 {
            return Err(Error::Config("bptt must be at least 3 for bidirectional models".into()));
        }
        if data.train.is_empty() {
            return Err(Error::Data("empty training corpus".into()));
        }
        if data.valid.is_empty() {
            return Err(Error::Data("empty validation corpus".into()));
        }
        if let Some(p) = data.prior {
            if p.num_types() != model.num_types() {
                return Err(Error::dim("type prior", model.num_types(), p.num_types()));
            }
        }
        Ok(())
    }

    fn assemble(model: ModelParams, config: TrainConfig, data: TrainData<'a>, state: TrainState) -> Self {
        let bidi = model.config().bidirectional;
        let windows = data
            .train
            .iter()
            .flat_map(|s| split_windows(s, config.bptt, bidi))
            .collect();
        let frozen = vec![false; model.store().len()];
        Trainer {
            model,
            config,
            data,
            windows,
            exec: Execution::default(),
            frozen,
            state,
            started: Instant::now(),
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Excludes a parameter group from updates and weight decay.
    pub fn freeze(&mut self, name: &str) -> Result<()> {
        let id = self
            .model
            .param(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))?;
        self.frozen[id.index()] = true;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.config.epochs
    }

    /// The parameters with the best validation perplexity so far.
    pub fn best_model(&self) -> ModelParams {
        let mut m = self.model.clone();
        m.replace_store(self.state.best.clone()).expect("same layout");
        m
    }

    pub fn report(&self) -> TrainReport {
        TrainReport {
            initial_valid_perplexity: self.state.initial_valid_perplexity,
            epochs: self.state.history.clone(),
            averaging_start: self.state.averaging_start,
            best_epoch: self.state.best_epoch,
            best_valid_perplexity: self.state.best_valid_perplexity,
            stop_reason: if self.state.stopped {
                StopReason::NoImprovement
            } else {
                StopReason::MaxEpochs
            },
            wall_seconds: self.started.elapsed().as_secs_f64(),
        }
    }

    fn batch_gradient(&self, epoch: usize, batch: &[usize]) -> Result<Option<BatchResult>> {
        let model = &self.model;
        let cfg = &self.config;
        let prior = self.data.prior;
        let per_window = map_indexed(self.exec, batch, |_, &w| -> Result<_> {
            let window = &self.windows[w];
            let masks = (!cfg.dropout.is_none()).then(|| {
                let mut rng = rng::stream(cfg.seed, &[rng::label::DROPOUT, epoch as u64, w as u64]);
                sample_masks(model, window, &cfg.dropout, &mut rng)
            });
            let mut tape = Tape::new(model.store());
            let Some(obj) = sentence_objective(&mut tape, model, window, masks.as_ref(), prior, cfg)? else {
                return Ok(None);
            };
            let objective = tape.scalar(obj.loss);
            Ok(Some((tape.backward(obj.loss), objective, obj.nll, obj.scored)))
        });
        let mut total: Option<BatchResult> = None;
        for r in per_window {
            let Some((g, objective, nll, scored)) = r? else {
                continue;
            };
            match &mut total {
                None => {
                    total = Some(BatchResult {
                        grads: g,
                        objective,
                        nll,
                        scored,
                    })
                }
                Some(t) => {
                    t.grads.merge(&g);
                    t.objective += objective;
                    t.nll += nll;
                    t.scored += scored;
                }
            }
        }
        Ok(total)
    }

    fn sgd_step(&mut self, grads: &Gradients) {
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        let store = self.model.store_mut();
        for id in store.ids().collect::<Vec<_>>() {
            if self.frozen[id.index()] {
                continue;
            }
            let g = grads.get(id);
            for (w, gi) in store.get_mut(id).iter_mut().zip(g.iter()) {
                *w -= lr * (gi + wd * *w);
            }
        }
        if let Some(avg) = &mut self.state.average {
            self.state.averaged_steps += 1;
            let inv = 1.0 / self.state.averaged_steps as f64;
            let cur = self.model.store();
            for id in cur.ids() {
                for (a, c) in avg.get_mut(id).iter_mut().zip(cur.get(id)) {
                    *a += (c - *a) * inv;
                }
            }
        }
    }

    fn train_batches(&mut self, epoch: usize) -> Result<(f64, f64, f64, usize)> {
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &[rng::label::SHUFFLE, epoch as u64]));
        let (mut nll, mut objective, mut norms, mut scored, mut steps) = (0.0, 0.0, 0.0, 0, 0usize);
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let Some(mut r) = self.batch_gradient(epoch, batch)? else {
                continue;
            };
            r.grads.scale(1.0 / r.scored as f64);
            for id in self.model.store().ids() {
                if self.frozen[id.index()] {
                    r.grads.clear(id);
                }
            }
            if !r.objective.is_finite() || !r.grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {}: objective {} with {} scored tokens",
                    b + 1,
                    r.objective,
                    r.scored
                )));
            }
            norms += r.grads.clip_global_norm(self.config.grad_clip);
            self.sgd_step(&r.grads);
            if !self.model.store().is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {}: parameters overflowed",
                    b + 1
                )));
            }
            nll += r.nll;
            objective += r.objective;
            scored += r.scored;
            steps += 1;
        }
        if scored == 0 {
            return Err(Error::Data("no training window has a scored position".into()));
        }
        Ok((nll / scored as f64, objective / scored as f64, norms / steps as f64, scored))
    }

    /// One pass over the training windows followed by validation. On a
    /// numerical failure the parameters are rolled back to the start of the
    /// epoch before the error is returned.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(Error::Config("training has already finished".into()));
        }
        let epoch = self.state.epoch + 1;
        let began = Instant::now();
        let snapshot = (self.model.store().clone(), self.state.average.clone(), self.state.averaged_steps);
        let rollback = |t: &mut Self| {
            t.model.replace_store(snapshot.0.clone()).expect("same layout");
            t.state.average = snapshot.1.clone();
            t.state.averaged_steps = snapshot.2;
        };
        let (train_loss, train_objective, grad_norm, _) = match self.train_batches(epoch) {
            Ok(v) => v,
            Err(e) => {
                rollback(self);
                return Err(e);
            }
        };
        let averaging = self.state.average.is_some();
        let mut eval = self.model.clone();
        if let Some(avg) = &self.state.average {
            eval.replace_store(avg.clone())?;
        }
        let valid = perplexity(&eval, self.data.valid, self.exec)?;
        if !valid.is_finite() {
            rollback(self);
            return Err(Error::NonFinite(format!("epoch {epoch}: validation perplexity {valid}")));
        }
        let s = &mut self.state;
        if valid < s.best_valid_perplexity {
            s.best_valid_perplexity = valid;
            s.best_epoch = epoch;
            s.best = eval.store().clone();
            s.since_best = 0;
        } else {
            s.since_best += 1;
        }
        if s.since_best >= self.config.nonmono_trigger {
            if s.average.is_none() {
                s.average = Some(self.model.store().clone());
                s.averaged_steps = 1;
                s.averaging_start = Some(epoch);
                s.since_best = 0;
                log::info!("epoch {epoch}: switching to averaged SGD");
            } else {
                s.stopped = true;
            }
        }
        s.epoch = epoch;
        s.current = self.model.store().clone();
        s.history.push(EpochRecord {
            epoch,
            train_loss,
            train_objective,
            valid_perplexity: valid,
            averaging,
            grad_norm,
            seconds: began.elapsed().as_secs_f64(),
        });
        let rec = s.history.last().expect("just pushed");
        log::info!(
            "epoch {:>3}  train nll {:.4}  valid ppl {:.3}{}  ({:.1}s)",
            rec.epoch,
            rec.train_loss,
            rec.valid_perplexity,
            if rec.averaging { "  [avg]" } else { "" },
            rec.seconds
        );
        Ok(rec)
    }

    /// Trains until the epoch budget is spent or averaging stops helping,
    /// calling `on_epoch` after every epoch. Returns the best-validated
    /// parameters.
    pub fn run_with<F>(mut self, mut on_epoch: F) -> Result<(ModelParams, TrainReport)>
    where
        F: FnMut(&Trainer<'a>) -> Result<()>,
    {
        while !self.is_finished() {
            self.run_epoch()?;
            on_epoch(&self)?;
        }
        Ok((self.best_model(), self.report()))
    }

    pub fn run(self) -> Result<(ModelParams, TrainReport)> {
        self.run_with(|_| Ok(()))
    }
}

/// Trains `model` from its current parameters.
pub fn train(model: ModelParams, config: TrainConfig, data: TrainData<'_>) -> Result<(ModelParams, TrainReport)> {
    Trainer::new(model, config, data)?.run()
}

/// Mean objective per scored token over `sentences`, with fixed dropout
/// masks drawn from `config.seed`.
pub fn batch_objective(
    tape: &mut Tape<'_>,
    model: &ModelParams,
    sentences: &[EncodedSentence],
    prior: Option<&TypePrior>,
    config: &TrainConfig,
) -> Result<crate::numerics::Var> {
    let mut terms = Vec::new();
    let mut scored = 0;
    for (i, s) in sentences.iter().enumerate() {
        let masks = (!config.dropout.is_none()).then(|| {
            let mut rng = rng::stream(config.seed, &[rng::label::DROPOUT, 0, i as u64]);
            sample_masks(model, s, &config.dropout, &mut rng)
        });
        if let Some(obj) = sentence_objective(tape, model, s, masks.as_ref(), prior, config)? {
            terms.push(obj.loss);
            scored += obj.scored;
        }
    }
    let total = tape
        .add_all(&terms)
        .ok_or_else(|| Error::Data("no scored positions".into()))?;
    Ok(tape.scale(total, 1.0 / scored as f64))
}

/// Finite-difference check of the full training objective, regularizers
/// and fixed dropout masks included.
pub fn check_model_gradients(
    model: &ModelParams,
    sentences: &[EncodedSentence],
    prior: Option<&TypePrior>,
    config: &TrainConfig,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    {
        let mut tape = Tape::new(model.store());
        batch_objective(&mut tape, model, sentences, prior, config)?;
    }
    Ok(check_gradients(
        model.store(),
        |tape| batch_objective(tape, model, sentences, prior, config).expect("validated above"),
        options,
    ))
}
