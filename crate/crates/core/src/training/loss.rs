use super::TrainConfig;
use crate::corpus::EncodedSentence;
use crate::error::{Error, Result};
use crate::kb::TypePrior;
use crate::model::{DirectionActivations, MixtureDistribution, ModelParams, SentenceMasks};
use crate::numerics::{Tape, Var};

/// Prior entries are floored at this value inside the KL divergence.
pub const PRIOR_FLOOR: f64 = 1e-8;

/// Mean negative log-likelihood of already-computed token log-probabilities.
pub fn mean_nll(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Data("no scored tokens".into()));
    }
    if let Some(i) = log_probs.iter().position(|lp| !lp.is_finite()) {
        return Err(Error::Data(format!(
            "token {i} has log-probability {}",
            log_probs[i]
        )));
    }
    Ok(-log_probs.iter().sum::<f64>() / log_probs.len() as f64)
}

/// Mean negative log mixture probability of the gold token at each of
/// `positions`, with `dists[i]` the prediction for `positions[i]`.
pub fn sequence_loss(
    dists: &[MixtureDistribution],
    targets: &EncodedSentence,
    positions: &[usize],
) -> Result<f64> {
    if dists.len() != positions.len() {
        return Err(Error::dim("sequence_loss", positions.len(), dists.len()));
    }
    let log_probs: Vec<f64> = dists
        .iter()
        .zip(positions)
        .map(|(d, &t)| d.log_prob(targets.general_index(t), &targets.candidates[t]))
        .collect();
    mean_nll(&log_probs).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("zero-probability target: {msg}")),
        other => other,
    })
}

/// `KL(posterior || prior)` with prior entries floored at [`PRIOR_FLOOR`].
pub fn kl_divergence(posterior: &[f64], prior: &[f64]) -> f64 {
    posterior
        .iter()
        .zip(prior)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.max(PRIOR_FLOOR).ln()))
        .sum()
}

/// `λ Σ_t KL(posterior_t || prior_t)²`.
pub fn kl_prior_penalty(posteriors: &[Vec<f64>], priors: &[Vec<f64>], lambda: f64) -> f64 {
    lambda
        * posteriors
            .iter()
            .zip(priors)
            .map(|(p, q)| kl_divergence(p, q).powi(2))
            .sum::<f64>()
}

/// `ar · mean(raw²) + tar · mean((dropped_{t+1} - dropped_t)²)`, means taken
/// over every element. Returns `loss` plus the penalties.
pub fn apply_regularization(loss: f64, raw: &[Vec<f64>], dropped: &[Vec<f64>], config: &TrainConfig) -> f64 {
    let mut total = loss;
    let elements: usize = raw.iter().map(Vec::len).sum();
    if config.ar_coeff > 0.0 && elements > 0 {
        let sq: f64 = raw.iter().flatten().map(|v| v * v).sum();
        total += config.ar_coeff * sq / elements as f64;
    }
    if config.tar_coeff > 0.0 && dropped.len() > 1 {
        let mut sq = 0.0;
        let mut count = 0;
        for w in dropped.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                sq += (b - a).powi(2);
                count += 1;
            }
        }
        total += config.tar_coeff * sq / count as f64;
    }
    total
}

/// One KL² term on the tape. `log_post` covers the model's active types.
pub fn kl_prior_penalty_var(tape: &mut Tape<'_>, log_post: Var, prior: &[f64], active: &[usize]) -> Var {
    let log_prior: Vec<f64> = active.iter().map(|&j| prior[j].max(PRIOR_FLOOR).ln()).collect();
    let log_prior = tape.constant(log_prior);
    let p = tape.exp(log_post);
    let diff = tape.sub(log_post, log_prior);
    let kl = tape.dot(p, diff);
    tape.mul(kl, kl)
}

fn mean_square(tape: &mut Tape<'_>, vars: &[Var]) -> Option<Var> {
    let width = tape.size(*vars.first()?);
    let terms: Vec<Var> = vars.iter().map(|&v| tape.dot(v, v)).collect();
    let total = tape.add_all(&terms)?;
    Some(tape.scale(total, 1.0 / (vars.len() * width) as f64))
}

/// AR and TAR penalties for one direction, already weighted.
pub fn activation_penalty_var(
    tape: &mut Tape<'_>,
    acts: &DirectionActivations,
    config: &TrainConfig,
) -> Option<Var> {
    let mut terms = Vec::with_capacity(2);
    if config.ar_coeff > 0.0 {
        if let Some(ar) = mean_square(tape, &acts.raw) {
            terms.push(tape.scale(ar, config.ar_coeff));
        }
    }
    if config.tar_coeff > 0.0 && acts.dropped.len() > 1 {
        let diffs: Vec<Var> = acts
            .dropped
            .windows(2)
            .map(|w| tape.sub(w[1], w[0]))
            .collect();
        if let Some(tar) = mean_square(tape, &diffs) {
            terms.push(tape.scale(tar, config.tar_coeff));
        }
    }
    tape.add_all(&terms)
}

/// Loss of one training sequence, summed rather than averaged so that
/// sequences can be combined by adding gradients and dividing by the total
/// number of scored tokens.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    /// `Σ_t [-log P(y_t) + λ KL_t²] + scored · (AR + TAR)`.
    pub loss: Var,
    /// `Σ_t -log P(y_t)`, the part that defines perplexity.
    pub nll: f64,
    pub scored: usize,
}

/// Records the full training objective for `sentence`. The KL term is only
/// added when `prior` is given and `kl_lambda > 0`.
pub fn sentence_objective(
    tape: &mut Tape<'_>,
    model: &ModelParams,
    sentence: &EncodedSentence,
    masks: Option<&SentenceMasks>,
    prior: Option<&TypePrior>,
    config: &TrainConfig,
) -> Result<Option<Objective>> {
    let out = model.forward(tape, sentence, masks)?;
    let scored = out.positions.len();
    if scored == 0 {
        return Ok(None);
    }
    let total_lp = tape.add_all(&out.log_probs).expect("non-empty");
    let nll = -tape.scalar(total_lp);
    let mut terms = vec![tape.scale(total_lp, -1.0)];
    if let Some(prior) = prior.filter(|_| config.kl_lambda > 0.0) {
        if prior.num_types() != model.num_types() {
            return Err(Error::dim("type prior", model.num_types(), prior.num_types()));
        }
        let kls: Vec<Var> = out
            .positions
            .iter()
            .zip(&out.log_posteriors)
            .map(|(&t, &lp)| {
                let q = prior.get(&sentence.surfaces[t]);
                kl_prior_penalty_var(tape, lp, &q, model.active_types())
            })
            .collect();
        let kl = tape.add_all(&kls).expect("non-empty");
        terms.push(tape.scale(kl, config.kl_lambda));
    }
    let penalties: Vec<Var> = out
        .activations
        .iter()
        .filter_map(|acts| activation_penalty_var(tape, acts, config))
        .collect();
    if let Some(p) = tape.add_all(&penalties) {
        terms.push(tape.scale(p, scored as f64));
    }
    let loss = tape.add_all(&terms).expect("non-empty");
    Ok(Some(Objective { loss, nll, scored }))
}
