//! Loss assembly, AWD-LSTM style regularization and the averaged-SGD
//! training loop.

mod config;
mod dropout;
mod loss;
mod trainer;

pub use config::{DropoutRates, TrainConfig, TRAIN_KEYS};
pub use dropout::{bernoulli_mask, sample_masks};
pub use loss::{
    activation_penalty_var, apply_regularization, kl_divergence, kl_prior_penalty,
    kl_prior_penalty_var, mean_nll, sentence_objective, sequence_loss, Objective, PRIOR_FLOOR,
};
pub use trainer::{
    batch_objective, check_model_gradients, split_windows, train, EpochRecord, StopReason,
    TrainData, TrainReport, TrainState, Trainer,
};
