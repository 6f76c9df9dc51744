//! Differentiable primitives: tensors, a parameter store, the gradient tape,
//! the LSTM cell and finite-difference gradient checking.

pub mod gradcheck;
pub mod lstm;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, compare_gradients, GradCheckOptions, GradCheckReport, GroupReport};
pub use lstm::{lstm_step, lstm_step_on_tape, LstmWeights};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{log_softmax, log_sum_exp, softmax_logits, Tensor};
