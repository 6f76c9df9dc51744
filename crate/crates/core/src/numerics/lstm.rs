use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameters of one LSTM layer. Gates are packed as `[input, forget,
/// candidate, output]` blocks of `hidden` rows each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmWeights {
    pub input_weights: ParamId,
    pub recurrent_weights: ParamId,
    pub bias: ParamId,
    pub input_width: usize,
    pub hidden_width: usize,
}

impl LstmWeights {
    pub fn register(store: &mut ParamStore, prefix: &str, input_width: usize, hidden_width: usize) -> Self {
        LstmWeights {
            input_weights: store.add(format!("{prefix}.w_ih"), 4 * hidden_width, input_width),
            recurrent_weights: store.add(format!("{prefix}.w_hh"), 4 * hidden_width, hidden_width),
            bias: store.add(format!("{prefix}.bias"), 4 * hidden_width, 1),
            input_width,
            hidden_width,
        }
    }
}

/// One LSTM step recorded on `tape`.
///
/// `recurrent` overrides the stored recurrent matrix, which is how weight
/// dropout substitutes a masked copy.
pub fn lstm_step_on_tape(
    tape: &mut Tape<'_>,
    weights: &LstmWeights,
    recurrent: Option<Var>,
    prev_hidden: Var,
    prev_cell: Var,
    input: Var,
) -> (Var, Var) {
    let h = weights.hidden_width;
    debug_assert_eq!(tape.size(input), weights.input_width);
    debug_assert_eq!(tape.size(prev_hidden), h);
    let w_ih = tape.param(weights.input_weights);
    let w_hh = recurrent.unwrap_or_else(|| tape.param(weights.recurrent_weights));
    let b = tape.param(weights.bias);
    let from_input = tape.matvec(w_ih, input);
    let from_hidden = tape.matvec(w_hh, prev_hidden);
    let pre = tape.add(from_input, from_hidden);
    let pre = tape.add(pre, b);

    let i_pre = tape.slice(pre, 0..h);
    let f_pre = tape.slice(pre, h..2 * h);
    let g_pre = tape.slice(pre, 2 * h..3 * h);
    let o_pre = tape.slice(pre, 3 * h..4 * h);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let kept = tape.mul(f, prev_cell);
    let written = tape.mul(i, g);
    let cell = tape.add(kept, written);
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(o, squashed);
    (hidden, cell)
}

/// Standalone LSTM step over tensors, checking every width.
pub fn lstm_step(
    store: &ParamStore,
    weights: &LstmWeights,
    prev_hidden: &Tensor,
    prev_cell: &Tensor,
    input: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let h = weights.hidden_width;
    if prev_hidden.len() != h {
        return Err(Error::dim("lstm_step hidden", h, prev_hidden.len()));
    }
    if prev_cell.len() != h {
        return Err(Error::dim("lstm_step cell", h, prev_cell.len()));
    }
    if input.len() != weights.input_width {
        return Err(Error::dim("lstm_step input", weights.input_width, input.len()));
    }
    if store.shape(weights.input_weights) != (4 * h, weights.input_width)
        || store.shape(weights.recurrent_weights) != (4 * h, h)
        || store.shape(weights.bias) != (4 * h, 1)
    {
        return Err(Error::Config("lstm weights do not match the declared widths".into()));
    }
    let mut tape = Tape::new(store);
    let hv = tape.constant(prev_hidden.data().to_vec());
    let cv = tape.constant(prev_cell.data().to_vec());
    let xv = tape.constant(input.data().to_vec());
    let (hn, cn) = lstm_step_on_tape(&mut tape, weights, None, hv, cv, xv);
    Ok((
        Tensor::vector(tape.value(hn).to_vec())?,
        Tensor::vector(tape.value(cn).to_vec())?,
    ))
}
