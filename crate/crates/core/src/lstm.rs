//! LSTM cell with a segmental reset gated by the write decision.
//!
//! Packed gate layout in every matrix and in the bias is `[i, f, g, o]`,
//! each block `H` rows tall.

use rand::Rng;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `[4H × d]`
    pub w_input: Tensor,
    /// `[4H × H]`
    pub w_hidden: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

impl LstmParams {
    /// Uniform `[-1/√H, 1/√H]` weights, zero biases except the forget gate at `+1`.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = Tensor::uniform(&[4 * hidden, input_dim], bound, rng);
        let w_hidden = Tensor::uniform(&[4 * hidden, hidden], bound, rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[4 * hidden, input_dim]),
            w_hidden: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.shape()[1]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> LstmVars {
        LstmVars {
            w_input: tape.param(&self.w_input),
            w_hidden: tape.param(&self.w_hidden),
            bias: tape.param(&self.bias),
            hidden: self.hidden(),
        }
    }
}

/// Tape handles for [`LstmParams`].
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    hidden: usize,
}

impl LstmVars {
    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Hidden and cell vectors carried between frames.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape<'_>, hidden: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[hidden])),
            c: tape.constant(Tensor::zeros(&[hidden])),
        }
    }
}

/// One LSTM update; returns the candidate `(ĥ, ĉ)` before the reset.
pub fn lstm_step(
    tape: &mut Tape<'_>,
    vars: &LstmVars,
    x: Var,
    prev: &LstmState,
) -> Result<(Var, Var), AutodiffError> {
    let h = vars.hidden;
    let zx = tape.matvec(vars.w_input, x)?;
    let zh = tape.matvec(vars.w_hidden, prev.h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, vars.bias)?;

    let zi = tape.slice(z, 0, h)?;
    let zf = tape.slice(z, h, h)?;
    let zg = tape.slice(z, 2 * h, h)?;
    let zo = tape.slice(z, 3 * h, h)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);

    let keep = tape.mul(f, prev.c)?;
    let write = tape.mul(i, g)?;
    let c_hat = tape.add(keep, write)?;
    let squashed = tape.tanh(c_hat);
    let h_hat = tape.mul(o, squashed)?;
    Ok((h_hat, c_hat))
}

/// `h = s·ĥ`, `c = s·ĉ`. A zero decision starts a fresh segment.
pub fn apply_reset(
    tape: &mut Tape<'_>,
    h_hat: Var,
    c_hat: Var,
    s: Var,
) -> Result<LstmState, AutodiffError> {
    Ok(LstmState {
        h: tape.scale(h_hat, s)?,
        c: tape.scale(c_hat, s)?,
    })
}
