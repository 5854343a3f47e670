//! Discrete write controller.
//!
//! `q = vᵀ ReLU(W_f x + W_c ce + W_m mh + b)`, `a = σ(q)`, `s = [a > thr]`.
//! The threshold backward is the identity, so `∂s/∂q = σ(q)(1 − σ(q))`.

use rand::Rng;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerParams {
    /// `[k × d]`
    pub w_feature: Tensor,
    /// `[k × H]`
    pub w_context: Tensor,
    /// `[k × D]`
    pub w_memory: Tensor,
    /// `[k]`
    pub bias: Tensor,
    /// `[k]`
    pub v: Tensor,
    pub thr: f64,
}

impl ControllerParams {
    /// `W` uniform in `±1/√(d+H+D)`, `b = 0.5`, `v` uniform in `±1/√k`.
    ///
    /// `v` is negated when its entries sum below zero. The `b` term then
    /// contributes `0.5 Σv > 0` to every logit, so training starts from a
    /// mostly-writing controller; with the opposite sign every frame is
    /// skipped and the controller receives no gradient at all.
    pub fn init<R: Rng + ?Sized>(
        width: usize,
        input_dim: usize,
        hidden: usize,
        memory_dim: usize,
        thr: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (input_dim + hidden + memory_dim) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let mut v = Tensor::uniform(&[width], 1.0 / (width as f64).sqrt(), rng);
        if v.data().iter().sum::<f64>() < 0.0 {
            v.data_mut().iter_mut().for_each(|x| *x = -*x);
        }
        Self {
            w_feature: Tensor::uniform(&[width, input_dim], bound, rng),
            w_context: Tensor::uniform(&[width, hidden], bound, rng),
            w_memory: Tensor::uniform(&[width, memory_dim], bound, rng),
            bias: Tensor::filled(&[width], 0.5),
            v,
            thr,
        }
    }

    pub fn zeros(
        width: usize,
        input_dim: usize,
        hidden: usize,
        memory_dim: usize,
        thr: f64,
    ) -> Self {
        Self {
            w_feature: Tensor::zeros(&[width, input_dim]),
            w_context: Tensor::zeros(&[width, hidden]),
            w_memory: Tensor::zeros(&[width, memory_dim]),
            bias: Tensor::zeros(&[width]),
            v: Tensor::zeros(&[width]),
            thr,
        }
    }

    pub fn width(&self) -> usize {
        self.v.len()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ControllerVars {
        ControllerVars {
            w_feature: tape.param(&self.w_feature),
            w_context: tape.param(&self.w_context),
            w_memory: tape.param(&self.w_memory),
            bias: tape.param(&self.bias),
            v: tape.param(&self.v),
            thr: self.thr,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ControllerVars {
    pub w_feature: Var,
    pub w_context: Var,
    pub w_memory: Var,
    pub bias: Var,
    pub v: Var,
    pub thr: f64,
}

/// Write logit `q` from the current feature, context embedding and memory history.
pub fn score(
    tape: &mut Tape<'_>,
    vars: &ControllerVars,
    x: Var,
    ce: Var,
    mh: Var,
) -> Result<Var, AutodiffError> {
    let zf = tape.matvec(vars.w_feature, x)?;
    let zc = tape.matvec(vars.w_context, ce)?;
    let zm = tape.matvec(vars.w_memory, mh)?;
    let z = tape.add(zf, zc)?;
    let z = tape.add(z, zm)?;
    let z = tape.add(z, vars.bias)?;
    let hidden = tape.relu(z);
    tape.dot(vars.v, hidden)
}

/// Importance `a = σ(q)` and hard decision `s = [a > thr]`.
pub fn decide(tape: &mut Tape<'_>, q: Var, thr: f64) -> Result<(Var, Var), AutodiffError> {
    let a = tape.sigmoid(q);
    let s = tape.ste_threshold(a, thr)?;
    Ok((a, s))
}
