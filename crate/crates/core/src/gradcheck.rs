//! Central finite-difference checks of the model's analytic gradients.
//!
//! Two regimes are smooth and can be checked exactly: decisions pinned to
//! constants ([`check_frozen`]), and the surrogate network where every
//! decision is replaced by its importance score ([`check_surrogate`]).

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::FeatureSequence;
use crate::model::{DecisionMode, Model, ModelConfig, ModelError, PARAM_NAMES};

/// Smallest denominator used by [`rel_error`].
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckMode {
    Frozen,
    Surrogate,
}

impl fmt::Display for CheckMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckMode::Frozen => "frozen",
            CheckMode::Surrogate => "surrogate",
        })
    }
}

impl std::str::FromStr for CheckMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frozen" => Ok(CheckMode::Frozen),
            "surrogate" => Ok(CheckMode::Surrogate),
            other => Err(format!(
                "unknown check mode `{other}` (expected frozen|surrogate)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Random coordinates per parameter tensor, on top of the one with the
    /// largest analytic gradient. `None` checks every coordinate.
    pub coords: Option<usize>,
    /// Seeds the coordinate sampling.
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords: Some(16),
            seed: 0,
        }
    }
}

/// Error measure used throughout: `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
///
/// The floor keeps coordinates whose gradient is at the rounding level of a
/// central difference from dominating the report.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest |analytic| over the whole tensor.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub mode: CheckMode,
    pub sample: String,
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn param(&self, name: &str) -> Option<&ParamReport> {
        self.params.iter().find(|p| p.name == name)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# mode={} sample={} eps={:e} tol={:e}",
            self.mode, self.sample, self.eps, self.tol
        )?;
        writeln!(
            f,
            "{:<22} {:>7} {:>12} {:>8} {:>13} {:>13} status",
            "parameter", "checked", "max_rel_err", "index", "analytic", "numeric"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<22} {:>7} {:>12.3e} {:>8} {:>13.6e} {:>13.6e} {}",
                p.name,
                p.checked,
                p.max_rel_error,
                p.worst_index,
                p.analytic,
                p.numeric,
                if p.max_rel_error < self.tol {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        Ok(())
    }
}

/// Records hard decisions from a forward pass, pins them, and checks every
/// parameter against finite differences of the pinned network.
pub fn check_frozen(
    model: &Model,
    seq: &FeatureSequence,
    opts: &CheckOptions,
) -> Result<GradReport, ModelError> {
    let decisions = model.trace(seq)?.decisions();
    check_mode(
        model,
        seq,
        &DecisionMode::Frozen(decisions),
        CheckMode::Frozen,
        opts,
    )
}

/// Checks the surrogate network, where `s_t := a_t` on every frame.
pub fn check_surrogate(
    model: &Model,
    seq: &FeatureSequence,
    opts: &CheckOptions,
) -> Result<GradReport, ModelError> {
    check_mode(
        model,
        seq,
        &DecisionMode::Surrogate,
        CheckMode::Surrogate,
        opts,
    )
}

/// Checks with an explicit smooth decision mode (`Frozen` or `Surrogate`).
pub fn check_mode(
    model: &Model,
    seq: &FeatureSequence,
    mode: &DecisionMode,
    label: CheckMode,
    opts: &CheckOptions,
) -> Result<GradReport, ModelError> {
    let (_, grads) = model
        .forward_sequence(seq, mode)?
        .loss_and_gradients(seq.label)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut params = Vec::with_capacity(grads.len());

    for (p, (name, grad)) in PARAM_NAMES.iter().zip(&grads).enumerate() {
        let g = grad.data();
        let (argmax, max_abs_grad) =
            g.iter().enumerate().fold(
                (0, 0.0),
                |(bi, bv), (i, v)| {
                    if v.abs() > bv {
                        (i, v.abs())
                    } else {
                        (bi, bv)
                    }
                },
            );
        let mut indices: Vec<usize> = match opts.coords {
            Some(k) if k < g.len() => sample(&mut rng, g.len(), k).into_vec(),
            _ => (0..g.len()).collect(),
        };
        if !indices.contains(&argmax) {
            indices.push(argmax);
        }
        indices.sort_unstable();

        let mut report = ParamReport {
            name,
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: indices[0],
            analytic: g[indices[0]],
            numeric: f64::NAN,
            max_abs_grad,
        };
        let mut first = true;
        for &i in &indices {
            let numeric = central_difference(&mut probe, seq, mode, p, i, opts.eps)?;
            let err = rel_error(g[i], numeric);
            if first || err > report.max_rel_error {
                first = false;
                report.max_rel_error = err;
                report.worst_index = i;
                report.analytic = g[i];
                report.numeric = numeric;
            }
        }
        params.push(report);
    }

    Ok(GradReport {
        mode: label,
        sample: seq.id.clone(),
        eps: opts.eps,
        tol: opts.tol,
        params,
    })
}

/// `(L(θ + ε e_i) − L(θ − ε e_i)) / 2ε` for coordinate `i` of parameter `p`.
/// `probe` is restored before returning.
pub fn central_difference(
    probe: &mut Model,
    seq: &FeatureSequence,
    mode: &DecisionMode,
    p: usize,
    i: usize,
    eps: f64,
) -> Result<f64, ModelError> {
    let orig = probe.params.tensors()[p].data()[i];
    probe.params.tensors_mut()[p].data_mut()[i] = orig + eps;
    let plus = probe.loss(seq, mode);
    probe.params.tensors_mut()[p].data_mut()[i] = orig - eps;
    let minus = probe.loss(seq, mode);
    probe.params.tensors_mut()[p].data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

/// A model and a standard-normal sequence of `frames` frames, both derived
/// from `seed`.
pub fn suite_case(
    config: &ModelConfig,
    frames: usize,
    seed: u64,
) -> Result<(Model, FeatureSequence), ModelError> {
    let model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_da7a);
    let features = (0..frames * config.input_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let label = (seed as usize) % config.classes;
    let seq = FeatureSequence::new(
        format!("gc-{seed:03}"),
        frames,
        config.input_dim,
        features,
        label,
    )
    .map_err(|e| ModelError::Config(e.to_string()))?;
    Ok((model, seq))
}

/// Runs one check per seed.
pub fn run_suite(
    config: &ModelConfig,
    frames: usize,
    seeds: &[u64],
    mode: CheckMode,
    opts: &CheckOptions,
) -> Result<Vec<GradReport>, ModelError> {
    seeds
        .iter()
        .map(|&seed| {
            let (model, seq) = suite_case(config, frames, seed)?;
            let opts = CheckOptions {
                seed,
                ..opts.clone()
            };
            match mode {
                CheckMode::Frozen => check_frozen(&model, &seq, &opts),
                CheckMode::Surrogate => check_surrogate(&model, &seq, &opts),
            }
        })
        .collect()
}
