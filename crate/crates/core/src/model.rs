//! Full per-sequence forward pass, classification head and score fusion.
//!
//! At each frame `t`:
//!
//! 1. `mh_t` is read from the memory as it stood after frame `t − 1`
//! 2. the LSTM produces `(ĥ_t, ĉ_t)` and `ce_t = ĥ_t`
//! 3. the controller turns `(x_t, ce_t, mh_t)` into `a_t` and `s_t`
//! 4. `W_w x_t` is appended to memory when `s_t = 1`
//! 5. the carried LSTM state becomes `(s_t ĥ_t, s_t ĉ_t)`
//!
//! After the last frame the memory items are averaged and fed to an affine
//! classifier. If nothing was written, the configured [`Fallback`] decides
//! what gets pooled.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::controller::{self, ControllerParams, DEFAULT_THRESHOLD};
use crate::data::FeatureSequence;
use crate::lstm::{self, LstmParams, LstmState};
use crate::memory::{init_write_projection, MemoryError, MemoryModule};

pub use crate::memory::HistoryMode;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("sequence has no frames")]
    EmptySequence,
    #[error("feature dimension {got} does not match model input dimension {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("{got} pinned decisions supplied for a sequence of {expected} frames")]
    DecisionCount { expected: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("score fusion: {0}")]
    Fusion(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Behaviour when no frame was written by the end of a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fallback {
    /// Write the last frame unconditionally (no gradient to the controller).
    #[default]
    ForceLast,
    /// Classify the mean of `W_w x_t` over all frames.
    FeatureMean,
}

impl fmt::Display for Fallback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fallback::ForceLast => "force-last",
            Fallback::FeatureMean => "feature-mean",
        })
    }
}

impl FromStr for Fallback {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "force-last" => Ok(Fallback::ForceLast),
            "feature-mean" => Ok(Fallback::FeatureMean),
            other => Err(format!(
                "unknown fallback `{other}` (expected force-last|feature-mean)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub memory_dim: usize,
    pub controller_width: usize,
    pub classes: usize,
    pub thr: f64,
    pub history: HistoryMode,
    pub fallback: Fallback,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: 128,
            memory_dim: 256,
            controller_width: 64,
            classes: 5,
            thr: DEFAULT_THRESHOLD,
            history: HistoryMode::Mean,
            fallback: Fallback::ForceLast,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("memory_dim", self.memory_dim),
            ("controller_width", self.controller_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.classes < 2 {
            return Err(ModelError::Config("classes must be at least 2".into()));
        }
        if !(self.thr > 0.0 && self.thr < 1.0) {
            return Err(ModelError::Config(format!(
                "thr {} must lie strictly between 0 and 1",
                self.thr
            )));
        }
        Ok(())
    }
}

/// Affine head over the pooled memory: `logits = W rep + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `[C × D]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(classes: usize, input: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(&[classes, input], 1.0 / (input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[classes]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub lstm: LstmParams,
    pub write_projection: Tensor,
    pub controller: ControllerParams,
    pub classifier: ClassifierParams,
}

/// Parameter tensor names in the canonical order used by gradients,
/// optimizer state and checkpoints.
pub const PARAM_NAMES: [&str; 11] = [
    "lstm.w_input",
    "lstm.w_hidden",
    "lstm.bias",
    "memory.w_write",
    "controller.w_feature",
    "controller.w_context",
    "controller.w_memory",
    "controller.bias",
    "controller.v",
    "classifier.weight",
    "classifier.bias",
];

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let lstm = LstmParams::init(cfg.input_dim, cfg.hidden, rng);
        let write_projection = init_write_projection(cfg.memory_dim, cfg.input_dim, rng);
        let controller = ControllerParams::init(
            cfg.controller_width,
            cfg.input_dim,
            cfg.hidden,
            cfg.memory_dim,
            cfg.thr,
            rng,
        );
        let classifier = ClassifierParams::init(cfg.classes, cfg.memory_dim, rng);
        Self {
            lstm,
            write_projection,
            controller,
            classifier,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.lstm.w_input,
            &self.lstm.w_hidden,
            &self.lstm.bias,
            &self.write_projection,
            &self.controller.w_feature,
            &self.controller.w_context,
            &self.controller.w_memory,
            &self.controller.bias,
            &self.controller.v,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.lstm.w_input,
            &mut self.lstm.w_hidden,
            &mut self.lstm.bias,
            &mut self.write_projection,
            &mut self.controller.w_feature,
            &mut self.controller.w_context,
            &mut self.controller.w_memory,
            &mut self.controller.bias,
            &mut self.controller.v,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }
}

/// How the write decision `s_t` is produced during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum DecisionMode {
    /// Hard threshold forward, straight-through backward.
    #[default]
    Hard,
    /// Decisions pinned to recorded values; no gradient reaches the controller.
    Frozen(Vec<bool>),
    /// `s_t := a_t` everywhere and every frame is written scaled by `a_t`.
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameDecision {
    /// 1-based frame index.
    pub t: usize,
    pub a: f64,
    pub s: bool,
}

/// Per-frame controller output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTrace {
    pub seq_id: String,
    pub frames: Vec<FrameDecision>,
    pub predicted: usize,
    pub label: usize,
}

impl DecisionTrace {
    pub fn writes(&self) -> usize {
        self.frames.iter().filter(|f| f.s).count()
    }

    /// Fraction of frames written, `Σ s_t / T`.
    pub fn write_rate(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.writes() as f64 / self.frames.len() as f64
    }

    pub fn decisions(&self) -> Vec<bool> {
        self.frames.iter().map(|f| f.s).collect()
    }

    /// Writes the line format: a `# pred=<c> label=<c>` header, then one
    /// `seq_id t a s` row per frame.
    pub fn write_lines<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# pred={} label={}", self.predicted, self.label)?;
        for f in &self.frames {
            writeln!(out, "{} {} {:.6} {}", self.seq_id, f.t, f.a, u8::from(f.s))?;
        }
        Ok(())
    }

    pub fn read_lines<R: BufRead>(input: R) -> Result<Self, String> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or("empty trace")?
            .map_err(|e| e.to_string())?;
        let rest = header
            .strip_prefix("# ")
            .ok_or_else(|| format!("bad trace header `{header}`"))?;
        let mut predicted = None;
        let mut label = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("pred", v)) => predicted = v.parse().ok(),
                Some(("label", v)) => label = v.parse().ok(),
                _ => return Err(format!("bad trace header field `{field}`")),
            }
        }
        let (Some(predicted), Some(label)) = (predicted, label) else {
            return Err(format!("bad trace header `{header}`"));
        };
        let mut seq_id = String::new();
        let mut frames = Vec::new();
        for line in lines {
            let line = line.map_err(|e| e.to_string())?;
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [id, t, a, s] = cols[..] else {
                return Err(format!("bad trace row `{line}`"));
            };
            seq_id = id.to_string();
            let bad = |_| format!("bad trace row `{line}`");
            frames.push(FrameDecision {
                t: t.parse().map_err(|_| format!("bad trace row `{line}`"))?,
                a: a.parse().map_err(bad)?,
                s: match s {
                    "0" => false,
                    "1" => true,
                    _ => return Err(format!("bad trace row `{line}`")),
                },
            });
        }
        Ok(Self {
            seq_id,
            frames,
            predicted,
            label,
        })
    }
}

/// A recorded forward pass. The tape can be differentiated through
/// [`Forward::loss_and_gradients`].
pub struct Forward<'a> {
    pub tape: Tape<'a>,
    pub logits: Var,
    pub trace: DecisionTrace,
    /// Decision node `s_t` per frame.
    pub decisions: Vec<Var>,
    /// Logit node `q_t` per frame.
    pub scores: Vec<Var>,
    /// Context embedding `ce_t = ĥ_t` per frame.
    pub contexts: Vec<Var>,
    /// Memory history `mh_t` per frame.
    pub histories: Vec<Var>,
    /// Pooled memory fed to the classifier.
    pub representation: Var,
    /// Memory length before any fallback.
    pub written: usize,
    pub fallback_used: bool,
    params: Vec<Var>,
}

impl Forward<'_> {
    pub fn logit_values(&self) -> Vec<f64> {
        self.tape.value(self.logits).data().to_vec()
    }

    /// Cross-entropy loss and the gradient of every parameter, in
    /// [`PARAM_NAMES`] order.
    pub fn loss_and_gradients(mut self, label: usize) -> Result<(f64, Vec<Tensor>), ModelError> {
        let loss = self.tape.softmax_cross_entropy(self.logits, label)?;
        let value = self.tape.scalar(loss);
        self.tape.backward(loss)?;
        let grads = self
            .params
            .iter()
            .map(|&p| self.tape.take_grad(p))
            .collect();
        Ok((value, grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn forward_sequence(
        &self,
        seq: &FeatureSequence,
        mode: &DecisionMode,
    ) -> Result<Forward<'_>, ModelError> {
        let cfg = &self.config;
        let frames = seq.len();
        if frames == 0 {
            return Err(ModelError::EmptySequence);
        }
        if seq.dim() != cfg.input_dim {
            return Err(ModelError::FeatureDim {
                expected: cfg.input_dim,
                got: seq.dim(),
            });
        }
        if let DecisionMode::Frozen(pinned) = mode {
            if pinned.len() != frames {
                return Err(ModelError::DecisionCount {
                    expected: frames,
                    got: pinned.len(),
                });
            }
        }

        let p = &self.params;
        let mut tape = Tape::new();
        let lstm_vars = p.lstm.bind(&mut tape);
        let w_write = tape.param(&p.write_projection);
        let ctrl = p.controller.bind(&mut tape);
        let w_out = tape.param(&p.classifier.weight);
        let b_out = tape.param(&p.classifier.bias);
        let params = vec![
            lstm_vars.w_input,
            lstm_vars.w_hidden,
            lstm_vars.bias,
            w_write,
            ctrl.w_feature,
            ctrl.w_context,
            ctrl.w_memory,
            ctrl.bias,
            ctrl.v,
            w_out,
            b_out,
        ];

        let mut memory = MemoryModule::new(&tape, w_write, cfg.history);
        let mut state = LstmState::zeros(&mut tape, cfg.hidden);
        let mut inputs = Vec::with_capacity(frames);
        let mut decisions = Vec::with_capacity(frames);
        let mut scores = Vec::with_capacity(frames);
        let mut contexts = Vec::with_capacity(frames);
        let mut histories = Vec::with_capacity(frames);
        let mut trace_frames = Vec::with_capacity(frames);

        for t in 0..frames {
            let x = tape.constant(Tensor::vector(seq.frame(t).to_vec()));
            inputs.push(x);
            let mh = memory.read_history(&mut tape)?;
            let (h_hat, c_hat) = lstm::lstm_step(&mut tape, &lstm_vars, x, &state)?;
            let q = controller::score(&mut tape, &ctrl, x, h_hat, mh)?;
            let (a, s) = match mode {
                DecisionMode::Hard => controller::decide(&mut tape, q, ctrl.thr)?,
                DecisionMode::Frozen(pinned) => {
                    let a = tape.sigmoid(q);
                    let s = tape.constant(Tensor::scalar(if pinned[t] { 1.0 } else { 0.0 }));
                    (a, s)
                }
                DecisionMode::Surrogate => {
                    let a = tape.sigmoid(q);
                    (a, a)
                }
            };
            match mode {
                DecisionMode::Surrogate => memory.write_scaled(&mut tape, x, s)?,
                _ => {
                    memory.write(&mut tape, x, s)?;
                }
            }
            state = lstm::apply_reset(&mut tape, h_hat, c_hat, s)?;

            let a_value = tape.scalar(a);
            let hard = match mode {
                DecisionMode::Surrogate => a_value > ctrl.thr,
                _ => tape.scalar(s) == 1.0,
            };
            trace_frames.push(FrameDecision {
                t: t + 1,
                a: a_value,
                s: hard,
            });
            decisions.push(s);
            scores.push(q);
            contexts.push(h_hat);
            histories.push(mh);
        }

        let written = memory.len();
        let fallback_used = memory.is_empty();
        let representation = if fallback_used {
            match cfg.fallback {
                Fallback::ForceLast => {
                    memory.write_forced(&mut tape, inputs[frames - 1])?;
                    memory.final_pool(&mut tape)?
                }
                Fallback::FeatureMean => {
                    let projected = inputs
                        .iter()
                        .map(|&x| tape.matvec(w_write, x))
                        .collect::<Result<Vec<_>, _>>()?;
                    tape.mean_pool(&projected)?
                }
            }
        } else {
            memory.final_pool(&mut tape)?
        };
        let logits = tape.matvec(w_out, representation)?;
        let logits = tape.add(logits, b_out)?;

        let predicted = predict(tape.value(logits).data());
        let trace = DecisionTrace {
            seq_id: seq.id.clone(),
            frames: trace_frames,
            predicted,
            label: seq.label,
        };
        Ok(Forward {
            tape,
            logits,
            trace,
            decisions,
            scores,
            contexts,
            histories,
            representation,
            written,
            fallback_used,
            params,
        })
    }

    /// Loss of a sequence under a decision mode, without differentiating.
    pub fn loss(&self, seq: &FeatureSequence, mode: &DecisionMode) -> Result<f64, ModelError> {
        let fwd = self.forward_sequence(seq, mode)?;
        Ok(loss(&fwd.logit_values(), seq.label)?)
    }

    pub fn trace(&self, seq: &FeatureSequence) -> Result<DecisionTrace, ModelError> {
        Ok(self.forward_sequence(seq, &DecisionMode::Hard)?.trace)
    }
}

/// Outcome of running a model on one sequence without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub write_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradients {
    pub loss: f64,
    pub inference: Inference,
    /// One tensor per parameter, in the model's canonical order.
    pub grads: Vec<Tensor>,
}

/// Anything the trainer can fit: a fixed list of parameter tensors and a
/// per-sample loss gradient.
pub trait SequenceModel: Sync {
    fn param_names(&self) -> &'static [&'static str];
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn sample_gradients(&self, seq: &FeatureSequence) -> Result<SampleGradients, ModelError>;
    fn infer(&self, seq: &FeatureSequence) -> Result<Inference, ModelError>;
}

impl SequenceModel for Model {
    fn param_names(&self) -> &'static [&'static str] {
        &PARAM_NAMES
    }

    fn params(&self) -> Vec<&Tensor> {
        self.params.tensors()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.tensors_mut()
    }

    fn sample_gradients(&self, seq: &FeatureSequence) -> Result<SampleGradients, ModelError> {
        let fwd = self.forward_sequence(seq, &DecisionMode::Hard)?;
        let inference = Inference {
            logits: fwd.logit_values(),
            predicted: fwd.trace.predicted,
            write_rate: fwd.trace.write_rate(),
        };
        let (loss, grads) = fwd.loss_and_gradients(seq.label)?;
        Ok(SampleGradients {
            loss,
            inference,
            grads,
        })
    }

    fn infer(&self, seq: &FeatureSequence) -> Result<Inference, ModelError> {
        let fwd = self.forward_sequence(seq, &DecisionMode::Hard)?;
        Ok(Inference {
            logits: fwd.logit_values(),
            predicted: fwd.trace.predicted,
            write_rate: fwd.trace.write_rate(),
        })
    }
}

/// Cross-entropy of `logits` against `label`.
pub fn loss(logits: &[f64], label: usize) -> Result<f64, AutodiffError> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::vector(logits.to_vec()));
    let loss = tape.softmax_cross_entropy(l, label)?;
    Ok(tape.scalar(loss))
}

/// Argmax with ties resolved to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Elementwise mean of per-stream class probability vectors.
pub fn fuse_scores(streams: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
    if streams.len() < 2 {
        return Err(ModelError::Fusion(format!(
            "need at least two streams, got {}",
            streams.len()
        )));
    }
    let classes = streams[0].len();
    for (i, s) in streams.iter().enumerate() {
        if s.len() != classes {
            return Err(ModelError::Fusion(format!(
                "stream {i} has {} classes, stream 0 has {classes}",
                s.len()
            )));
        }
        let total: f64 = s.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(ModelError::Fusion(format!(
                "stream {i} sums to {total}, not 1"
            )));
        }
    }
    let n = streams.len() as f64;
    Ok((0..classes)
        .map(|c| streams.iter().map(|s| s[c]).sum::<f64>() / n)
        .collect())
}
