//! Mini-batch SGD with classical momentum, global-norm gradient clipping and
//! stepwise learning-rate decay.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::FeatureSequence;
use crate::model::{ModelError, SampleGradients, SequenceModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sample {sample}: {source}")]
    Sample {
        sample: String,
        #[source]
        source: ModelError,
    },
    #[error("parameter {index}: shape {param:?} does not match gradient {grad:?}")]
    Shape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("{params} parameters but {grads} gradients")]
    Count { params: usize, grads: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
}

/// Whether a schedule counts epochs or optimizer iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScheduleUnit {
    #[default]
    Epoch,
    Iteration,
}

impl fmt::Display for ScheduleUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleUnit::Epoch => "epoch",
            ScheduleUnit::Iteration => "iteration",
        })
    }
}

impl FromStr for ScheduleUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "epoch" => Ok(ScheduleUnit::Epoch),
            "iteration" => Ok(ScheduleUnit::Iteration),
            other => Err(format!(
                "unknown schedule unit `{other}` (expected epoch|iteration)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// `base · factor^⌊step / interval⌋`; an interval of 0 disables decay.
    Step {
        base: f64,
        interval: u64,
        factor: f64,
        unit: ScheduleUnit,
    },
    /// `base · factor^k` where `k` counts the milestones already reached.
    Milestones {
        base: f64,
        milestones: Vec<u64>,
        factor: f64,
        unit: ScheduleUnit,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Step {
            base: 1e-3,
            interval: 20,
            factor: 0.1,
            unit: ScheduleUnit::Epoch,
        }
    }
}

impl LrSchedule {
    /// Spatial-stream preset: 0.001, divided by 10 every 6000 iterations.
    pub fn spatial_stream() -> Self {
        LrSchedule::Step {
            base: 1e-3,
            interval: 6000,
            factor: 0.1,
            unit: ScheduleUnit::Iteration,
        }
    }

    /// Temporal-stream preset: 0.005, divided by 10 at 48k and 72k iterations.
    pub fn temporal_stream() -> Self {
        LrSchedule::Milestones {
            base: 5e-3,
            milestones: vec![48_000, 72_000],
            factor: 0.1,
            unit: ScheduleUnit::Iteration,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::default()),
            "spatial" => Some(Self::spatial_stream()),
            "temporal" => Some(Self::temporal_stream()),
            _ => None,
        }
    }

    pub fn unit(&self) -> ScheduleUnit {
        match self {
            LrSchedule::Step { unit, .. } | LrSchedule::Milestones { unit, .. } => *unit,
        }
    }

    pub fn base(&self) -> f64 {
        match self {
            LrSchedule::Step { base, .. } | LrSchedule::Milestones { base, .. } => *base,
        }
    }

    /// Learning rate after `step` units of the schedule's clock.
    pub fn lr_schedule(&self, step: u64) -> f64 {
        match self {
            LrSchedule::Step {
                base,
                interval,
                factor,
                ..
            } => {
                if *interval == 0 {
                    return *base;
                }
                base * factor.powi((step / interval) as i32)
            }
            LrSchedule::Milestones {
                base,
                milestones,
                factor,
                ..
            } => {
                let reached = milestones.iter().filter(|m| step >= **m).count();
                base * factor.powi(reached as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub clip: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Worker threads for per-sample gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            momentum: 0.9,
            clip: 20.0,
            schedule: LrSchedule::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        // Negated comparisons also reject NaN.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.clip > 0.0) {
            return Err(TrainError::Config(format!(
                "clip {} must be positive",
                self.clip
            )));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.schedule.base() >= 0.0) {
            return Err(TrainError::Config("learning rate must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Velocity buffers and step counter for momentum SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Tensor>,
    pub momentum: f64,
    pub lr: f64,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &[&Tensor], momentum: f64, lr: f64) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
            lr,
            step: 0,
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// `v ← μ v + g`, `θ ← θ − lr · v`.
pub fn sgd_step(
    params: Vec<&mut Tensor>,
    grads: &[Tensor],
    opt: &mut OptimState,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != opt.velocity.len() {
        return Err(TrainError::Count {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (index, ((p, g), v)) in params
        .into_iter()
        .zip(grads)
        .zip(opt.velocity.iter_mut())
        .enumerate()
    {
        if p.shape() != g.shape() || v.shape() != g.shape() {
            return Err(TrainError::Shape {
                index,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = opt.momentum * *vi + gi;
            *pi -= opt.lr * *vi;
        }
    }
    opt.step += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub write_rate: f64,
    pub lr: f64,
    /// Predicted class per sample, in dataset order.
    pub predictions: Vec<usize>,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6} {:.6} {:.6e}",
            self.epoch, self.loss, self.accuracy, self.write_rate, self.lr
        )
    }
}

fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

fn per_sample<M: SequenceModel>(
    model: &M,
    data: &[FeatureSequence],
    batch: &[usize],
    pool: Option<&ThreadPool>,
) -> Result<Vec<SampleGradients>, TrainError> {
    let run = |&i: &usize| {
        model
            .sample_gradients(&data[i])
            .map_err(|source| TrainError::Sample {
                sample: data[i].id.clone(),
                source,
            })
    };
    match pool {
        Some(pool) => pool.install(|| batch.par_iter().map(run).collect()),
        None => batch.iter().map(run).collect(),
    }
}

/// One pass over `data` in a seed-determined order.
///
/// Per batch, sample gradients are summed in batch order, averaged, clipped
/// to `config.clip` and applied with [`sgd_step`]. `epoch` is 0-based.
pub fn train_epoch<M: SequenceModel>(
    model: &mut M,
    data: &[FeatureSequence],
    opt: &mut OptimState,
    config: &TrainConfig,
    epoch: u64,
    pool: Option<&ThreadPool>,
) -> Result<EpochMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    config.validate()?;
    let order = epoch_order(data.len(), config.seed, epoch);
    let mut predictions = vec![0usize; data.len()];
    let mut loss_total = 0.0;
    let mut write_total = 0.0;
    let mut correct = 0usize;
    let mut first_lr = None;

    for batch in order.chunks(config.batch_size) {
        opt.lr = match config.schedule.unit() {
            ScheduleUnit::Epoch => config.schedule.lr_schedule(epoch),
            ScheduleUnit::Iteration => config.schedule.lr_schedule(opt.step),
        };
        first_lr.get_or_insert(opt.lr);

        let results = per_sample(&*model, data, batch, pool)?;
        let mut grads: Option<Vec<Tensor>> = None;
        for (r, &i) in results.into_iter().zip(batch) {
            loss_total += r.loss;
            write_total += r.inference.write_rate;
            predictions[i] = r.inference.predicted;
            if r.inference.predicted == data[i].label {
                correct += 1;
            }
            match grads.as_mut() {
                None => grads = Some(r.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&r.grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f64;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        clip_gradients(&mut grads, config.clip);
        sgd_step(model.params_mut(), &grads, opt)?;
    }

    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch: epoch + 1,
        loss: loss_total / n,
        accuracy: correct as f64 / n,
        write_rate: write_total / n,
        lr: first_lr.unwrap_or(opt.lr),
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub write_rate: f64,
    pub predictions: Vec<usize>,
    /// Softmax class probabilities per sample.
    pub probabilities: Vec<Vec<f64>>,
}

pub fn evaluate<M: SequenceModel>(
    model: &M,
    data: &[FeatureSequence],
    pool: Option<&ThreadPool>,
) -> Result<EvalMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let run = |s: &FeatureSequence| {
        model.infer(s).map_err(|source| TrainError::Sample {
            sample: s.id.clone(),
            source,
        })
    };
    let results: Vec<_> = match pool {
        Some(pool) => pool.install(|| data.par_iter().map(run).collect::<Result<_, _>>())?,
        None => data.iter().map(run).collect::<Result<_, _>>()?,
    };
    let n = data.len() as f64;
    let correct = results
        .iter()
        .zip(data)
        .filter(|(r, s)| r.predicted == s.label)
        .count();
    Ok(EvalMetrics {
        accuracy: correct as f64 / n,
        write_rate: results.iter().map(|r| r.write_rate).sum::<f64>() / n,
        predictions: results.iter().map(|r| r.predicted).collect(),
        probabilities: results
            .iter()
            .map(|r| crate::autodiff::softmax(&r.logits))
            .collect(),
    })
}

/// Owns the optimizer state and worker pool across epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub opt: OptimState,
    pub epochs_done: u64,
    pool: Option<ThreadPool>,
}

impl Trainer {
    pub fn new<M: SequenceModel>(model: &M, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let opt = OptimState::new(&model.params(), config.momentum, config.schedule.base());
        Self::resume(config, opt, 0)
    }

    /// Continues from saved optimizer state.
    pub fn resume(
        config: TrainConfig,
        opt: OptimState,
        epochs_done: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| TrainError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            config,
            opt,
            epochs_done,
            pool,
        })
    }

    pub fn train_epoch<M: SequenceModel>(
        &mut self,
        model: &mut M,
        data: &[FeatureSequence],
    ) -> Result<EpochMetrics, TrainError> {
        let metrics = train_epoch(
            model,
            data,
            &mut self.opt,
            &self.config,
            self.epochs_done,
            self.pool.as_ref(),
        )?;
        self.epochs_done += 1;
        Ok(metrics)
    }

    pub fn evaluate<M: SequenceModel>(
        &self,
        model: &M,
        data: &[FeatureSequence],
    ) -> Result<EvalMetrics, TrainError> {
        evaluate(model, data, self.pool.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::model::{Model, ModelConfig};

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Tensor::vector(vec![30.0, 40.0])];
        let norm = clip_gradients(&mut g, 20.0);
        assert_eq!(norm, 50.0);
        assert_eq!(g[0].data(), &[12.0, 16.0]);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let orig = vec![Tensor::vector(vec![0.3, -0.1]), Tensor::scalar(0.7)];
        let mut g = orig.clone();
        clip_gradients(&mut g, 20.0);
        assert_eq!(g, orig);
    }

    #[test]
    fn clip_spans_all_tensors() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        clip_gradients(&mut g, 1.0);
        assert!((g[0].item() - 0.6).abs() < 1e-15);
        assert!((g[1].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_keeps_direction_and_bounds_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let orig: Vec<Tensor> = (1..4)
                .map(|n| {
                    Tensor::vector((0..n * 5).map(|_| rng.random_range(-30.0..30.0)).collect())
                })
                .collect();
            let mut g = orig.clone();
            let max = rng.random_range(0.5..20.0);
            let pre = clip_gradients(&mut g, max);
            let post = global_norm(&g);
            assert!(post <= max + 1e-9);
            if pre > max {
                let flat = |ts: &[Tensor]| {
                    ts.iter()
                        .flat_map(|t| t.data().to_vec())
                        .collect::<Vec<f64>>()
                };
                let (a, b) = (flat(&orig), flat(&g));
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                let cos = dot / (pre * post);
                assert!((cos - 1.0).abs() < 1e-12, "cos {cos}");
            }
        }
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = vec![Tensor::vector(vec![0.5, -1.0])];
        let mut opt = OptimState::new(&[&p], 0.0, 0.1);
        sgd_step(vec![&mut p], &g, &mut opt).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, 2.0 + 0.1]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn momentum_unrolls_as_expected() {
        let mut p = Tensor::scalar(0.0);
        let g = vec![Tensor::scalar(1.0)];
        let mut opt = OptimState::new(&[&p], 0.9, 1.0);
        sgd_step(vec![&mut p], &g, &mut opt).unwrap();
        sgd_step(vec![&mut p], &g, &mut opt).unwrap();
        assert!((p.item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity_geometrically() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = OptimState::new(&[&p], 0.5, 1.0);
        sgd_step(vec![&mut p], &[Tensor::scalar(1.0)], &mut opt).unwrap();
        let zero = [Tensor::scalar(0.0)];
        let mut prev_step = 1.0;
        for _ in 0..10 {
            let before = p.item();
            sgd_step(vec![&mut p], &zero, &mut opt).unwrap();
            let moved = before - p.item();
            assert!((moved - prev_step * 0.5).abs() < 1e-15);
            prev_step = moved;
        }
        // Total displacement converges to 1 / (1 - μ) = 2.
        assert!((p.item() + 2.0).abs() < 1e-3);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = OptimState::new(&[&p], 0.9, 0.1);
        let g = vec![Tensor::vector(vec![1.0, 2.0, 3.0])];
        assert!(matches!(
            sgd_step(vec![&mut p], &g, &mut opt),
            Err(TrainError::Shape { index: 0, .. })
        ));
    }

    #[test]
    fn step_schedule_decays_by_factor() {
        let s = LrSchedule::Step {
            base: 1e-3,
            interval: 6000,
            factor: 0.1,
            unit: ScheduleUnit::Iteration,
        };
        assert_eq!(s.lr_schedule(0), 1e-3);
        assert_eq!(s.lr_schedule(5999), 1e-3);
        assert!((s.lr_schedule(6000) - 1e-4).abs() < 1e-18);
        assert!((s.lr_schedule(12000) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn temporal_preset_milestones() {
        let s = LrSchedule::temporal_stream();
        assert_eq!(s.lr_schedule(47_999), 5e-3);
        assert!((s.lr_schedule(48_000) - 5e-4).abs() < 1e-18);
        assert!((s.lr_schedule(72_000) - 5e-5).abs() < 1e-18);
    }

    fn tiny() -> (Model, Vec<FeatureSequence>) {
        let spec = SyntheticSpec {
            classes: 3,
            dim: 6,
            length: 8,
            segment: 3,
            train: 12,
            test: 0,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let cfg = ModelConfig {
            input_dim: 6,
            hidden: 5,
            memory_dim: 7,
            controller_width: 4,
            classes: 3,
            ..ModelConfig::default()
        };
        (Model::new(cfg, 1).unwrap(), data.train)
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let (mut model, data) = tiny();
        let before = model.params.clone();
        let cfg = TrainConfig {
            batch_size: 4,
            schedule: LrSchedule::Step {
                base: 0.0,
                interval: 0,
                factor: 0.1,
                unit: ScheduleUnit::Epoch,
            },
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&model, cfg).unwrap();
        let m = trainer.train_epoch(&mut model, &data).unwrap();
        assert_eq!(model.params, before);
        assert!((0.0..=1.0).contains(&m.write_rate));
    }

    #[test]
    fn metrics_match_recount() {
        let (mut model, data) = tiny();
        let cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&model, cfg).unwrap();
        let m = trainer.train_epoch(&mut model, &data).unwrap();
        let recount = m
            .predictions
            .iter()
            .zip(&data)
            .filter(|(p, s)| **p == s.label)
            .count();
        assert_eq!(m.accuracy, recount as f64 / data.len() as f64);
        assert_eq!(m.epoch, 1);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (model, data) = tiny();
        let run = |threads: usize| {
            let mut model = model.clone();
            let cfg = TrainConfig {
                batch_size: 4,
                threads,
                schedule: LrSchedule::Step {
                    base: 0.05,
                    interval: 0,
                    factor: 0.1,
                    unit: ScheduleUnit::Epoch,
                },
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(&model, cfg).unwrap();
            let mut logs = Vec::new();
            for _ in 0..3 {
                logs.push(trainer.train_epoch(&mut model, &data).unwrap().to_string());
            }
            (model.params, logs)
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn repeated_single_sample_loss_does_not_increase() {
        let (_, data) = tiny();
        let one = &data[..1];
        for seed in 0..3 {
            let mut model = Model::new(tiny().0.config.clone(), seed).unwrap();
            let mut trainer = Trainer::new(&model, TrainConfig::default()).unwrap();
            let mut prev = f64::INFINITY;
            for _ in 0..10 {
                let m = trainer.train_epoch(&mut model, one).unwrap();
                assert!(m.loss <= prev, "seed {seed}: {} after {prev}", m.loss);
                prev = m.loss;
            }
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (mut model, _) = tiny();
        let mut trainer = Trainer::new(&model, TrainConfig::default()).unwrap();
        assert!(matches!(
            trainer.train_epoch(&mut model, &[]),
            Err(TrainError::EmptyDataset)
        ));
    }
}
