//! Randomized structural invariants shared by the property suite and the
//! acceptance run. Each check draws 1000 cases from a fixed-seed runner.

use mtdl_core::autodiff::{Tape, Tensor};
use mtdl_core::data::{decode, encode, FeatureSequence};
use mtdl_core::lstm::{apply_reset, lstm_step, LstmParams, LstmState};
use mtdl_core::memory::{HistoryMode, MemoryModule};
use mtdl_core::model::{DecisionMode, Model, ModelConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 1000;

fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
}

fn run<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

fn small_config(thr: f64) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        hidden: 4,
        memory_dim: 5,
        controller_width: 3,
        classes: 3,
        thr,
        ..ModelConfig::default()
    }
}

fn sequence(frames: usize, dim: usize) -> impl Strategy<Value = FeatureSequence> {
    (prop::collection::vec(-3.0f64..3.0, frames * dim), 0usize..3).prop_map(move |(f, label)| {
        FeatureSequence::new("p".into(), frames, dim, f, label).unwrap()
    })
}

fn sized_sequence() -> impl Strategy<Value = FeatureSequence> {
    (1usize..12).prop_flat_map(|t| sequence(t, 3))
}

/// Random model whose controller bias is shifted so that both all-skip and
/// mixed decision patterns occur.
fn model(seed: u64, shift: f64) -> Model {
    let mut m = Model::new(small_config(0.5), seed).unwrap();
    for b in m.params.controller.bias.data_mut() {
        *b += shift;
    }
    m
}

pub fn memory_length_counts_hard_writes() -> Result<(), String> {
    run(
        (sized_sequence(), any::<u64>(), -1.5f64..1.5),
        |(seq, seed, shift)| {
            let m = model(seed, shift);
            let fwd = m.forward_sequence(&seq, &DecisionMode::Hard).unwrap();
            let sum: usize = fwd.trace.frames.iter().map(|f| usize::from(f.s)).sum();
            prop_assert_eq!(fwd.written, sum);
            prop_assert_eq!(fwd.fallback_used, sum == 0);
            Ok(())
        },
    )
}

pub fn memory_length_counts_pinned_writes() -> Result<(), String> {
    let strategy = (
        sized_sequence(),
        any::<u64>(),
        prop::collection::vec(any::<bool>(), 12),
    );
    run(strategy, |(seq, seed, pattern)| {
        let m = model(seed, 0.0);
        let decisions = pattern[..seq.len()].to_vec();
        let expected = decisions.iter().filter(|d| **d).count();
        let fwd = m
            .forward_sequence(&seq, &DecisionMode::Frozen(decisions))
            .unwrap();
        prop_assert_eq!(fwd.written, expected);
        Ok(())
    })
}

pub fn zero_decision_zeroes_the_state() -> Result<(), String> {
    let strategy = (
        any::<u64>(),
        prop::collection::vec(-5.0f64..5.0, 3),
        prop::collection::vec(-1.0f64..1.0, 4),
        prop::collection::vec(-10.0f64..10.0, 4),
    );
    run(strategy, |(seed, x, h0, c0)| {
        let params = LstmParams::init(3, 4, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(Tensor::vector(x));
        let prev = LstmState {
            h: tape.constant(Tensor::vector(h0)),
            c: tape.constant(Tensor::vector(c0)),
        };
        let (h, c) = lstm_step(&mut tape, &vars, x, &prev).unwrap();
        let s = tape.constant(Tensor::scalar(0.0));
        let state = apply_reset(&mut tape, h, c, s).unwrap();
        prop_assert!(tape.value(state.h).data().iter().all(|v| *v == 0.0));
        prop_assert!(tape.value(state.c).data().iter().all(|v| *v == 0.0));
        Ok(())
    })
}

pub fn decision_is_sign_of_logit() -> Result<(), String> {
    run(
        (sized_sequence(), any::<u64>(), -1.5f64..1.5),
        |(seq, seed, shift)| {
            let m = model(seed, shift);
            let fwd = m.forward_sequence(&seq, &DecisionMode::Hard).unwrap();
            for (frame, &q) in fwd.trace.frames.iter().zip(&fwd.scores) {
                prop_assert_eq!(frame.s, fwd.tape.scalar(q) > 0.0);
            }
            Ok(())
        },
    )
}

pub fn final_pool_ignores_item_order() -> Result<(), String> {
    let strategy = (
        prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..20),
        any::<u64>(),
    );
    run(strategy, |(items, perm_seed)| {
        let pooled = |order: &[usize]| {
            let w = Tensor::identity(4);
            let mut tape = Tape::new();
            let wv = tape.param(&w);
            let mut mem = MemoryModule::new(&tape, wv, HistoryMode::Mean);
            let one = tape.constant(Tensor::scalar(1.0));
            for &i in order {
                let x = tape.constant(Tensor::vector(items[i].clone()));
                mem.write(&mut tape, x, one).unwrap();
            }
            let p = mem.final_pool(&mut tape).unwrap();
            let h = mem.read_history(&mut tape).unwrap();
            (tape.value(p).data().to_vec(), tape.value(h).data().to_vec())
        };
        let identity: Vec<usize> = (0..items.len()).collect();
        let mut shuffled = identity.clone();
        rand::seq::SliceRandom::shuffle(
            &mut shuffled[..],
            &mut ChaCha8Rng::seed_from_u64(perm_seed),
        );
        let (p1, h1) = pooled(&identity);
        let (p2, h2) = pooled(&shuffled);
        prop_assert_eq!(&p1, &p2);
        // The running history sums in arrival order, so only agreement to
        // rounding is expected there.
        let scale = items.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in h1.iter().zip(&h2) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
        Ok(())
    })
}

pub fn history_scales_linearly() -> Result<(), String> {
    let strategy = (
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..15),
        -4.0f64..4.0,
    );
    run(strategy, |(items, alpha)| {
        let history = |scale: f64| {
            let w = Tensor::identity(3);
            let mut tape = Tape::new();
            let wv = tape.param(&w);
            let mut mem = MemoryModule::new(&tape, wv, HistoryMode::Mean);
            let one = tape.constant(Tensor::scalar(1.0));
            for item in &items {
                let x = tape.constant(Tensor::vector(item.iter().map(|v| v * scale).collect()));
                mem.write(&mut tape, x, one).unwrap();
            }
            let h = mem.read_history(&mut tape).unwrap();
            tape.value(h).data().to_vec()
        };
        let base = history(1.0);
        for (a, b) in history(alpha).iter().zip(&base) {
            prop_assert!((a - alpha * b).abs() <= 1e-12 * (1.0 + (alpha * b).abs()));
        }
        Ok(())
    })
}

pub fn feature_file_round_trips() -> Result<(), String> {
    let strategy = (1usize..30, 1usize..20, 0usize..1000, any::<u64>());
    run(strategy, |(frames, dim, label, seed)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Stored as 32-bit, so draw values that are exactly representable.
        let features = (0..frames * dim)
            .map(|_| f64::from(rng.random_range(-1e4f32..1e4)))
            .collect();
        let seq = FeatureSequence::new("rt".into(), frames, dim, features, label).unwrap();
        let bytes = encode(&seq);
        let back = decode(&bytes, "rt").unwrap();
        prop_assert_eq!(&back, &seq);
        prop_assert_eq!(encode(&back), bytes);
        Ok(())
    })
}
