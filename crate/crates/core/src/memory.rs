//! Growing external memory: an append-only list of projected frame features.
//!
//! Means are taken over `N = Σ s`, the running total of the write weights.
//! With hard decisions this is the item count; keeping it on the tape lets
//! the decision gradient see how a write changes the normalization.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// How the memory history is read from the stored items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HistoryMode {
    /// Average of all items.
    #[default]
    Mean,
    /// Unnormalized sum of all items.
    Sum,
}

impl fmt::Display for HistoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HistoryMode::Mean => "mean",
            HistoryMode::Sum => "sum",
        })
    }
}

impl FromStr for HistoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(HistoryMode::Mean),
            "sum" => Ok(HistoryMode::Sum),
            other => Err(format!(
                "unknown history mode `{other}` (expected mean|sum)"
            )),
        }
    }
}

/// Write projection `W_w: [D × d]`, uniform in `[-1/√d, 1/√d]` at init.
pub fn init_write_projection<R: Rng + ?Sized>(
    memory_dim: usize,
    input_dim: usize,
    rng: &mut R,
) -> Tensor {
    let bound = 1.0 / (input_dim as f64).sqrt();
    Tensor::uniform(&[memory_dim, input_dim], bound, rng)
}

/// Per-sequence memory state recorded on a tape.
#[derive(Clone, Debug)]
pub struct MemoryModule {
    items: Vec<Var>,
    /// Running sum of the items, extended by one add per write.
    total: Option<Var>,
    /// Running sum of the write weights.
    count: Option<Var>,
    projection: Var,
    dim: usize,
    history: HistoryMode,
}

impl MemoryModule {
    /// `projection` must be a `[D × d]` node on the tape that will record reads and writes.
    pub fn new(tape: &Tape<'_>, projection: Var, history: HistoryMode) -> Self {
        let dim = tape.value(projection).shape()[0];
        Self {
            items: Vec::new(),
            total: None,
            count: None,
            projection,
            dim,
            history,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[Var] {
        &self.items
    }

    /// Memory history: mean (or sum) of the items, the zero vector when empty.
    ///
    /// Reads the running sum, so a read costs `O(D)` regardless of length.
    /// The result can differ from [`final_pool`](Self::final_pool) in the
    /// last bits because the summation order differs.
    pub fn read_history(&self, tape: &mut Tape<'_>) -> Result<Var, AutodiffError> {
        let (Some(total), Some(count)) = (self.total, self.count) else {
            return Ok(tape.constant(Tensor::zeros(&[self.dim])));
        };
        match self.history {
            HistoryMode::Mean => tape.div(total, count),
            HistoryMode::Sum => Ok(total),
        }
    }

    fn push(&mut self, tape: &mut Tape<'_>, item: Var, weight: Var) -> Result<(), AutodiffError> {
        let running = |tape: &mut Tape<'_>, acc: Option<Var>, v: Var| match acc {
            None => Ok(v),
            Some(acc) => tape.add(acc, v),
        };
        self.total = Some(running(tape, self.total, item)?);
        self.count = Some(running(tape, self.count, weight)?);
        self.items.push(item);
        Ok(())
    }

    /// Appends `s · (W_w x)` when the decision `s` is 1; leaves memory
    /// untouched when it is 0. Returns whether an item was written.
    pub fn write(&mut self, tape: &mut Tape<'_>, x: Var, s: Var) -> Result<bool, MemoryError> {
        let decision = tape.scalar(s);
        if decision == 0.0 {
            return Ok(false);
        }
        if decision != 1.0 {
            return Err(MemoryError::NonBinaryDecision(decision));
        }
        self.write_scaled(tape, x, s)?;
        Ok(true)
    }

    /// Appends `weight · (W_w x)` unconditionally, for any scalar weight.
    pub fn write_scaled(
        &mut self,
        tape: &mut Tape<'_>,
        x: Var,
        weight: Var,
    ) -> Result<(), AutodiffError> {
        let projected = tape.matvec(self.projection, x)?;
        let item = tape.scale(projected, weight)?;
        self.push(tape, item, weight)
    }

    /// Appends `W_w x` with no decision factor.
    pub fn write_forced(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<(), AutodiffError> {
        let item = tape.matvec(self.projection, x)?;
        let one = tape.constant(Tensor::scalar(1.0));
        self.push(tape, item, one)
    }

    /// Mean of all items, used as the classification representation.
    /// With hard decisions the result does not depend on item order, down
    /// to the last bit.
    pub fn final_pool(&self, tape: &mut Tape<'_>) -> Result<Var, AutodiffError> {
        let total = tape.sum_pool(&self.items)?;
        let count = self.count.ok_or(AutodiffError::EmptyPool)?;
        tape.div(total, count)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MemoryError {
    #[error("write decision must be 0 or 1, got {0}")]
    NonBinaryDecision(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn memory_with<'a>(tape: &mut Tape<'a>, projection: &'a Tensor) -> MemoryModule {
        let w = tape.param(projection);
        MemoryModule::new(tape, w, HistoryMode::Mean)
    }

    #[test]
    fn empty_history_is_zero() {
        let w = Tensor::identity(3);
        let mut tape = Tape::new();
        let mem = memory_with(&mut tape, &w);
        let mh = mem.read_history(&mut tape).unwrap();
        assert_eq!(tape.value(mh).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(mem.final_pool(&mut tape), Err(AutodiffError::EmptyPool));
    }

    #[test]
    fn history_is_the_mean_of_items() {
        let w = Tensor::identity(2);
        let mut tape = Tape::new();
        let mut mem = memory_with(&mut tape, &w);
        let one = tape.constant(Tensor::scalar(1.0));
        for x in [[2.0, 0.0], [4.0, 2.0]] {
            let x = tape.constant(Tensor::vector(x.to_vec()));
            assert!(mem.write(&mut tape, x, one).unwrap());
        }
        let mh = mem.read_history(&mut tape).unwrap();
        assert_eq!(tape.value(mh).data(), &[3.0, 1.0]);
        let pooled = mem.final_pool(&mut tape).unwrap();
        assert_eq!(tape.value(pooled).data(), tape.value(mh).data());
    }

    #[test]
    fn running_history_tracks_pooled_mean() {
        let w = Tensor::matrix(3, 2, vec![0.3, -1.1, 0.7, 0.2, -0.4, 0.9]).unwrap();
        let mut tape = Tape::new();
        let mut mem = memory_with(&mut tape, &w);
        let one = tape.constant(Tensor::scalar(1.0));
        for t in 0..25 {
            let x = tape.constant(Tensor::vector(vec![
                (t as f64).sin(),
                (t as f64 * 0.3).cos(),
            ]));
            mem.write(&mut tape, x, one).unwrap();
            let mh = mem.read_history(&mut tape).unwrap();
            let pooled = mem.final_pool(&mut tape).unwrap();
            for (a, b) in tape.value(mh).data().iter().zip(tape.value(pooled).data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sum_mode_reads_unnormalized() {
        let w = Tensor::identity(2);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let mut mem = MemoryModule::new(&tape, wv, HistoryMode::Sum);
        let one = tape.constant(Tensor::scalar(1.0));
        for x in [[2.0, 0.0], [4.0, 2.0]] {
            let x = tape.constant(Tensor::vector(x.to_vec()));
            mem.write(&mut tape, x, one).unwrap();
        }
        let mh = mem.read_history(&mut tape).unwrap();
        assert_eq!(tape.value(mh).data(), &[6.0, 2.0]);
    }

    #[test]
    fn skip_leaves_memory_untouched() {
        let w = Tensor::identity(2);
        let mut tape = Tape::new();
        let mut mem = memory_with(&mut tape, &w);
        let one = tape.constant(Tensor::scalar(1.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        mem.write(&mut tape, x, one).unwrap();
        let before = mem.items().to_vec();
        assert!(!mem.write(&mut tape, x, zero).unwrap());
        assert_eq!(mem.items(), &before[..]);
        let item = tape.value(mem.items()[0]).data().to_vec();
        assert_eq!(item, vec![1.0, 2.0]);
    }

    #[test]
    fn decision_sequence_counts_writes() {
        let w = Tensor::identity(2);
        let mut tape = Tape::new();
        let mut mem = memory_with(&mut tape, &w);
        for s in [1.0, 0.0, 1.0, 1.0] {
            let sv = tape.constant(Tensor::scalar(s));
            let x = tape.constant(Tensor::vector(vec![s, 1.0]));
            mem.write(&mut tape, x, sv).unwrap();
        }
        assert_eq!(mem.len(), 3);
    }

    #[test]
    fn non_binary_decision_is_rejected() {
        let w = Tensor::identity(2);
        let mut tape = Tape::new();
        let mut mem = memory_with(&mut tape, &w);
        let s = tape.constant(Tensor::scalar(0.4));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            mem.write(&mut tape, x, s),
            Err(MemoryError::NonBinaryDecision(0.4))
        );
    }

    #[test]
    fn projection_dimension_mismatch() {
        let w = Tensor::zeros(&[4, 3]);
        let mut tape = Tape::new();
        let mut mem = memory_with(&mut tape, &w);
        let s = tape.constant(Tensor::scalar(1.0));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            mem.write(&mut tape, x, s),
            Err(MemoryError::Autodiff(AutodiffError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn write_gradient_reaches_decision_and_projection() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        let mut tape = Tape::new();
        let mut mem = memory_with(&mut tape, &w);
        let s = tape.param_owned(Tensor::scalar(1.0));
        let one = tape.constant(Tensor::scalar(1.0));
        let x1 = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x2 = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        mem.write(&mut tape, x1, s).unwrap();
        mem.write(&mut tape, x2, one).unwrap();
        let pooled = mem.final_pool(&mut tape).unwrap();
        let probe = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let loss = tape.dot(pooled, probe).unwrap();
        tape.backward(loss).unwrap();
        // pooled = (s W x1 + W x2) / (s + 1), so at s = 1 its derivative in s
        // is (W x1 - W x2) / 4 = ([2, 3.5] - [0.5, 2]) / 4.
        assert_eq!(tape.grad(s).item(), 0.375);
        // pooled = W (s x1 + x2) / (s + 1) = W [0.5, 1.5].
        assert_eq!(tape.grad(mem.projection).data(), &[0.5, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn lone_item_mean_has_no_decision_gradient() {
        let w = Tensor::identity(2);
        let mut tape = Tape::new();
        let mut mem = memory_with(&mut tape, &w);
        let s = tape.param_owned(Tensor::scalar(1.0));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        mem.write(&mut tape, x, s).unwrap();
        let pooled = mem.final_pool(&mut tape).unwrap();
        let probe = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let loss = tape.dot(pooled, probe).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(s).item(), 0.0);
    }
}
