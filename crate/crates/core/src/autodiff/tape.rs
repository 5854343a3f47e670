use std::borrow::Cow;

use super::tensor::{axpy, dot};
use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec {
        w: Var,
        x: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale {
        v: Var,
        s: Var,
    },
    Div {
        v: Var,
        s: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ste(Var),
    Dot(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    MeanPool(Vec<Var>),
    SumPool(Vec<Var>),
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    tracked: bool,
}

/// Define-by-run record of a forward computation.
///
/// Nodes are appended in evaluation order, so every node's inputs have
/// smaller ids. [`Tape::backward`] sweeps ids in strictly decreasing order.
/// Leaves are either parameters (gradient tracked) or constants; nodes that
/// depend only on constants carry no gradient.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a rank-0 (or single element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Op::Leaf, Cow::Borrowed(t), false)
    }

    /// Registers a parameter leaf without copying it.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Op::Leaf, Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Cow::Owned(t), true)
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize, AutodiffError> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        Ok(t.len())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `W x` for `W: [m×n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, AutodiffError> {
        let (tw, tx) = (self.value(w), self.value(x));
        if tw.rank() != 2 || tx.rank() != 1 || tw.shape()[1] != tx.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                left: tw.shape().to_vec(),
                right: tx.shape().to_vec(),
            });
        }
        let n = tw.shape()[1];
        let xs = tx.data();
        let out: Vec<f64> = tw.data().chunks_exact(n).map(|row| dot(row, xs)).collect();
        let tracked = self.tracked(w) || self.tracked(x);
        Ok(self.push(
            Op::MatVec { w, x },
            Cow::Owned(Tensor::vector(out)),
            tracked,
        ))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(op, Cow::Owned(value), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `s · v` for a scalar node `s`.
    pub fn scale(&mut self, v: Var, s: Var) -> Result<Var, AutodiffError> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: ts.shape().to_vec(),
            });
        }
        let factor = ts.item();
        let tv = self.value(v);
        let data = tv.data().iter().map(|x| factor * x).collect();
        let value = Tensor::new(tv.shape().to_vec(), data)?;
        let tracked = self.tracked(v) || self.tracked(s);
        Ok(self.push(Op::Scale { v, s }, Cow::Owned(value), tracked))
    }

    /// `v / s` for a nonzero scalar node `s`.
    pub fn div(&mut self, v: Var, s: Var) -> Result<Var, AutodiffError> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: ts.shape().to_vec(),
            });
        }
        let divisor = ts.item();
        if divisor == 0.0 {
            return Err(AutodiffError::ZeroDivisor);
        }
        let tv = self.value(v);
        let data = tv.data().iter().map(|x| x / divisor).collect();
        let value = Tensor::new(tv.shape().to_vec(), data)?;
        let tracked = self.tracked(v) || self.tracked(s);
        Ok(self.push(Op::Div { v, s }, Cow::Owned(value), tracked))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(op, Cow::Owned(value), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// Hard threshold `[a > thr]` whose backward is the identity.
    pub fn ste_threshold(&mut self, a: Var, thr: f64) -> Result<Var, AutodiffError> {
        if !(thr > 0.0 && thr < 1.0) {
            return Err(AutodiffError::InvalidThreshold(thr));
        }
        let ta = self.value(a);
        if ta.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: ta.shape().to_vec(),
            });
        }
        let s = if ta.item() > thr { 1.0 } else { 0.0 };
        let tracked = self.tracked(a);
        Ok(self.push(Op::Ste(a), Cow::Owned(Tensor::scalar(s)), tracked))
    }

    /// Inner product of two vectors, producing a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("dot", a, b)?;
        self.expect_vector("dot", a)?;
        let value = dot(self.value(a).data(), self.value(b).data());
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Dot(a, b), Cow::Owned(Tensor::scalar(value)), tracked))
    }

    /// Contiguous sub-vector `x[start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let n = self.expect_vector("slice", x)?;
        if start + len > n {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                left: vec![n],
                right: vec![start, start + len],
            });
        }
        let value = Tensor::vector(self.value(x).data()[start..start + len].to_vec());
        let tracked = self.tracked(x);
        Ok(self.push(Op::Slice { x, start }, Cow::Owned(value), tracked))
    }

    fn pool(&mut self, items: &[Var], mean: bool) -> Result<Var, AutodiffError> {
        let first = *items.first().ok_or(AutodiffError::EmptyPool)?;
        let dim = self.expect_vector("pool", first)?;
        for &item in &items[1..] {
            self.same_shape("pool", first, item)?;
        }
        // Each coordinate is summed in sorted order, so the result depends only
        // on the multiset of items and not on their order.
        let n = items.len();
        let mut column = vec![0.0; n];
        let mut out = Vec::with_capacity(dim);
        for j in 0..dim {
            for (slot, &item) in column.iter_mut().zip(items) {
                *slot = self.value(item).data()[j];
            }
            column.sort_unstable_by(f64::total_cmp);
            let total: f64 = column.iter().sum();
            out.push(if mean { total / n as f64 } else { total });
        }
        let tracked = items.iter().any(|&v| self.tracked(v));
        let op = if mean {
            Op::MeanPool(items.to_vec())
        } else {
            Op::SumPool(items.to_vec())
        };
        Ok(self.push(op, Cow::Owned(Tensor::vector(out)), tracked))
    }

    /// Elementwise mean of `items`; fails on an empty list.
    pub fn mean_pool(&mut self, items: &[Var]) -> Result<Var, AutodiffError> {
        self.pool(items, true)
    }

    /// Elementwise sum of `items`; fails on an empty list.
    pub fn sum_pool(&mut self, items: &[Var]) -> Result<Var, AutodiffError> {
        self.pool(items, false)
    }

    /// `-log softmax(logits)[label]` with max subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        label: usize,
    ) -> Result<Var, AutodiffError> {
        let classes = self.expect_vector("softmax_cross_entropy", logits)?;
        if label >= classes {
            return Err(AutodiffError::LabelOutOfRange { label, classes });
        }
        let probs = softmax(self.value(logits).data());
        let l = self.value(logits).data();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - l[label];
        let tracked = self.tracked(logits);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            },
            Cow::Owned(Tensor::scalar(loss)),
            tracked,
        ))
    }

    /// Reverse sweep from the scalar `loss`, seeding `dL/dL = 1`.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, f: impl FnOnce(&mut [f64], &[Node<'a>])) {
        let node = &self.nodes[target.0];
        if !node.tracked {
            return;
        }
        let len = node.value.len();
        let slot = self.grads[target.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Inputs are copied out so `accumulate` can borrow mutably.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatVec { w, x } => {
                let (w, x) = (*w, *x);
                self.accumulate(w, |dw, nodes| {
                    let xs = nodes[x.0].value.data();
                    let n = xs.len();
                    for (row, gi) in dw.chunks_exact_mut(n).zip(g) {
                        if *gi != 0.0 {
                            axpy(*gi, xs, row);
                        }
                    }
                });
                self.accumulate(x, |dx, nodes| {
                    let ws = nodes[w.0].value.data();
                    let n = dx.len();
                    for (row, gi) in ws.chunks_exact(n).zip(g) {
                        if *gi != 0.0 {
                            axpy(*gi, row, dx);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |da, _| axpy(1.0, g, da));
                self.accumulate(*b, |db, _| axpy(1.0, g, db));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |da, nodes| {
                    let bs = nodes[b.0].value.data();
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bs) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(b, |db, nodes| {
                    let as_ = nodes[a.0].value.data();
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(as_) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale { v, s } => {
                let (v, s) = (*v, *s);
                self.accumulate(v, |dv, nodes| {
                    axpy(nodes[s.0].value.item(), g, dv);
                });
                self.accumulate(s, |ds, nodes| {
                    ds[0] += dot(g, nodes[v.0].value.data());
                });
            }
            Op::Div { v, s } => {
                let (v, s) = (*v, *s);
                let divisor = self.nodes[s.0].value.item();
                self.accumulate(v, |dv, _| axpy(1.0 / divisor, g, dv));
                // d(v/s)/ds = -(v/s)/s, and v/s is this node's output.
                self.accumulate(s, |ds, nodes| {
                    ds[0] -= dot(g, nodes[id].value.data()) / divisor;
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(*x, |dx, nodes| {
                    let y = nodes[id].value.data();
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(x) => {
                self.accumulate(*x, |dx, nodes| {
                    let y = nodes[id].value.data();
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                self.accumulate(x, |dx, nodes| {
                    let xs = nodes[x.0].value.data();
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xs) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Ste(a) => {
                self.accumulate(*a, |da, _| da[0] += g[0]);
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |da, nodes| axpy(g[0], nodes[b.0].value.data(), da));
                self.accumulate(b, |db, nodes| axpy(g[0], nodes[a.0].value.data(), db));
            }
            Op::Slice { x, start } => {
                let start = *start;
                self.accumulate(*x, |dx, _| axpy(1.0, g, &mut dx[start..start + g.len()]));
            }
            Op::MeanPool(items) => {
                let w = 1.0 / items.len() as f64;
                for &item in items {
                    self.accumulate(item, |d, _| axpy(w, g, d));
                }
            }
            Op::SumPool(items) => {
                for &item in items {
                    self.accumulate(item, |d, _| axpy(1.0, g, d));
                }
            }
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            } => {
                self.accumulate(*logits, |d, _| {
                    for (i, (di, p)) in d.iter_mut().zip(probs).enumerate() {
                        let target = if i == *label { 1.0 } else { 0.0 };
                        *di += g[0] * (p - target);
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when
    /// `v` is not on a path to the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take_grad(&mut self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => Tensor::new(shape, g).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}

/// Logistic function, evaluated so the exponent never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
