//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to its variables. Calling
//! [`Tape::backward`] on a scalar output walks the recording in reverse and
//! returns the gradient of that output with respect to every parameter leaf.
//! Gradients flowing into a node are accumulated in recording order, so two
//! identical recordings produce bit-identical gradients.
//!
//! Only scalar-with-tensor broadcasting is supported; row-wise bias addition is
//! its own primitive ([`Tape::add_bias`]).
//!
//! ```
//! use surgift_core::autodiff::Tape;
//! use surgift_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let theta = tape.param(Tensor::vector(vec![3.0]).unwrap()).unwrap();
//! let sq = tape.square(theta).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(theta).unwrap(), &[6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Identity(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    Entropy(Var),
    CrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::Identity(..) => "identity",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Entropy(..) => "entropy",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: bool,
    requires_grad: bool,
}

/// Append-only recording of primitive operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to the parameter leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a parameter leaf. `None` for non-parameters and for
    /// parameters the loss does not depend on.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn is_scalar_shape(t: &Tensor) -> bool {
    t.len() == 1 && t.shape().iter().all(|&d| d == 1)
}

fn check_finite(op: &Op, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.name().to_string()))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => {
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        (&[m, k], &[k2]) if k == k2 => {
            let (ad, bd) = (a.data(), b.data());
            let out = (0..m)
                .map(|i| {
                    ad[i * k..(i + 1) * k]
                        .iter()
                        .zip(bd)
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect();
            Ok(Tensor::from_parts(vec![m], out))
        }
        _ => Err(mismatch()),
    }
}

fn transpose_values(a: &Tensor) -> Result<Tensor> {
    match a.shape() {
        &[m, n] => {
            let d = a.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            Ok(Tensor::from_parts(vec![n, m], out))
        }
        s => Err(Error::ShapeMismatch {
            op: "transpose",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Row-wise softmax of a `[batch, classes]` tensor, max-subtracted.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let &[b, c] = logits.shape() else {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows",
            lhs: logits.shape().to_vec(),
            rhs: vec![],
        });
    };
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        softmax_row(logits.row(i), &mut out[i * c..(i + 1) * c]);
    }
    Ok(Tensor::from_parts(vec![b, c], out))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, param: bool, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        check_finite(&op, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            param,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable leaf; its gradient is returned by `backward`.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, true)
    }

    /// Records a leaf that is not differentiated (inputs, targets).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_values(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), false, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = transpose_values(self.value(a))?;
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), false, rg)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape().to_vec(), d)
        } else if is_scalar_shape(tb) {
            let s = tb.data()[0];
            (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, s)).collect())
        } else if is_scalar_shape(ta) {
            let s = ta.data()[0];
            (tb.shape().to_vec(), tb.data().iter().map(|&y| f(s, y)).collect())
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), op, false, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let rg = self.rg(a);
        self.push(out, Op::ScalarMul(a, c), false, rg)
    }

    /// `x[i, :] + bias` for every row of a `[batch, n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = match (tx.shape(), tb.shape()) {
            (&[_, n], &[n2]) if n == n2 => n,
            (l, r) => {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: l.to_vec(),
                    rhs: r.to_vec(),
                })
            }
        };
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), false, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(a);
        self.push(out, op, false, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn identity(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Identity(a), |v| v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum(a), false, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![], vec![m]), Op::Mean(a), false, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), false, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), false, rg)
    }

    /// Mean over the leading axis: `[batch, c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[b, c] = t.shape() else {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        };
        let mut out = vec![0.0; c];
        for i in 0..b {
            out.iter_mut().zip(t.row(i)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= b as f64);
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![c], out), Op::MeanRows(a), false, rg)
    }

    /// Shannon entropy `-sum p ln p` of a probability vector, with `0 ln 0 = 0`.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let t = self.value(p);
        if t.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let h = -t
            .data()
            .iter()
            .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
            .sum::<f64>();
        let rg = self.rg(p);
        self.push(Tensor::from_parts(vec![], vec![h]), Op::Entropy(p), false, rg)
    }

    /// Mean negative log-softmax of the labelled class over a batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let &[b, c] = t.shape() else {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        };
        if b != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let rg = self.rg(logits);
        let out = Tensor::from_parts(vec![], vec![total / b as f64]);
        self.push(out, Op::CrossEntropy(logits, labels.to_vec()), false, rg)
    }

    /// Reverse pass from a scalar `loss`. Consumes the recording: a second
    /// call fails with [`Error::StaleTape`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            // Keep nothing for intermediates.
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !node.param {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let send = |v: Var, delta: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match (ta.shape(), tb.shape()) {
                    (&[m, k], &[_, nn]) => {
                        if self.rg(*a) {
                            let mut da = vec![0.0; m * k];
                            let bd = tb.data();
                            for i in 0..m {
                                let grow = &g[i * nn..(i + 1) * nn];
                                for p in 0..k {
                                    let brow = &bd[p * nn..(p + 1) * nn];
                                    da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                }
                            }
                            send(*a, da, grads);
                        }
                        if self.rg(*b) {
                            let mut db = vec![0.0; k * nn];
                            let ad = ta.data();
                            for i in 0..m {
                                let grow = &g[i * nn..(i + 1) * nn];
                                for p in 0..k {
                                    let aip = ad[i * k + p];
                                    let drow = &mut db[p * nn..(p + 1) * nn];
                                    drow.iter_mut().zip(grow).for_each(|(d, x)| *d += aip * x);
                                }
                            }
                            send(*b, db, grads);
                        }
                    }
                    (&[m, k], &[_]) => {
                        if self.rg(*a) {
                            let bd = tb.data();
                            let mut da = vec![0.0; m * k];
                            for i in 0..m {
                                for p in 0..k {
                                    da[i * k + p] = g[i] * bd[p];
                                }
                            }
                            send(*a, da, grads);
                        }
                        if self.rg(*b) {
                            let ad = ta.data();
                            let mut db = vec![0.0; k];
                            for i in 0..m {
                                for p in 0..k {
                                    db[p] += ad[i * k + p] * g[i];
                                }
                            }
                            send(*b, db, grads);
                        }
                    }
                    _ => unreachable!("matmul shapes validated at record time"),
                }
            }
            Op::Transpose(a) => {
                let &[m, n] = out.shape() else { unreachable!() };
                // out is [m, n]; input was [n, m].
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g[i * n + j];
                    }
                }
                send(*a, da, grads);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ta, tb) = (self.value(*a), self.value(*b));
                let reduce = |t: &Tensor, s: f64| -> Vec<f64> {
                    if t.shape() == out.shape() {
                        g.iter().map(|v| s * v).collect()
                    } else {
                        vec![s * g.iter().sum::<f64>()]
                    }
                };
                if self.rg(*a) {
                    send(*a, reduce(ta, 1.0), grads);
                }
                if self.rg(*b) {
                    send(*b, reduce(tb, sign), grads);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let other_at = |t: &Tensor, i: usize| {
                    if t.shape() == out.shape() {
                        t.data()[i]
                    } else {
                        t.data()[0]
                    }
                };
                let grad_for = |mine: &Tensor, other: &Tensor| -> Vec<f64> {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * other_at(other, i))
                        .collect();
                    if mine.shape() == out.shape() {
                        full
                    } else {
                        vec![full.iter().sum()]
                    }
                };
                if self.rg(*a) {
                    send(*a, grad_for(ta, tb), grads);
                }
                if self.rg(*b) {
                    send(*b, grad_for(tb, ta), grads);
                }
            }
            Op::ScalarMul(a, c) => send(*a, g.iter().map(|v| v * c).collect(), grads),
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    send(*x, g.to_vec(), grads);
                }
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                    send(*b, db, grads);
                }
            }
            Op::Relu(a) => {
                // Subgradient at exactly zero is 0.
                let ad = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(ad)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*a, d, grads);
            }
            Op::Identity(a) | Op::Reshape(a) => send(*a, g.to_vec(), grads),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()], grads),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n], grads)
            }
            Op::Square(a) => {
                let ad = self.value(*a).data();
                send(*a, g.iter().zip(ad).map(|(gv, x)| 2.0 * x * gv).collect(), grads)
            }
            Op::SoftmaxRows(a) => {
                let &[b, c] = out.shape() else { unreachable!() };
                let s = out.data();
                let mut da = vec![0.0; b * c];
                for i in 0..b {
                    let sr = &s[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        da[i * c + j] = sr[j] * (gr[j] - dot);
                    }
                }
                send(*a, da, grads);
            }
            Op::MeanRows(a) => {
                let &[b, c] = self.value(*a).shape() else { unreachable!() };
                let mut da = Vec::with_capacity(b * c);
                for _ in 0..b {
                    da.extend(g.iter().map(|v| v / b as f64));
                }
                send(*a, da, grads);
            }
            Op::Entropy(p) => {
                let pd = self.value(*p).data();
                let d = pd
                    .iter()
                    .map(|&q| if q > 0.0 { -g[0] * (q.ln() + 1.0) } else { 0.0 })
                    .collect();
                send(*p, d, grads);
            }
            Op::CrossEntropy(a, labels) => {
                let t = self.value(*a);
                let &[b, c] = t.shape() else { unreachable!() };
                let probs = softmax_rows(t)?;
                let scale = g[0] / b as f64;
                let mut da = probs.into_data();
                for (i, &y) in labels.iter().enumerate() {
                    da[i * c + y] -= 1.0;
                }
                da.iter_mut().for_each(|v| *v *= scale);
                send(*a, da, grads);
            }
        }
        Ok(())
    }
}
