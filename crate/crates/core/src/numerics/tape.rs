//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends one node. Node ids are
//! assigned in execution order, so the tape is topologically sorted by
//! construction and the backward pass is a single reverse sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Denominator guard used by every normalization in the crate.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right-hand operand of a binary op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[1, c]` against `[r, c]`.
    Row,
    /// Single element against anything.
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Relu(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    ColStd { input: Var, guarded: bool },
    ColNorm(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when the loss does not
    /// reach it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
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

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("{op} expects a matrix"),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        if ac != br {
            return Err(self.mismatch("matmul", a, b));
        }
        let (c, m, n) = gemm(
            self.value(a).data(),
            (ar, ac),
            false,
            self.value(b).data(),
            (br, bc),
            false,
        );
        self.record("matmul", Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims("transpose", a)?;
        let t = self.value(a).transpose();
        self.record("transpose", t, Op::Transpose(a), &[a])
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if sa.is_matrix() && sb.shape() == [1, sa.cols()] {
            Ok(Broadcast::Row)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[rhs_index(bc, i, cols)]))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record(name, out, make(a, b, bc), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("subtract", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("multiply", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("divide", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.record("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.powf(p));
        self.record("power", out, Op::Pow(a, p), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.record("relu", out, Op::Relu(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.record("sqrt", out, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims("col_mean", a)?;
        let out = column_means(self.value(a));
        self.record("col_mean", out, Op::ColMean(a), &[a])
    }

    /// Population standard deviation of each column, `[1, cols]`.
    pub fn col_std(&mut self, a: Var) -> Result<Var> {
        self.col_std_impl(a, false)
    }

    /// Like [`col_std`](Self::col_std) but columns whose deviation is below
    /// [`NORM_EPS`] report 1, so dividing by the result never blows up.
    pub fn col_std_guarded(&mut self, a: Var) -> Result<Var> {
        self.col_std_impl(a, true)
    }

    fn col_std_impl(&mut self, a: Var, guarded: bool) -> Result<Var> {
        self.matrix_dims("col_std", a)?;
        let mut out = column_stds(self.value(a));
        if guarded {
            for s in out.data_mut() {
                if *s < NORM_EPS {
                    *s = 1.0;
                }
            }
        }
        self.record("col_std", out, Op::ColStd { input: a, guarded }, &[a])
    }

    /// Euclidean norm of each column, `[1, cols]`.
    pub fn col_norm(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("col_norm", a)?;
        let t = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
                *o += x * x;
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        self.record("col_norm", Tensor::from_parts(vec![1, c], out), Op::ColNorm(a), &[a])
    }

    /// Per-column z-score with population deviation. Degenerate columns
    /// (deviation below [`NORM_EPS`]) come back mean-centred only.
    pub fn zscore(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.matrix_dims("zscore_normalize", a)?;
        if r < 2 {
            return Err(Error::TooFewRows {
                op: "zscore_normalize",
                needed: 2,
                got: r,
            });
        }
        let mean = self.col_mean(a)?;
        let centred = self.sub(a, mean)?;
        let std = self.col_std_guarded(a)?;
        self.div(centred, std)
    }

    /// Mean softmax cross-entropy of `logits` (`[n, classes]`) against
    /// integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if labels.len() != r {
            return Err(Error::Invalid(format!(
                "softmax_cross_entropy: {} labels for {r} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax_rows(self.value(logits));
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * c + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / r as f64;
        self.record(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_shape, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        // Only leaves keep their gradients.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contribution: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(contribution.data())
                    .for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let dims_g = (g.rows(), g.cols());
                let dims_a = (ta.rows(), ta.cols());
                let dims_b = (tb.rows(), tb.cols());
                if self.nodes[a.0].requires_grad {
                    let (d, m, n) = gemm(g.data(), dims_g, false, tb.data(), dims_b, true);
                    send(*a, Tensor::from_parts(vec![m, n], d));
                }
                if self.nodes[b.0].requires_grad {
                    let (d, m, n) = gemm(ta.data(), dims_a, true, g.data(), dims_g, false);
                    send(*b, Tensor::from_parts(vec![m, n], d));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b, bc) => {
                send(*a, g.clone());
                send(*b, reduce_to(g.data(), *bc, val(*b), g.cols()));
            }
            Op::Sub(a, b, bc) => {
                send(*a, g.clone());
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                send(*b, reduce_to(&neg, *bc, val(*b), g.cols()));
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.cols();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * tb.data()[rhs_index(*bc, i, cols)])
                    .collect();
                send(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                let db: Vec<f64> = g.data().iter().zip(ta.data()).map(|(gv, x)| gv * x).collect();
                send(*b, reduce_to(&db, *bc, tb, cols));
            }
            Op::Div(a, b, bc) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.cols();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv / tb.data()[rhs_index(*bc, i, cols)])
                    .collect();
                send(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .enumerate()
                    .map(|(i, (gv, x))| {
                        let y = tb.data()[rhs_index(*bc, i, cols)];
                        -gv * x / (y * y)
                    })
                    .collect();
                send(*b, reduce_to(&db, *bc, tb, cols));
            }
            Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Pow(a, p) => {
                let ta = val(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| gv * p * x.powf(p - 1.0))
                    .collect();
                send(*a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                let ta = val(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::Sqrt(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gv)| if *y > 0.0 { gv / (2.0 * y) } else { 0.0 })
                    .collect();
                send(*a, Tensor::from_parts(node.value.shape().to_vec(), d));
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape().to_vec(), g.item())),
            Op::Mean(a) => {
                let ta = val(*a);
                send(*a, Tensor::full(ta.shape().to_vec(), g.item() / ta.len() as f64));
            }
            Op::ColMean(a) => {
                let ta = val(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut d = vec![0.0; r * c];
                for row in d.chunks_mut(c) {
                    for (o, gv) in row.iter_mut().zip(g.data()) {
                        *o = gv / r as f64;
                    }
                }
                send(*a, Tensor::from_parts(vec![r, c], d));
            }
            Op::ColStd { input, guarded } => {
                let ta = val(*input);
                let (r, c) = (ta.rows(), ta.cols());
                let mean = column_means(ta);
                let std = column_stds(ta);
                let mut d = vec![0.0; r * c];
                for j in 0..c {
                    let s = std.data()[j];
                    if s == 0.0 || (*guarded && s < NORM_EPS) {
                        continue;
                    }
                    let k = g.data()[j] / (r as f64 * s);
                    for i in 0..r {
                        d[i * c + j] = k * (ta.data()[i * c + j] - mean.data()[j]);
                    }
                }
                send(*input, Tensor::from_parts(vec![r, c], d));
            }
            Op::ColNorm(a) => {
                let ta = val(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut d = vec![0.0; r * c];
                for j in 0..c {
                    let n = node.value.data()[j];
                    if n == 0.0 {
                        continue;
                    }
                    for i in 0..r {
                        d[i * c + j] = g.data()[j] * ta.data()[i * c + j] / n;
                    }
                }
                send(*a, Tensor::from_parts(vec![r, c], d));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let tl = val(*logits);
                let (r, c) = (tl.rows(), tl.cols());
                let mut d = softmax_rows(tl);
                let k = g.item() / r as f64;
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= k);
                send(*logits, Tensor::from_parts(vec![r, c], d));
            }
        }
    }
}

fn rhs_index(bc: Broadcast, i: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Scalar => 0,
    }
}

/// Folds a full-size gradient back onto a broadcast operand's shape.
fn reduce_to(g: &[f64], bc: Broadcast, target: &Tensor, cols: usize) -> Tensor {
    match bc {
        Broadcast::Same => Tensor::from_parts(target.shape().to_vec(), g.to_vec()),
        Broadcast::Scalar => Tensor::from_parts(target.shape().to_vec(), vec![g.iter().sum()]),
        Broadcast::Row => {
            let mut out = vec![0.0; cols];
            for row in g.chunks(cols) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::from_parts(target.shape().to_vec(), out)
        }
    }
}

pub(crate) fn column_means(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|v| *v /= r as f64);
    Tensor::from_parts(vec![1, c], out)
}

pub(crate) fn column_stds(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mean = column_means(t);
    let mut out = vec![0.0; c];
    for i in 0..r {
        for ((o, x), m) in out.iter_mut().zip(t.row_slice(i)).zip(mean.data()) {
            *o += (x - m) * (x - m);
        }
    }
    out.iter_mut().for_each(|v| *v = (*v / r as f64).sqrt());
    Tensor::from_parts(vec![1, c], out)
}

pub(crate) fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Column-wise z-score of a plain tensor (no gradient tracking).
pub fn zscore_normalize(z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let out = tape.zscore(v)?;
    Ok(tape.value(out).clone())
}
