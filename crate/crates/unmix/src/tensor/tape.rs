use crate::error::{Error, Result};

use super::{matmul_raw, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable ln(1 + e^x).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// User-defined operation with its own backward rule. The forward value is
/// computed by the caller; the tape records inputs and replays `backward`.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, aligned with the recorded input list.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, out_grad: &[f64], inputs: &[&Tensor]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    Act { x: Var, kind: Activation },
    Softplus(Var),
    CausalConv { x: Var, kernel: Var, bias: Var },
    AddBias { x: Var, bias: Var },
    BroadcastCol { x: Var },
    SliceCols { x: Var, start: usize },
    StackRows(Vec<Var>),
    ReverseRows(Var),
    MeanRows(Var),
    Sum(Var),
    L1Loss { pred: Var, target: Var },
    FusePair { a: Var, b: Var, w: Var, bias: Var },
    AffineScalar { x: Var, w: Var, bias: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Per-pass record of operations. Built forward, replayed once in reverse by
/// [`Tape::backward`], then dropped; parameters live outside as plain tensors
/// and are re-bound as leaves each pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
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

    /// Gradient of the last backward pass, if this node required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor, requires: bool, op: Op) -> Result<Var> {
        if let Some(bad) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(op_name, format!("non-finite output at flat index {bad}")));
        }
        Ok(self.push(value, requires, op))
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dimension("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_checked("add", value, self.any_requires(&[a, b]), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dimension("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_checked("sub", value, self.any_requires(&[a, b]), Op::Sub(a, b))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dimension("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_checked("mul", value, self.any_requires(&[a, b]), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_checked("scale", value, self.nodes[x.0].requires_grad, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_checked("exp", value, self.nodes[x.0].requires_grad, Op::Exp(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::dimension(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                format!("inner extents disagree: {:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], data);
        self.push_checked("matmul", value, self.any_requires(&[a, b]), Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.transposed()?;
        self.push_checked("transpose", value, self.nodes[x.0].requires_grad, Op::Transpose(x))
    }

    /// Softmax along `axis`, stabilized by max subtraction. Output along the
    /// axis is strictly positive and sums to 1.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if axis >= tx.rank() {
            return Err(Error::dimension(
                "softmax_axis",
                format!("axis {axis} out of range for shape {:?}", tx.shape()),
            ));
        }
        let value = softmax_forward(tx, axis);
        self.push_checked("softmax_axis", value, self.nodes[x.0].requires_grad, Op::Softmax { x, axis })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_checked("activation", value, self.nodes[x.0].requires_grad, Op::Act { x, kind })
    }

    pub fn softplus_op(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| softplus(v)).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_checked("softplus", value, self.nodes[x.0].requires_grad, Op::Softplus(x))
    }

    /// Depthwise causal convolution. `x` is L×d, `kernel` w×d, `bias` d; the
    /// input is implicitly left-padded with w−1 zeros so the output is L×d.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value, &self.nodes[bias.0].value);
        if tx.rank() != 2 || tk.rank() != 2 {
            return Err(Error::dimension("causal_conv1d", "input and kernel must be rank 2".to_string()));
        }
        let (l, d) = (tx.shape()[0], tx.shape()[1]);
        let w = tk.shape()[0];
        if tk.shape()[1] != d {
            return Err(Error::dimension(
                "causal_conv1d",
                format!("kernel features {} != input features {d}", tk.shape()[1]),
            ));
        }
        if tb.numel() != d {
            return Err(Error::dimension(
                "causal_conv1d",
                format!("bias length {} != features {d}", tb.numel()),
            ));
        }
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            for c in 0..d {
                let mut acc = tb.data()[c];
                for j in 0..w {
                    let s = t as isize - (w as isize - 1) + j as isize;
                    if s >= 0 {
                        acc += tk.data()[j * d + c] * tx.data()[s as usize * d + c];
                    }
                }
                out[t * d + c] = acc;
            }
        }
        let value = Tensor::from_parts(vec![l, d], out);
        self.push_checked(
            "causal_conv1d",
            value,
            self.any_requires(&[x, kernel, bias]),
            Op::CausalConv { x, kernel, bias },
        )
    }

    /// Broadcast a length-n bias over the trailing axis. The only broadcast
    /// the tape admits besides [`Tape::broadcast_col`].
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let n = *tx.shape().last().unwrap();
        if tb.numel() != n {
            return Err(Error::dimension(
                "add_bias",
                format!("bias length {} != trailing extent {n}", tb.numel()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_checked("add_bias", value, self.any_requires(&[x, bias]), Op::AddBias { x, bias })
    }

    /// Replicate an L×1 column across n columns.
    pub fn broadcast_col(&mut self, x: Var, n: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || tx.shape()[1] != 1 {
            return Err(Error::dimension(
                "broadcast_col",
                format!("expected L×1 input, got {:?}", tx.shape()),
            ));
        }
        let l = tx.shape()[0];
        let mut data = vec![0.0; l * n];
        for t in 0..l {
            let v = tx.data()[t];
            for j in 0..n {
                data[t * n + j] = v;
            }
        }
        let value = Tensor::from_parts(vec![l, n], data);
        self.push_checked("broadcast_col", value, self.nodes[x.0].requires_grad, Op::BroadcastCol { x })
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(Error::dimension("slice_cols", "input must be rank 2".to_string()));
        }
        let (l, m) = (tx.shape()[0], tx.shape()[1]);
        if start + len > m || len == 0 {
            return Err(Error::dimension(
                "slice_cols",
                format!("range {start}..{} out of {m} columns", start + len),
            ));
        }
        let mut data = vec![0.0; l * len];
        for t in 0..l {
            data[t * len..(t + 1) * len].copy_from_slice(&tx.data()[t * m + start..t * m + start + len]);
        }
        let value = Tensor::from_parts(vec![l, len], data);
        self.push_checked("slice_cols", value, self.nodes[x.0].requires_grad, Op::SliceCols { x, start })
    }

    /// Stack row vectors (each [d] or [1, d]) into an N×d matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::dimension("stack_rows", "no rows given".to_string()));
        }
        let d = self.nodes[rows[0].0].value.numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let tr = &self.nodes[r.0].value;
            if tr.numel() != d || tr.rank() > 2 || (tr.rank() == 2 && tr.shape()[0] != 1) {
                return Err(Error::dimension(
                    "stack_rows",
                    format!("row {i} has shape {:?}, expected a length-{d} row", tr.shape()),
                ));
            }
            data.extend_from_slice(tr.data());
        }
        let value = Tensor::from_parts(vec![rows.len(), d], data);
        let requires = self.any_requires(rows);
        self.push_checked("stack_rows", value, requires, Op::StackRows(rows.to_vec()))
    }

    /// Reverse a rank-2 tensor along its first axis.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(Error::dimension("reverse_rows", "input must be rank 2".to_string()));
        }
        let (l, d) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; l * d];
        for t in 0..l {
            data[t * d..(t + 1) * d].copy_from_slice(&tx.data()[(l - 1 - t) * d..(l - t) * d]);
        }
        let value = Tensor::from_parts(vec![l, d], data);
        self.push_checked("reverse_rows", value, self.nodes[x.0].requires_grad, Op::ReverseRows(x))
    }

    /// Mean over the first axis of an L×d tensor, yielding a 1×d row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(Error::dimension("mean_rows", "input must be rank 2".to_string()));
        }
        let (l, d) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; d];
        for t in 0..l {
            for j in 0..d {
                data[j] += tx.data()[t * d + j];
            }
        }
        for v in &mut data {
            *v /= l as f64;
        }
        let value = Tensor::from_parts(vec![1, d], data);
        self.push_checked("mean_rows", value, self.nodes[x.0].requires_grad, Op::MeanRows(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let value = Tensor::from_parts(vec![1], vec![tx.data().iter().sum()]);
        self.push_checked("sum", value, self.nodes[x.0].requires_grad, Op::Sum(x))
    }

    /// Mean absolute difference. Subgradient at exact zeros is 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if tp.shape() != tt.shape() {
            return Err(Error::dimension("l1_loss", format!("{:?} vs {:?}", tp.shape(), tt.shape())));
        }
        let n = tp.numel() as f64;
        let loss = tp.data().iter().zip(tt.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
        let value = Tensor::from_parts(vec![1], vec![loss]);
        self.push_checked("l1_loss", value, self.any_requires(&[pred, target]), Op::L1Loss { pred, target })
    }

    /// Per-position fusion of two L×N paths: out = w[0]·a + w[1]·b + bias.
    pub fn fuse_pair(&mut self, a: Var, b: Var, w: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dimension("fuse_pair", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let (tw, tbias) = (&self.nodes[w.0].value, &self.nodes[bias.0].value);
        if tw.numel() != 2 || tbias.numel() != 1 {
            return Err(Error::dimension(
                "fuse_pair",
                format!("weights must be [2] and bias [1], got {:?} and {:?}", tw.shape(), tbias.shape()),
            ));
        }
        let (w0, w1, b0) = (tw.data()[0], tw.data()[1], tbias.data()[0]);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| w0 * x + w1 * y + b0)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_checked(
            "fuse_pair",
            value,
            self.any_requires(&[a, b, w, bias]),
            Op::FusePair { a, b, w, bias },
        )
    }

    /// Scalar affine map of a whole tensor: out = w[0]·x + bias[0].
    pub fn affine_scalar(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[bias.0].value);
        if tw.numel() != 1 || tb.numel() != 1 {
            return Err(Error::dimension(
                "affine_scalar",
                format!("weight and bias must be scalars, got {:?} and {:?}", tw.shape(), tb.shape()),
            ));
        }
        let (w0, b0) = (tw.data()[0], tb.data()[0]);
        let data = tx.data().iter().map(|v| w0 * v + b0).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_checked(
            "affine_scalar",
            value,
            self.any_requires(&[x, w, bias]),
            Op::AffineScalar { x, w, bias },
        )
    }

    /// Record a custom operation whose forward value was computed by the caller.
    pub fn custom(&mut self, value: Tensor, inputs: Vec<Var>, op: Box<dyn CustomOp>) -> Result<Var> {
        let requires = self.any_requires(&inputs);
        let name = op.name();
        if let Some(bad) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(name, format!("non-finite output at flat index {bad}")));
        }
        Ok(self.push(value, requires, Op::Custom { inputs, op }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate across fan-out;
    /// every node with `requires_grad` ends up with a populated grad.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::dimension(
                "backward",
                format!("root must be scalar, got shape {:?}", self.nodes[root.0].value.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    let shape = self.nodes[i].value.shape().to_vec();
                    self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        delta(buf);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |buf| add_into(buf, g, 1.0));
                self.accumulate(grads, *b, |buf| add_into(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |buf| add_into(buf, g, 1.0));
                self.accumulate(grads, *b, |buf| add_into(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.accumulate(grads, *a, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += gv * db[k];
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += gv * da[k];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, |buf| add_into(buf, g, c));
            }
            Op::Exp(x) => {
                let out = self.nodes[i].value.data();
                self.accumulate(grads, *x, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += gv * out[k];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let bt = tb.transposed().expect("rank checked at record time");
                    let da = matmul_raw(g, bt.data(), m, n, k);
                    self.accumulate(grads, *a, |buf| add_into(buf, &da, 1.0));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let at = ta.transposed().expect("rank checked at record time");
                    let db = matmul_raw(at.data(), g, k, m, n);
                    self.accumulate(grads, *b, |buf| add_into(buf, &db, 1.0));
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                self.accumulate(grads, *x, |buf| {
                    for r in 0..n {
                        for c in 0..m {
                            buf[c * n + r] += g[r * m + c];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let shape = self.nodes[i].value.shape();
                let axis_len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                self.accumulate(grads, *x, |buf| {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let base = o * axis_len * inner + inn;
                            let mut dot = 0.0;
                            for a in 0..axis_len {
                                let idx = base + a * inner;
                                dot += g[idx] * y[idx];
                            }
                            for a in 0..axis_len {
                                let idx = base + a * inner;
                                buf[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::Act { x, kind } => {
                let dx = self.nodes[x.0].value.data();
                let kind = *kind;
                self.accumulate(grads, *x, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += gv * kind.derivative(dx[k]);
                    }
                });
            }
            Op::Softplus(x) => {
                let dx = self.nodes[x.0].value.data();
                self.accumulate(grads, *x, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += gv * sigmoid(dx[k]);
                    }
                });
            }
            Op::CausalConv { x, kernel, bias } => {
                let tx = &self.nodes[x.0].value;
                let tk = &self.nodes[kernel.0].value;
                let (l, d) = (tx.shape()[0], tx.shape()[1]);
                let w = tk.shape()[0];
                self.accumulate(grads, *x, |buf| {
                    for t in 0..l {
                        for c in 0..d {
                            let gv = g[t * d + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..w {
                                let s = t as isize - (w as isize - 1) + j as isize;
                                if s >= 0 {
                                    buf[s as usize * d + c] += gv * tk.data()[j * d + c];
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *kernel, |buf| {
                    for t in 0..l {
                        for c in 0..d {
                            let gv = g[t * d + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..w {
                                let s = t as isize - (w as isize - 1) + j as isize;
                                if s >= 0 {
                                    buf[j * d + c] += gv * tx.data()[s as usize * d + c];
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *bias, |buf| {
                    for t in 0..l {
                        for c in 0..d {
                            buf[c] += g[t * d + c];
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let n = *self.nodes[x.0].value.shape().last().unwrap();
                self.accumulate(grads, *x, |buf| add_into(buf, g, 1.0));
                self.accumulate(grads, *bias, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k % n] += gv;
                    }
                });
            }
            Op::BroadcastCol { x } => {
                let n = self.nodes[i].value.shape()[1];
                let l = self.nodes[i].value.shape()[0];
                self.accumulate(grads, *x, |buf| {
                    for t in 0..l {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[t * n + j];
                        }
                        buf[t] += s;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let m = self.nodes[x.0].value.shape()[1];
                let out_shape = self.nodes[i].value.shape();
                let (l, len) = (out_shape[0], out_shape[1]);
                let start = *start;
                self.accumulate(grads, *x, |buf| {
                    for t in 0..l {
                        for j in 0..len {
                            buf[t * m + start + j] += g[t * len + j];
                        }
                    }
                });
            }
            Op::StackRows(rows) => {
                let d = self.nodes[i].value.shape()[1];
                for (r, v) in rows.iter().enumerate() {
                    self.accumulate(grads, *v, |buf| add_into(buf, &g[r * d..(r + 1) * d], 1.0));
                }
            }
            Op::ReverseRows(x) => {
                let (l, d) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                self.accumulate(grads, *x, |buf| {
                    for t in 0..l {
                        for j in 0..d {
                            buf[(l - 1 - t) * d + j] += g[t * d + j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (l, d) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                let inv = 1.0 / l as f64;
                self.accumulate(grads, *x, |buf| {
                    for t in 0..l {
                        for j in 0..d {
                            buf[t * d + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |buf| {
                    for v in buf.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::L1Loss { pred, target } => {
                let (tp, tt) = (self.nodes[pred.0].value.data(), self.nodes[target.0].value.data());
                let scale = g[0] / tp.len() as f64;
                self.accumulate(grads, *pred, |buf| {
                    for (k, (p, t)) in tp.iter().zip(tt).enumerate() {
                        buf[k] += scale * sign0(p - t);
                    }
                });
                self.accumulate(grads, *target, |buf| {
                    for (k, (p, t)) in tp.iter().zip(tt).enumerate() {
                        buf[k] -= scale * sign0(p - t);
                    }
                });
            }
            Op::FusePair { a, b, w, bias } => {
                let (ta, tb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let tw = self.nodes[w.0].value.data();
                let (w0, w1) = (tw[0], tw[1]);
                self.accumulate(grads, *a, |buf| add_into(buf, g, w0));
                self.accumulate(grads, *b, |buf| add_into(buf, g, w1));
                self.accumulate(grads, *w, |buf| {
                    let mut s0 = 0.0;
                    let mut s1 = 0.0;
                    for (k, gv) in g.iter().enumerate() {
                        s0 += gv * ta[k];
                        s1 += gv * tb[k];
                    }
                    buf[0] += s0;
                    buf[1] += s1;
                });
                self.accumulate(grads, *bias, |buf| {
                    buf[0] += g.iter().sum::<f64>();
                });
            }
            Op::AffineScalar { x, w, bias } => {
                let tx = self.nodes[x.0].value.data();
                let w0 = self.nodes[w.0].value.data()[0];
                self.accumulate(grads, *x, |buf| add_into(buf, g, w0));
                self.accumulate(grads, *w, |buf| {
                    buf[0] += g.iter().zip(tx).map(|(gv, xv)| gv * xv).sum::<f64>();
                });
                self.accumulate(grads, *bias, |buf| {
                    buf[0] += g.iter().sum::<f64>();
                });
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = op.backward(g, &values);
                if input_grads.len() != inputs.len() {
                    return Err(Error::numeric(
                        op.name(),
                        format!("backward returned {} grads for {} inputs", input_grads.len(), inputs.len()),
                    ));
                }
                for (v, ig) in inputs.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        if ig.len() != self.nodes[v.0].value.numel() {
                            return Err(Error::numeric(
                                op.name(),
                                format!("grad length {} != input numel {}", ig.len(), self.nodes[v.0].value.numel()),
                            ));
                        }
                        self.accumulate(grads, *v, |buf| add_into(buf, &ig, 1.0));
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(buf: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(buf.len(), src.len());
    for (b, s) in buf.iter_mut().zip(src) {
        *b += s * scale;
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.numel()];
    let data = x.data();
    for o in 0..outer {
        for inn in 0..inner {
            let base = o * axis_len * inner + inn;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(data[base + a * inner]);
            }
            let mut denom = 0.0;
            for a in 0..axis_len {
                let e = (data[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                denom += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= denom;
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// x @ w + bias convenience: the linear layer every encoder head uses.
pub fn linear(tape: &mut Tape, x: Var, w: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, bias)
}
