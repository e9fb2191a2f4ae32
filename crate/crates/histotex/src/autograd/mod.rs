//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded in creation order on a [`Tape`]; every node's
//! inputs were pushed earlier, so the tape is its own topological order.
//! [`Tape::backward`] walks it once in reverse, summing gradients into
//! shared inputs. Execution is single-threaded and every reduction runs in
//! a fixed order, so results are bit-identical across runs.
//!
//! ```
//! use histotex::autograd::Tape;
//! use histotex::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(5.0), true);
//! let y = tape.square(x); // y = x^2
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[10.0]);
//! ```

mod check;
mod dense;
mod image;

pub use check::grad_check;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Pooling flavor for [`Tape::pool2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

pub(crate) enum Op {
    Leaf,
    Relu(Var),
    Exp(Var),
    /// Test hook: exp with a deliberately wrong backward rule, used by the
    /// verification suite's negative check. Never use in real models.
    ExpFaulty(Var),
    Square(Var),
    Neg(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, Elem),
    MeanAll(Var),
    Transpose2(Var),
    Reshape(Var),
    Concat2(Var, Var),
    RepeatChannels {
        x: Var,
        times: usize,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    ChannelScale {
        x: Var,
        scale: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Pool2d {
        input: Var,
        kind: PoolKind,
        kernel: (usize, usize),
        stride: (usize, usize),
        /// Flat input index of the max per output cell (max pooling only).
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<Elem>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        train: bool,
        xhat: Vec<Elem>,
        inv_std: Vec<Elem>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Vec<Elem>>,
    /// True when a requires_grad leaf is reachable below this node.
    pub(crate) needs_grad: bool,
    pub(crate) op: Op,
}

/// Recording tape. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. `requires_grad` marks it as a gradient
    /// target for [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if one was
    /// computed.
    pub fn grad(&self, v: Var) -> Option<&[Elem]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Finite-value audit: the first node holding a NaN/Inf whose inputs
    /// were all finite, if any. Forward ops on finite, well-scaled inputs
    /// must stay finite; the verification suite runs this after its forward
    /// passes (training instead reports divergence through the loss).
    pub fn check_finite(&self) -> Option<String> {
        for (id, node) in self.nodes.iter().enumerate() {
            if node.value.is_finite() {
                continue;
            }
            let inputs_finite = op_inputs(&node.op)
                .iter()
                .all(|v| self.nodes[v.0].value.is_finite());
            if inputs_finite {
                return Some(format!("node {} ({})", id, op_name(&node.op)));
            }
        }
        None
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Var {
        let out = unary_map(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = unary_map(self.value(x), Elem::exp);
        let needs = self.needs(x);
        self.push(out, Op::Exp(x), needs)
    }

    #[doc(hidden)]
    pub fn exp_faulty(&mut self, x: Var) -> Var {
        let out = unary_map(self.value(x), Elem::exp);
        let needs = self.needs(x);
        self.push(out, Op::ExpFaulty(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = unary_map(self.value(x), |v| v * v);
        let needs = self.needs(x);
        self.push(out, Op::Square(x), needs)
    }

    pub fn negate(&mut self, x: Var) -> Var {
        let out = unary_map(self.value(x), |v| -v);
        let needs = self.needs(x);
        self.push(out, Op::Neg(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = unary_map(self.value(x), |v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn scalar_mul(&mut self, x: Var, c: Elem) -> Var {
        let out = unary_map(self.value(x), |v| v * c);
        let needs = self.needs(x);
        self.push(out, Op::ScalarMul(x, c), needs)
    }

    // ── elementwise binary (identical shapes or scalar broadcast) ───────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary_map(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary_map(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary_map(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    // ── reductions and shape ops ────────────────────────────────────────

    /// Mean of all elements, as a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel() as Elem;
        let sum: Elem = t.data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(sum / n), Op::MeanAll(x), needs)
    }

    /// 2-D matrix transpose.
    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::Dim(format!(
                "transpose2 expects a 2-D tensor, got {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let out = Tensor::new(&[c, r], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Transpose2(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Concatenate two 2-D tensors along axis 1.
    pub fn concat2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::Dim(format!(
                "concat2 expects 2-D tensors with equal rows, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (rows, na, nb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * na..(r + 1) * na]);
            out.extend_from_slice(&tb.data()[r * nb..(r + 1) * nb]);
        }
        let out = Tensor::new(&[rows, na + nb], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat2(a, b), needs))
    }

    // ── channel-broadcast ops over [n, c, h, w] maps ────────────────────

    /// Replicate every channel `times` times; output channel `c*times + j`
    /// is a copy of input channel `c`.
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = shape4(t, "repeat_channels")?;
        if times == 0 {
            return Err(Error::Config("repeat_channels with times = 0".into()));
        }
        let mut out = Tensor::zeros(&[n, c * times, h, w]);
        let plane = h * w;
        for b in 0..n {
            for ci in 0..c {
                let src = &t.data()[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                for j in 0..times {
                    let k = ci * times + j;
                    out.data_mut()[((b * c * times) + k) * plane..][..plane]
                        .copy_from_slice(src);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::RepeatChannels { x, times }, needs))
    }

    /// Add a per-channel bias: `out[b,k,y,x] = x[b,k,y,x] + bias[k]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = shape4(t, "channel_bias")?;
        let bt = self.value(bias);
        if bt.shape() != [c] {
            return Err(Error::Dim(format!(
                "channel_bias expects bias of shape [{}], got {:?}",
                c,
                bt.shape()
            )));
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let plane = h * w;
        {
            let xd = t.data();
            let bd = bt.data();
            let od = out.data_mut();
            for b in 0..n {
                for k in 0..c {
                    let off = (b * c + k) * plane;
                    let bk = bd[k];
                    for i in 0..plane {
                        od[off + i] = xd[off + i] + bk;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::ChannelBias { x, bias }, needs))
    }

    /// Scale each channel: `out[b,k,y,x] = x[b,k,y,x] * scale[k]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = shape4(t, "channel_scale")?;
        let st = self.value(scale);
        if st.shape() != [c] {
            return Err(Error::Dim(format!(
                "channel_scale expects scale of shape [{}], got {:?}",
                c,
                st.shape()
            )));
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let plane = h * w;
        {
            let xd = t.data();
            let sd = st.data();
            let od = out.data_mut();
            for b in 0..n {
                for k in 0..c {
                    let off = (b * c + k) * plane;
                    let sk = sd[k];
                    for i in 0..plane {
                        od[off + i] = xd[off + i] * sk;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(scale);
        Ok(self.push(out, Op::ChannelScale { x, scale }, needs))
    }

    // ── image / dense ops (implementations in submodules) ───────────────

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let out =
            image::conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, stride, padding }, needs))
    }

    pub fn pool2d(
        &mut self,
        input: Var,
        kind: PoolKind,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (out, argmax) = image::pool2d_forward(self.value(input), kind, kernel, stride)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Pool2d { input, kind, kernel, stride, argmax }, needs))
    }

    /// Per-channel spatial mean: `[n, c, h, w] -> [n, c]`.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let out = image::gap_forward(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool(input), needs))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = dense::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (out, probs) = dense::sce_forward(self.value(logits), labels)?;
        let needs = self.needs(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    /// Batch normalization using batch statistics. Returns the output node
    /// plus the per-channel batch mean and (biased) variance so callers can
    /// maintain running averages.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: Elem,
    ) -> Result<(Var, Vec<Elem>, Vec<Elem>)> {
        let (out, xhat, inv_std, mean, var) =
            dense::bn_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, train: true, xhat, inv_std }, needs);
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[Elem],
        var: &[Elem],
        eps: Elem,
    ) -> Result<Var> {
        let (out, xhat, inv_std) =
            dense::bn_eval_forward(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, train: false, xhat, inv_std }, needs))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Every reachable `requires_grad`
    /// leaf ends up holding d(root)/d(leaf). A tape records one backward;
    /// build a fresh tape to differentiate again.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; build a fresh tape".into(),
            ));
        }
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        self.backward_done = true;
        if !root_node.needs_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<Elem>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_op(&self.nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Relu(_) => "relu",
        Op::Exp(_) => "exp",
        Op::ExpFaulty(_) => "exp_faulty",
        Op::Square(_) => "square",
        Op::Neg(_) => "negate",
        Op::Sigmoid(_) => "sigmoid",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::ScalarMul(..) => "scalar_mul",
        Op::MeanAll(_) => "mean_all",
        Op::Transpose2(_) => "transpose2",
        Op::Reshape(_) => "reshape",
        Op::Concat2(..) => "concat2",
        Op::RepeatChannels { .. } => "repeat_channels",
        Op::ChannelBias { .. } => "channel_bias",
        Op::ChannelScale { .. } => "channel_scale",
        Op::Conv2d { .. } => "conv2d",
        Op::Pool2d { .. } => "pool2d",
        Op::GlobalAvgPool(_) => "global_average_pool",
        Op::Linear { .. } => "linear",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::BatchNorm { .. } => "batch_norm",
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Relu(x)
        | Op::Exp(x)
        | Op::ExpFaulty(x)
        | Op::Square(x)
        | Op::Neg(x)
        | Op::Sigmoid(x)
        | Op::ScalarMul(x, _)
        | Op::MeanAll(x)
        | Op::Transpose2(x)
        | Op::Reshape(x)
        | Op::GlobalAvgPool(x) => vec![*x],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat2(a, b) => vec![*a, *b],
        Op::RepeatChannels { x, .. } => vec![*x],
        Op::ChannelBias { x, bias } => vec![*x, *bias],
        Op::ChannelScale { x, scale } => vec![*x, *scale],
        Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
        Op::Pool2d { input, .. } => vec![*input],
        Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
    }
}

/// Ensure a gradient buffer exists for `v` and return it.
fn buf<'a>(grads: &'a mut [Option<Vec<Elem>>], nodes: &[Node], v: Var) -> &'a mut [Elem] {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[v.0].value.numel()]);
    }
    slot.as_mut().unwrap()
}

fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<Elem>>], id: usize, g: &[Elem]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Relu(x) => {
            if nodes[x.0].needs_grad {
                let xv = nodes[x.0].value.data();
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    // d relu / dx is 0 at exactly x == 0.
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Exp(x) => {
            if nodes[x.0].needs_grad {
                let yv = nodes[id].value.data();
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * yv[i];
                }
            }
        }
        Op::ExpFaulty(x) => {
            if nodes[x.0].needs_grad {
                let yv = nodes[id].value.data();
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    // Intentionally wrong by 5%: the negative gradient-check
                    // test must detect this.
                    gx[i] += g[i] * yv[i] * 1.05;
                }
            }
        }
        Op::Square(x) => {
            if nodes[x.0].needs_grad {
                let xv = nodes[x.0].value.data();
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * 2.0 * xv[i];
                }
            }
        }
        Op::Neg(x) => {
            if nodes[x.0].needs_grad {
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] -= g[i];
                }
            }
        }
        Op::Sigmoid(x) => {
            if nodes[x.0].needs_grad {
                let yv = nodes[id].value.data();
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            }
        }
        Op::ScalarMul(x, c) => {
            if nodes[x.0].needs_grad {
                let c = *c;
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * c;
                }
            }
        }
        Op::Add(a, b) => {
            if nodes[a.0].needs_grad {
                acc_broadcast(buf(grads, nodes, *a), g, 1.0);
            }
            if nodes[b.0].needs_grad {
                acc_broadcast(buf(grads, nodes, *b), g, 1.0);
            }
        }
        Op::Sub(a, b) => {
            if nodes[a.0].needs_grad {
                acc_broadcast(buf(grads, nodes, *a), g, 1.0);
            }
            if nodes[b.0].needs_grad {
                acc_broadcast(buf(grads, nodes, *b), g, -1.0);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if nodes[a.0].needs_grad {
                let ga = buf(grads, nodes, *a);
                acc_mul_broadcast(ga, g, bv);
            }
            if nodes[b.0].needs_grad {
                let gb = buf(grads, nodes, *b);
                acc_mul_broadcast(gb, g, av);
            }
        }
        Op::MeanAll(x) => {
            if nodes[x.0].needs_grad {
                let gx = buf(grads, nodes, *x);
                let n = gx.len() as Elem;
                let share = g[0] / n;
                for v in gx.iter_mut() {
                    *v += share;
                }
            }
        }
        Op::Transpose2(x) => {
            if nodes[x.0].needs_grad {
                let shape = nodes[x.0].value.shape();
                let (r, c) = (shape[0], shape[1]);
                let gx = buf(grads, nodes, *x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if nodes[x.0].needs_grad {
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i];
                }
            }
        }
        Op::Concat2(a, b) => {
            let na = nodes[a.0].value.shape()[1];
            let nb = nodes[b.0].value.shape()[1];
            let rows = nodes[a.0].value.shape()[0];
            if nodes[a.0].needs_grad {
                let ga = buf(grads, nodes, *a);
                for r in 0..rows {
                    for j in 0..na {
                        ga[r * na + j] += g[r * (na + nb) + j];
                    }
                }
            }
            if nodes[b.0].needs_grad {
                let gb = buf(grads, nodes, *b);
                for r in 0..rows {
                    for j in 0..nb {
                        gb[r * nb + j] += g[r * (na + nb) + na + j];
                    }
                }
            }
        }
        Op::RepeatChannels { x, times } => {
            if nodes[x.0].needs_grad {
                let shape = nodes[x.0].value.shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let times = *times;
                let plane = h * w;
                let gx = buf(grads, nodes, *x);
                for b in 0..n {
                    for ci in 0..c {
                        let dst = (b * c + ci) * plane;
                        for j in 0..times {
                            let src = (b * c * times + ci * times + j) * plane;
                            for i in 0..plane {
                                gx[dst + i] += g[src + i];
                            }
                        }
                    }
                }
            }
        }
        Op::ChannelBias { x, bias } => {
            let shape = nodes[x.0].value.shape();
            let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            if nodes[x.0].needs_grad {
                let gx = buf(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i];
                }
            }
            if nodes[bias.0].needs_grad {
                let gb = buf(grads, nodes, *bias);
                for b in 0..n {
                    for k in 0..c {
                        let off = (b * c + k) * plane;
                        let mut s = 0.0;
                        for i in 0..plane {
                            s += g[off + i];
                        }
                        gb[k] += s;
                    }
                }
            }
        }
        Op::ChannelScale { x, scale } => {
            let shape = nodes[x.0].value.shape();
            let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            if nodes[x.0].needs_grad {
                let sd = nodes[scale.0].value.data().to_vec();
                let gx = buf(grads, nodes, *x);
                for b in 0..n {
                    for k in 0..c {
                        let off = (b * c + k) * plane;
                        let sk = sd[k];
                        for i in 0..plane {
                            gx[off + i] += g[off + i] * sk;
                        }
                    }
                }
            }
            if nodes[scale.0].needs_grad {
                let xd = nodes[x.0].value.data();
                let mut sums = vec![0.0; c];
                for b in 0..n {
                    for k in 0..c {
                        let off = (b * c + k) * plane;
                        let mut s = 0.0;
                        for i in 0..plane {
                            s += g[off + i] * xd[off + i];
                        }
                        sums[k] += s;
                    }
                }
                let gs = buf(grads, nodes, *scale);
                for k in 0..c {
                    gs[k] += sums[k];
                }
            }
        }
        Op::Conv2d { input, weight, bias, stride, padding } => {
            image::conv2d_backward(nodes, grads, g, *input, *weight, *bias, *stride, *padding);
        }
        Op::Pool2d { input, kind, kernel, stride, argmax } => {
            image::pool2d_backward(nodes, grads, g, id, *input, *kind, *kernel, *stride, argmax);
        }
        Op::GlobalAvgPool(input) => {
            image::gap_backward(nodes, grads, g, *input);
        }
        Op::Linear { input, weight, bias } => {
            dense::linear_backward(nodes, grads, g, *input, *weight, *bias);
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            dense::sce_backward(nodes, grads, g, *logits, labels, probs);
        }
        Op::BatchNorm { x, gamma, beta, train, xhat, inv_std } => {
            dense::bn_backward(nodes, grads, g, *x, *gamma, *beta, *train, xhat, inv_std);
        }
    }
}

/// Accumulate `sign * g` into `dst`, summing when `dst` is a broadcast
/// scalar.
fn acc_broadcast(dst: &mut [Elem], g: &[Elem], sign: Elem) {
    if dst.len() == g.len() {
        for i in 0..g.len() {
            dst[i] += sign * g[i];
        }
    } else {
        debug_assert_eq!(dst.len(), 1);
        dst[0] += sign * g.iter().sum::<Elem>();
    }
}

/// Accumulate `g * other` into `dst` with scalar broadcast on either side.
fn acc_mul_broadcast(dst: &mut [Elem], g: &[Elem], other: &[Elem]) {
    if dst.len() == g.len() {
        if other.len() == g.len() {
            for i in 0..g.len() {
                dst[i] += g[i] * other[i];
            }
        } else {
            for i in 0..g.len() {
                dst[i] += g[i] * other[0];
            }
        }
    } else {
        debug_assert_eq!(dst.len(), 1);
        let mut s = 0.0;
        for i in 0..g.len() {
            s += g[i] * other[i];
        }
        dst[0] += s;
    }
}

fn unary_map(t: &Tensor, f: impl Fn(Elem) -> Elem) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape(), data).expect("unary_map shape")
}

fn binary_map(
    a: &Tensor,
    b: &Tensor,
    name: &str,
    f: impl Fn(Elem, Elem) -> Elem,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    } else if b.numel() == 1 {
        let s = b.data()[0];
        let data = a.data().iter().map(|&x| f(x, s)).collect();
        Tensor::new(a.shape(), data)
    } else if a.numel() == 1 {
        let s = a.data()[0];
        let data = b.data().iter().map(|&y| f(s, y)).collect();
        Tensor::new(b.shape(), data)
    } else {
        Err(Error::Dim(format!(
            "{} requires identical shapes or a scalar operand, got {:?} and {:?}",
            name,
            a.shape(),
            b.shape()
        )))
    }
}

pub(crate) fn shape4(t: &Tensor, op: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Dim(format!("{} expects a 4-D tensor, got {:?}", op, s)));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[Elem]) -> Tensor {
        Tensor::from_slice(v)
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[0.0]), false);
        let y = tape.exp(x);
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn backward_linear_chain() {
        // y = 3x at x = 2 -> dy/dx = 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.scalar_mul(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_square() {
        // y = x^2 at x = 5 -> dy/dx = 10
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0), true);
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[10.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_second_call() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        // z = x*a + x*b -> dz/dx = a + b
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let a = tape.leaf(Tensor::scalar(5.0), false);
        let b = tape.leaf(Tensor::scalar(7.0), false);
        let xa = tape.mul(x, a).unwrap();
        let xb = tape.mul(x, b).unwrap();
        let z = tape.add(xa, xb).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn scalar_broadcast_add_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0, 3.0]), true);
        let c = tape.leaf(Tensor::scalar(10.0), true);
        let y = tape.add(x, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 12.0, 13.0]);
        let m = tape.mean_all(y);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(c).unwrap(), &[1.0]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]), false);
        let b = tape.leaf(t(&[1.0, 2.0, 3.0]), false);
        assert!(matches!(tape.add(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn transpose_roundtrip_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let xt = tape.transpose2(x).unwrap();
        assert_eq!(tape.value(xt).shape(), &[3, 2]);
        assert_eq!(tape.value(xt).data(), &[1., 4., 2., 5., 3., 6.]);
        let m = tape.mean_all(xt);
        tape.backward(m).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn repeat_channels_layout() {
        // 1x2x1x2 input, times=3: output channel c*3+j copies channel c.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 1, 2], vec![1., 2., 10., 20.]).unwrap(), true);
        let y = tape.repeat_channels(x, 3).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 6, 1, 2]);
        assert_eq!(
            tape.value(y).data(),
            &[1., 2., 1., 2., 1., 2., 10., 20., 10., 20., 10., 20.]
        );
        let m = tape.mean_all(y);
        tape.backward(m).unwrap();
        // Each input cell feeds 3 replicas of 12 total cells.
        assert!(tape.grad(x).unwrap().iter().all(|&v| (v - 3.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap(), true);
        let b = tape.leaf(Tensor::new(&[2, 1], vec![9., 8.]).unwrap(), true);
        let y = tape.concat2(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert_eq!(tape.value(y).data(), &[1., 2., 9., 3., 4., 8.]);
        let m = tape.mean_all(y);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a).unwrap().len(), 4);
        assert_eq!(tape.grad(b).unwrap().len(), 2);
    }
}
