//! Append-only operation record and reverse-mode gradient propagation.
//!
//! Every forward op pushes one [`Node`] holding its output value plus
//! whatever it needs for the backward rule. Inputs always refer to earlier
//! nodes, so walking the node list backwards is a valid topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use super::dense::Tensor;
use super::{conv, linalg, norm, pool, softmax};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Whether stochastic and batch-statistic ops run in training or evaluation form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) tape: u64,
    pub(crate) idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    BiasAdd(Var, Var),
    ChannelScale(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaskedSoftmax(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    LogSoftmax(Var),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape {
    id: u64,
    mode: Mode,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            mode,
            nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input (parameter or input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "var used on a foreign tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable is not recorded on this tape".into()));
        }
        Ok(())
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    /// Records `value` produced by `op`; the node needs a gradient if any input does.
    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.idx].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                for (input, contrib) in self.backward_node(node, &g) {
                    if !self.nodes[input.idx].requires_grad {
                        continue;
                    }
                    match &mut grads[input.idx] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.idx].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |x| -x))],
            Op::Mul(a, b) => vec![(*a, zip(g, val(*b), |g, y| g * y)), (*b, zip(g, val(*a), |g, x| g * x))],
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = zip(g, y, |g, y| g / y);
                let mut gb = zip(g, x, |g, x| g * x);
                for (v, y) in gb.data_mut().iter_mut().zip(y.data()) {
                    *v = -*v / (y * y);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, map(g, |x| x * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Sigmoid(a) => vec![(*a, zip(g, out, |g, y| g * y * (1.0 - y)))],
            Op::Tanh(a) => vec![(*a, zip(g, out, |g, y| g * (1.0 - y * y)))],
            Op::Relu(a) => vec![(*a, zip(g, out, |g, y| if y > 0.0 { g } else { 0.0 }))],
            Op::Exp(a) => vec![(*a, zip(g, out, |g, y| g * y))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::BiasAdd(x, b) => {
                let c = val(*b).numel();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(val(*b).shape(), gb).unwrap())]
            }
            Op::ChannelScale(x, s) => {
                let (gx, gs) = linalg::channel_scale_backward(val(*x), val(*s), g);
                vec![(*x, gx), (*s, gs)]
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = linalg::matmul_backward(val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, linalg::permute_tensor(g, &inv))]
            }
            Op::Narrow { x, axis, start } => {
                vec![(*x, linalg::narrow_backward(val(*x).shape(), g, *axis, *start))]
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                xs.iter()
                    .map(|v| {
                        let len = val(*v).shape()[*axis];
                        let part = linalg::narrow_tensor(g, *axis, start, len);
                        start += len;
                        (*v, part)
                    })
                    .collect()
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let need_x = self.requires_grad(*x);
                let (gx, gw, gb) = conv::conv2d_backward(val(*x), val(*w), g, *stride, *padding, need_x);
                let mut res = vec![(*w, gw)];
                if let Some(gx) = gx {
                    res.push((*x, gx));
                }
                if let Some(b) = b {
                    res.push((*b, gb));
                }
                res
            }
            Op::DepthwiseConv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (gx, gw, gb) = conv::depthwise_backward(val(*x), val(*w), g, *stride, *padding);
                let mut res = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    res.push((*b, gb));
                }
                res
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                vec![(*x, gx)]
            }
            Op::Upsample2x(x) => vec![(*x, pool::upsample2x_backward(val(*x).shape(), g))],
            Op::GlobalAvgPool(x) => vec![(*x, pool::global_avg_pool_backward(val(*x).shape(), g))],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (gx, gg, gb) =
                    norm::batchnorm_backward(val(*x).shape(), val(*gamma), xhat, inv_std, *batch_stats, g);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::MaskedSoftmax(x) => vec![(*x, softmax::softmax_backward(out, g))],
            Op::Dropout { x, scale } => {
                let data = g.data().iter().zip(scale).map(|(g, s)| g * s).collect();
                vec![(*x, Tensor::new(g.shape(), data).unwrap())]
            }
            Op::LogSoftmax(x) => vec![(*x, softmax::log_softmax_backward(out, g))],
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by recorded variable.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

pub(crate) fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape(), data).unwrap()
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}
