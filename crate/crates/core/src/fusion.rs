//! Fusion-Layer: a gated recurrent scan over the spatial token sequence,
//! followed by depthwise convolution, batch norm, ReLU and a residual add.
//!
//! The recurrence is the two-gate product
//! `H_t = σ(X_t W_f + H_{t-1} U_f + b_f) ⊙ tanh(X_t W_c + H_{t-1} U_c + b_c)`
//! with `H_0 = 0` and no separate cell state. Tokens are the pixels of the
//! feature map in row-major order.

use crate::error::{Error, Result};
use crate::tensor::{he_uniform, orthogonal, BatchNormState, ParamId, ParamStore, Rng, Session, Tensor, Var};

#[derive(Debug, Clone)]
pub struct FusionLayerParams {
    pub w_f: ParamId,
    pub u_f: ParamId,
    pub b_f: ParamId,
    pub w_c: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    /// Depthwise 3×3 filters `[C,1,3,3]`.
    pub dw_kernel: ParamId,
    pub bn: BatchNormState,
    pub dim: usize,
}

impl FusionLayerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("fusion_layer: zero channels".into()));
        }
        let name = |n: &str| format!("{prefix}.{n}");
        let w_f = store.add_param(name("w_f"), he_uniform(&[dim, dim], dim, rng));
        let u_f = store.add_param(name("u_f"), orthogonal(dim, rng));
        let b_f = store.add_param(name("b_f"), Tensor::zeros(&[dim]));
        let w_c = store.add_param(name("w_c"), he_uniform(&[dim, dim], dim, rng));
        let u_c = store.add_param(name("u_c"), orthogonal(dim, rng));
        let b_c = store.add_param(name("b_c"), Tensor::zeros(&[dim]));
        let w_g = store.add_param(name("w_g"), he_uniform(&[dim, dim], dim, rng));
        let b_g = store.add_param(name("b_g"), Tensor::zeros(&[dim]));
        let dw_kernel = store.add_param(name("dw_kernel"), he_uniform(&[dim, 1, 3, 3], 9, rng));
        let bn = BatchNormState::new(store, &name("bn"), dim);
        Ok(Self {
            w_f,
            u_f,
            b_f,
            w_c,
            u_c,
            b_c,
            w_g,
            b_g,
            dw_kernel,
            bn,
            dim,
        })
    }

    /// Every learnable tensor of the recurrent, gate and convolution branch.
    pub fn branch_params(&self) -> [ParamId; 9] {
        [
            self.w_f,
            self.u_f,
            self.b_f,
            self.w_c,
            self.u_c,
            self.b_c,
            self.w_g,
            self.b_g,
            self.dw_kernel,
        ]
    }
}

/// `[B,C,H,W] -> [B,H·W,C]`, tokens in row-major pixel order.
pub fn to_tokens(s: &mut Session, x: Var) -> Result<Var> {
    let [b, c, h, w] = four_dims(s, x, "to_tokens")?;
    let flat = s.tape.reshape(x, &[b, c, h * w])?;
    s.tape.permute(flat, &[0, 2, 1])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(s: &mut Session, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let (b, c) = match *s.tape.shape(tokens) {
        [b, n, c] if n == h * w => (b, c),
        ref other => {
            return Err(Error::Shape {
                op: "from_tokens",
                detail: format!("{other:?} does not hold a {h}x{w} grid"),
            })
        }
    };
    let chw = s.tape.permute(tokens, &[0, 2, 1])?;
    s.tape.reshape(chw, &[b, c, h, w])
}

fn four_dims(s: &Session, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *s.tape.shape(x) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref other => Err(Error::Shape {
            op,
            detail: format!("expected [B,C,H,W], got {other:?}"),
        }),
    }
}

/// Runs the recurrence over `x[B,N,C]` and returns all hidden states `[B,N,C]`.
pub fn lstm_scan(s: &mut Session, x: Var, p: &FusionLayerParams) -> Result<Var> {
    let (b, n) = match *s.tape.shape(x) {
        [b, n, c] if c == p.dim => (b, n),
        ref other => {
            return Err(Error::Shape {
                op: "lstm_scan",
                detail: format!("expected [B,N,{}], got {other:?}", p.dim),
            })
        }
    };
    let (w_f, u_f, b_f) = (s.param(p.w_f), s.param(p.u_f), s.param(p.b_f));
    let (w_c, u_c, b_c) = (s.param(p.w_c), s.param(p.u_c), s.param(p.b_c));
    let xf = s.tape.matmul(x, w_f)?;
    let xf = s.tape.bias_add(xf, b_f)?;
    let xc = s.tape.matmul(x, w_c)?;
    let xc = s.tape.bias_add(xc, b_c)?;

    let mut hidden: Option<Var> = None;
    let mut states = Vec::with_capacity(n);
    for t in 0..n {
        let ft = s.tape.narrow(xf, 1, t, 1)?;
        let mut ft = s.tape.reshape(ft, &[b, p.dim])?;
        let ct = s.tape.narrow(xc, 1, t, 1)?;
        let mut ct = s.tape.reshape(ct, &[b, p.dim])?;
        // H_0 = 0, so the recurrent terms only start at the second step.
        if let Some(h) = hidden {
            let hf = s.tape.matmul(h, u_f)?;
            ft = s.tape.add(ft, hf)?;
            let hc = s.tape.matmul(h, u_c)?;
            ct = s.tape.add(ct, hc)?;
        }
        let forget = s.tape.sigmoid(ft)?;
        let candidate = s.tape.tanh(ct)?;
        let h = s.tape.mul(forget, candidate)?;
        states.push(s.tape.reshape(h, &[b, 1, p.dim])?);
        hidden = Some(h);
    }
    s.tape.concat(&states, 1)
}

/// Gate activations `G = σ(H W_g + b_g)`.
pub fn gate_activations(s: &mut Session, h: Var, p: &FusionLayerParams) -> Result<Var> {
    let (w_g, b_g) = (s.param(p.w_g), s.param(p.b_g));
    let pre = s.tape.matmul(h, w_g)?;
    let pre = s.tape.bias_add(pre, b_g)?;
    s.tape.sigmoid(pre)
}

/// `G ⊙ H`.
pub fn temporal_gate(s: &mut Session, h: Var, p: &FusionLayerParams) -> Result<Var> {
    let g = gate_activations(s, h, p)?;
    s.tape.mul(g, h)
}

/// Full layer on a feature map `[B,C,H,W]`; output has the same shape.
pub fn fusion_forward(s: &mut Session, x: Var, p: &FusionLayerParams) -> Result<Var> {
    let [_, c, h, w] = four_dims(s, x, "fusion_forward")?;
    if c != p.dim {
        return Err(Error::Shape {
            op: "fusion_forward",
            detail: format!("{c} channels, layer built for {}", p.dim),
        });
    }
    let tokens = to_tokens(s, x)?;
    let hidden = lstm_scan(s, tokens, p)?;
    let gated = temporal_gate(s, hidden, p)?;
    let grid = from_tokens(s, gated, h, w)?;
    let kernel = s.param(p.dw_kernel);
    let conv = s.tape.depthwise_conv2d(grid, kernel, None, 1, 1)?;
    let normed = p.bn.forward(s, conv)?;
    let y = s.tape.relu(normed)?;
    s.tape.add(y, x)
}
