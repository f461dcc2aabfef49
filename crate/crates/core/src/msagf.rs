//! MSAGF (multi-scale adaptive gated fusion) of two same-shape feature maps.
//!
//! Both gates read the shared context `x1 + x2`: a channel gate from its
//! global average through a bias-free `C -> C/r -> C` bottleneck, and a
//! spatial gate from a depthwise 3×3 convolution plus batch norm. The output
//! is `x1 ⊙ W_g + x2 ⊙ W_s`.

use crate::error::{Error, Result};
use crate::tensor::{he_uniform, BatchNormState, ParamId, ParamStore, Rng, Session, Var};

#[derive(Debug, Clone)]
pub struct MsagfParams {
    /// 1×1 conv `C -> C/r`, shape `[C/r, C, 1, 1]`.
    pub w_1: ParamId,
    /// 1×1 conv `C/r -> C`, shape `[C, C/r, 1, 1]`.
    pub w_2: ParamId,
    pub dw_kernel: ParamId,
    pub bn: BatchNormState,
    pub channels: usize,
    pub reduction: usize,
}

impl MsagfParams {
    pub const DEFAULT_REDUCTION: usize = 4;

    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "msagf: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let name = |n: &str| format!("{prefix}.{n}");
        let w_1 = store.add_param(name("w_1"), he_uniform(&[hidden, channels, 1, 1], channels, rng));
        let w_2 = store.add_param(name("w_2"), he_uniform(&[channels, hidden, 1, 1], hidden, rng));
        let dw_kernel = store.add_param(name("dw_kernel"), he_uniform(&[channels, 1, 3, 3], 9, rng));
        let bn = BatchNormState::new(store, &name("bn"), channels);
        Ok(Self {
            w_1,
            w_2,
            dw_kernel,
            bn,
            channels,
            reduction,
        })
    }
}

fn context(s: &mut Session, x1: Var, x2: Var, p: &MsagfParams) -> Result<Var> {
    let shape = s.tape.shape(x1);
    if shape.len() != 4 || shape[1] != p.channels {
        return Err(Error::Shape {
            op: "msagf",
            detail: format!("expected [B,{},H,W], got {shape:?}", p.channels),
        });
    }
    s.tape.add(x1, x2)
}

/// Channel gate `W_g = σ(W_2 ReLU(W_1 GAP(x1 + x2)))`, shape `[B,C,1,1]`.
pub fn global_attention(s: &mut Session, x1: Var, x2: Var, p: &MsagfParams) -> Result<Var> {
    let ctx = context(s, x1, x2, p)?;
    global_gate_from_context(s, ctx, p)
}

fn global_gate_from_context(s: &mut Session, ctx: Var, p: &MsagfParams) -> Result<Var> {
    let pooled = s.tape.global_avg_pool(ctx)?;
    let w_1 = s.param(p.w_1);
    let w_2 = s.param(p.w_2);
    let squeezed = s.tape.conv2d(pooled, w_1, None, 1, 0)?;
    let squeezed = s.tape.relu(squeezed)?;
    let excited = s.tape.conv2d(squeezed, w_2, None, 1, 0)?;
    s.tape.sigmoid(excited)
}

/// Spatial gate `W_s = σ(BN(DWConv(x1 + x2)))`, same shape as the inputs.
pub fn spatial_attention(s: &mut Session, x1: Var, x2: Var, p: &MsagfParams) -> Result<Var> {
    let ctx = context(s, x1, x2, p)?;
    spatial_gate_from_context(s, ctx, p)
}

fn spatial_gate_from_context(s: &mut Session, ctx: Var, p: &MsagfParams) -> Result<Var> {
    let kernel = s.param(p.dw_kernel);
    let conv = s.tape.depthwise_conv2d(ctx, kernel, None, 1, 1)?;
    let normed = p.bn.forward(s, conv)?;
    s.tape.sigmoid(normed)
}

/// `x1 ⊙ w_g + x2 ⊙ w_s` with `w_g` broadcast over the spatial grid.
pub fn gated_fusion(s: &mut Session, x1: Var, x2: Var, w_g: Var, w_s: Var) -> Result<Var> {
    let a = s.tape.channel_scale(x1, w_g)?;
    let b = s.tape.mul(x2, w_s)?;
    s.tape.add(a, b)
}

pub fn msagf_fuse(s: &mut Session, x1: Var, x2: Var, p: &MsagfParams) -> Result<Var> {
    let ctx = context(s, x1, x2, p)?;
    let w_g = global_gate_from_context(s, ctx, p)?;
    let w_s = spatial_gate_from_context(s, ctx, p)?;
    gated_fusion(s, x1, x2, w_g, w_s)
}
