//! K-Attention: multi-head self-attention where each query only attends to
//! its `k` highest-scoring keys.
//!
//! Scores are computed densely, every entry outside a row's top-k is masked
//! to −∞ before the softmax, then the weighted values of all heads are
//! concatenated, projected by `W_o` and added back onto the input.

use std::sync::Once;

use crate::error::{Error, Result};
use crate::tensor::{he_uniform, ParamId, ParamStore, Rng, Session, Tensor, Var};

#[derive(Debug, Clone)]
pub struct KAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub dim: usize,
    pub num_heads: usize,
    pub topk: usize,
    pub drop_rate: f64,
    /// Multiplier on `QKᵀ`; `1/sqrt(d_k)` unless overridden.
    pub scale: f64,
}

impl KAttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        topk: usize,
        drop_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "k_attention: channels {dim} not divisible by heads {num_heads}"
            )));
        }
        if topk == 0 {
            return Err(Error::Config("k_attention: topk must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&drop_rate) {
            return Err(Error::Config(format!("k_attention: drop_rate {drop_rate} outside [0, 1)")));
        }
        let mut linear = |name: &str| store.add_param(format!("{prefix}.{name}"), he_uniform(&[dim, dim], dim, rng));
        let (w_q, w_k, w_v, w_o) = (linear("w_q"), linear("w_k"), linear("w_v"), linear("w_o"));
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            dim,
            num_heads,
            topk,
            drop_rate,
            scale: 1.0 / ((dim / num_heads) as f64).sqrt(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("k_attention: scale {scale} must be > 0")));
        }
        self.scale = scale;
        Ok(self)
    }
}

fn token_dims(s: &Session, x: Var, p: &KAttentionParams) -> Result<(usize, usize)> {
    match *s.tape.shape(x) {
        [b, n, c] if c == p.dim => Ok((b, n)),
        ref other => Err(Error::Shape {
            op: "k_attention",
            detail: format!("expected [B,N,{}], got {other:?}", p.dim),
        }),
    }
}

/// `[B,N,C] -> [B,H,N,d_k]`
fn split_heads(s: &mut Session, t: Var, b: usize, n: usize, p: &KAttentionParams) -> Result<Var> {
    let t = s.tape.reshape(t, &[b, n, p.num_heads, p.head_dim()])?;
    s.tape.permute(t, &[0, 2, 1, 3])
}

/// Query, key and value projections in per-head layout `[B,H,N,d_k]`.
pub fn project_qkv(s: &mut Session, x: Var, p: &KAttentionParams) -> Result<(Var, Var, Var)> {
    let (b, n) = token_dims(s, x, p)?;
    let mut project = |w: ParamId| -> Result<Var> {
        let w = s.param(w);
        let t = s.tape.matmul(x, w)?;
        split_heads(s, t, b, n, p)
    };
    Ok((project(p.w_q)?, project(p.w_k)?, project(p.w_v)?))
}

static CLAMP_WARNING: Once = Once::new();

/// Indices of the `min(k, N)` largest entries of `row`, ascending. Ties go to
/// the lower index.
pub fn topk_select(row: &[f64], k: usize) -> Vec<usize> {
    if k > row.len() {
        CLAMP_WARNING.call_once(|| {
            log::warn!("top-k of {k} exceeds sequence length {}; clamping", row.len());
        });
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k.min(row.len()));
    order.sort_unstable();
    order
}

/// Row-wise top-k membership mask over the last axis of `scores`.
pub fn topk_mask(scores: &Tensor, k: usize) -> Vec<bool> {
    let n = *scores.shape().last().expect("non-empty shape");
    let mut mask = vec![false; scores.numel()];
    for (row, m) in scores.data().chunks(n).zip(mask.chunks_mut(n)) {
        for j in topk_select(row, k) {
            m[j] = true;
        }
    }
    mask
}

/// Intermediate values of one K-Attention pass, for inspection.
pub struct AttentionTrace {
    /// Scaled scores `[B,H,N,N]` before masking.
    pub scores: Var,
    pub mask: Vec<bool>,
    /// Row-stochastic attention weights after masking (before dropout).
    pub weights: Var,
}

pub fn k_attention_forward(s: &mut Session, x: Var, p: &KAttentionParams) -> Result<Var> {
    k_attention_forward_traced(s, x, p).map(|(y, _)| y)
}

pub fn k_attention_forward_traced(
    s: &mut Session,
    x: Var,
    p: &KAttentionParams,
) -> Result<(Var, AttentionTrace)> {
    let (b, n) = token_dims(s, x, p)?;
    let (q, k, v) = project_qkv(s, x, p)?;
    let kt = s.tape.transpose(k)?;
    let raw = s.tape.matmul(q, kt)?;
    let scores = s.tape.scale(raw, p.scale)?;
    let mask = topk_mask(s.tape.value(scores), p.topk);
    let weights = s.tape.masked_softmax(scores, &mask)?;
    let dropped = s.tape.dropout(weights, p.drop_rate, s.rng)?;
    let heads = s.tape.matmul(dropped, v)?;
    let merged = s.tape.permute(heads, &[0, 2, 1, 3])?;
    let merged = s.tape.reshape(merged, &[b, n, p.dim])?;
    let w_o = s.param(p.w_o);
    let projected = s.tape.matmul(merged, w_o)?;
    let out = s.tape.add(projected, x)?;
    Ok((out, AttentionTrace { scores, mask, weights }))
}
