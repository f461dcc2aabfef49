//! Oracles and fixtures shared by the integration and acceptance tests.
//! Everything here is written directly from definitions, independently of
//! the library's own implementations.
#![allow(dead_code)]

use rand::Rng as _;
use rich_unet::attention::{k_attention_forward, KAttentionParams};
use rich_unet::fusion::{fusion_forward, FusionLayerParams};
use rich_unet::metrics::BinaryMask;
use rich_unet::msagf::{msagf_fuse, MsagfParams};
use rich_unet::tensor::gradcheck::{check_gradients, store_of, uniform, weighted_sum, GradCheckOptions, GradCheckReport};
use rich_unet::tensor::{seeded_rng, ParamStore, Rng, Session, Tensor, Var};
use rich_unet::{Result, RichUNet, RichUNetConfig};

pub type OpFn = fn(&mut Session, &[Var]) -> Result<Var>;
pub type GenFn = fn(&mut Rng) -> Vec<Tensor>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: GenFn,
    pub forward: OpFn,
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Uniform values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn pair(rng: &mut Rng) -> Vec<Tensor> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
    vec![uniform(&shape, rng), uniform(&shape, rng)]
}

fn single(rng: &mut Rng) -> Vec<Tensor> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
    vec![uniform(&shape, rng)]
}

fn single_away(rng: &mut Rng) -> Vec<Tensor> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
    vec![away_from_zero(&shape, rng)]
}

fn image(rng: &mut Rng) -> Vec<Tensor> {
    let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
    vec![uniform(&shape, rng)]
}

fn even_image(rng: &mut Rng) -> Vec<Tensor> {
    let shape = [dim(rng, 1, 2), dim(rng, 1, 3), 2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3)];
    vec![uniform(&shape, rng)]
}

fn image_and_channels(rng: &mut Rng) -> Vec<Tensor> {
    let c = dim(rng, 1, 3);
    let x = uniform(&[dim(rng, 1, 2), c, dim(rng, 1, 4), dim(rng, 1, 4)], rng);
    vec![x, uniform(&[c], rng)]
}

fn conv_inputs(rng: &mut Rng) -> Vec<Tensor> {
    let (cin, cout, k) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    let side = dim(rng, k, k + 3);
    vec![
        uniform(&[dim(rng, 1, 2), cin, side, side + 1], rng),
        uniform(&[cout, cin, k, k], rng),
        uniform(&[cout], rng),
    ]
}

fn depthwise_inputs(rng: &mut Rng) -> Vec<Tensor> {
    let c = dim(rng, 1, 3);
    vec![
        uniform(&[dim(rng, 1, 2), c, dim(rng, 2, 5), dim(rng, 2, 5)], rng),
        uniform(&[c, 1, 3, 3], rng),
        uniform(&[c], rng),
    ]
}

fn batchnorm_inputs(rng: &mut Rng) -> Vec<Tensor> {
    let c = dim(rng, 1, 3);
    let x = uniform(&[dim(rng, 2, 3), c, dim(rng, 1, 3), dim(rng, 2, 3)], rng);
    vec![x, uniform(&[c], rng), uniform(&[c], rng)]
}

fn matmul_inputs(rng: &mut Rng) -> Vec<Tensor> {
    let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    if rng.random_bool(0.5) {
        vec![uniform(&[b, m, k], rng), uniform(&[k, n], rng)]
    } else {
        vec![uniform(&[b, m, k], rng), uniform(&[b, k, n], rng)]
    }
}

fn concat_inputs(rng: &mut Rng) -> Vec<Tensor> {
    let (a, c) = (dim(rng, 1, 3), dim(rng, 1, 3));
    vec![uniform(&[a, dim(rng, 1, 3), c], rng), uniform(&[a, dim(rng, 1, 3), c], rng)]
}

fn tokens(rng: &mut Rng) -> Vec<Tensor> {
    vec![uniform(&[dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 6)], rng)]
}

/// Every differentiable tape operation with a random-shape input generator.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", inputs: pair, forward: |s, v| s.tape.add(v[0], v[1]) },
        OpCase { name: "sub", inputs: pair, forward: |s, v| s.tape.sub(v[0], v[1]) },
        OpCase { name: "mul", inputs: pair, forward: |s, v| s.tape.mul(v[0], v[1]) },
        OpCase {
            name: "div",
            inputs: |rng| {
                let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
                vec![uniform(&shape, rng), away_from_zero(&shape, rng)]
            },
            forward: |s, v| s.tape.div(v[0], v[1]),
        },
        OpCase { name: "scale", inputs: single, forward: |s, v| s.tape.scale(v[0], -1.7) },
        OpCase { name: "add_scalar", inputs: single, forward: |s, v| s.tape.add_scalar(v[0], 0.3) },
        OpCase { name: "sigmoid", inputs: single, forward: |s, v| s.tape.sigmoid(v[0]) },
        OpCase { name: "tanh", inputs: single, forward: |s, v| s.tape.tanh(v[0]) },
        OpCase { name: "relu", inputs: single_away, forward: |s, v| s.tape.relu(v[0]) },
        OpCase { name: "exp", inputs: single, forward: |s, v| s.tape.exp(v[0]) },
        OpCase { name: "sum", inputs: single, forward: |s, v| s.tape.sum(v[0]) },
        OpCase { name: "mean", inputs: single, forward: |s, v| s.tape.mean(v[0]) },
        OpCase {
            name: "bias_add",
            inputs: |rng| {
                let c = dim(rng, 1, 4);
                vec![uniform(&[dim(rng, 1, 3), c], rng), uniform(&[c], rng)]
            },
            forward: |s, v| s.tape.bias_add(v[0], v[1]),
        },
        OpCase {
            name: "channel_scale",
            inputs: |rng| {
                let (b, c) = (dim(rng, 1, 2), dim(rng, 1, 3));
                vec![uniform(&[b, c, dim(rng, 1, 3), dim(rng, 1, 3)], rng), uniform(&[b, c, 1, 1], rng)]
            },
            forward: |s, v| s.tape.channel_scale(v[0], v[1]),
        },
        OpCase { name: "matmul", inputs: matmul_inputs, forward: |s, v| s.tape.matmul(v[0], v[1]) },
        OpCase {
            name: "reshape",
            inputs: |rng| vec![uniform(&[2, dim(rng, 1, 3), 3], rng)],
            forward: |s, v| {
                let n = s.tape.value(v[0]).numel();
                s.tape.reshape(v[0], &[3, n / 3])
            },
        },
        OpCase { name: "permute", inputs: tokens, forward: |s, v| s.tape.permute(v[0], &[2, 0, 1]) },
        OpCase { name: "transpose", inputs: tokens, forward: |s, v| s.tape.transpose(v[0]) },
        OpCase {
            name: "narrow",
            inputs: |rng| vec![uniform(&[dim(rng, 1, 3), dim(rng, 2, 5)], rng)],
            forward: |s, v| {
                let n = s.tape.shape(v[0])[1];
                s.tape.narrow(v[0], 1, 1, n - 1)
            },
        },
        OpCase { name: "concat", inputs: concat_inputs, forward: |s, v| s.tape.concat(&[v[0], v[1]], 1) },
        OpCase {
            name: "conv2d",
            inputs: conv_inputs,
            forward: |s, v| s.tape.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        },
        OpCase {
            name: "conv2d_strided_padded",
            inputs: conv_inputs,
            forward: |s, v| s.tape.conv2d(v[0], v[1], None, 2, 1),
        },
        OpCase {
            name: "depthwise_conv2d",
            inputs: depthwise_inputs,
            forward: |s, v| s.tape.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1),
        },
        OpCase { name: "maxpool2d", inputs: even_image, forward: |s, v| s.tape.maxpool2d(v[0], 2) },
        OpCase { name: "upsample2x", inputs: image, forward: |s, v| s.tape.upsample2x(v[0]) },
        OpCase { name: "global_avg_pool", inputs: image, forward: |s, v| s.tape.global_avg_pool(v[0]) },
        OpCase {
            name: "batchnorm2d",
            inputs: batchnorm_inputs,
            forward: |s, v| {
                let c = s.tape.shape(v[1])[0];
                let (rm, rv) = (vec![0.1; c], vec![1.3; c]);
                Ok(s.tape.batchnorm2d(v[0], v[1], v[2], &rm, &rv, 1e-5)?.0)
            },
        },
        OpCase {
            name: "masked_softmax",
            inputs: single,
            forward: |s, v| {
                let n = s.tape.shape(v[0])[1];
                let numel = s.tape.value(v[0]).numel();
                // Keep index 0 of every row, drop every third element otherwise.
                let mask: Vec<bool> = (0..numel).map(|i| i % n == 0 || i % 3 != 1).collect();
                s.tape.masked_softmax(v[0], &mask)
            },
        },
        OpCase { name: "softmax", inputs: single, forward: |s, v| s.tape.softmax(v[0]) },
        OpCase { name: "log_softmax_channels", inputs: image, forward: |s, v| s.tape.log_softmax_channels(v[0]) },
        OpCase {
            name: "dropout",
            inputs: single,
            forward: |s, v| s.tape.dropout(v[0], 0.4, s.rng),
        },
        OpCase {
            name: "bias_free_chain",
            inputs: image_and_channels,
            forward: |s, v| {
                let p = s.tape.global_avg_pool(v[0])?;
                let sig = s.tape.sigmoid(p)?;
                let scaled = s.tape.channel_scale(v[0], sig)?;
                let shape = s.tape.shape(v[0]).to_vec();
                let perm = s.tape.permute(scaled, &[0, 2, 3, 1])?;
                let b = s.tape.bias_add(perm, v[1])?;
                let back = s.tape.permute(b, &[0, 3, 1, 2])?;
                debug_assert_eq!(s.tape.shape(back), shape.as_slice());
                s.tape.tanh(back)
            },
        },
    ]
}

/// Worst relative error of `case` over `instances` random instances.
pub fn check_op(case: &OpCase, instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = seeded_rng(seed + i as u64);
        let (store, ids) = store_of((case.inputs)(&mut rng));
        let report = check_gradients(
            &store,
            |s| {
                let vars: Vec<Var> = ids.iter().map(|&id| s.param(id)).collect();
                let out = (case.forward)(s, &vars)?;
                weighted_sum(s, out, 99)
            },
            &GradCheckOptions {
                forward_seed: i as u64,
                ..GradCheckOptions::default()
            },
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

pub fn attention_instance(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let heads = dim(&mut rng, 1, 3);
    let c = heads * dim(&mut rng, 1, 2);
    let n = dim(&mut rng, 1, 6);
    let k = dim(&mut rng, 1, n + 1);
    let mut store = ParamStore::new();
    let p = KAttentionParams::new(&mut store, "attn", c, heads, k, 0.25, &mut rng)?;
    let x = store.add_param("x", uniform(&[dim(&mut rng, 1, 2), n, c], &mut rng));
    check_gradients(
        &store,
        |s| {
            let xv = s.param(x);
            let y = k_attention_forward(s, xv, &p)?;
            weighted_sum(s, y, seed)
        },
        &GradCheckOptions {
            forward_seed: seed,
            ..GradCheckOptions::default()
        },
    )
}

pub fn fusion_instance(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let c = dim(&mut rng, 1, 3);
    let mut store = ParamStore::new();
    let p = FusionLayerParams::new(&mut store, "fusion", c, &mut rng)?;
    let shape = [dim(&mut rng, 1, 2), c, dim(&mut rng, 1, 3), dim(&mut rng, 2, 3)];
    let x = store.add_param("x", uniform(&shape, &mut rng));
    check_gradients(
        &store,
        |s| {
            let xv = s.param(x);
            let y = fusion_forward(s, xv, &p)?;
            weighted_sum(s, y, seed)
        },
        &GradCheckOptions {
            forward_seed: seed,
            ..GradCheckOptions::default()
        },
    )
}

pub fn msagf_instance(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let r = dim(&mut rng, 1, 2);
    let c = r * dim(&mut rng, 1, 3);
    let mut store = ParamStore::new();
    let p = MsagfParams::new(&mut store, "msagf", c, r, &mut rng)?;
    let shape = [dim(&mut rng, 1, 2), c, dim(&mut rng, 1, 3), dim(&mut rng, 2, 3)];
    let x1 = store.add_param("x1", uniform(&shape, &mut rng));
    let x2 = store.add_param("x2", uniform(&shape, &mut rng));
    check_gradients(
        &store,
        |s| {
            let (a, b) = (s.param(x1), s.param(x2));
            let y = msagf_fuse(s, a, b, &p)?;
            weighted_sum(s, y, seed)
        },
        &GradCheckOptions {
            forward_seed: seed,
            ..GradCheckOptions::default()
        },
    )
}

pub const NETWORK_FLOOR: f64 = 1e-5;

/// Whole network on a 16×16 batch of two, sampling coordinates per tensor.
pub fn network_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let net = RichUNet::build(&RichUNetConfig::gradcheck(), &mut rng)?;
    let x = uniform(&[2, 1, 16, 16], &mut rng);
    check_gradients(
        net.store(),
        |s| {
            let xv = s.input(x.clone());
            let y = net.forward(s, xv)?;
            weighted_sum(s, y, seed)
        },
        &GradCheckOptions {
            max_coords_per_param: Some(4),
            forward_seed: seed,
            // Central differences on a loss of order 10 carry ~1e-9 absolute
            // roundoff; gradients below this floor are compared absolutely.
            floor: NETWORK_FLOOR,
            ..GradCheckOptions::default()
        },
    )
}

/// Dense multi-head attention plus residual computed with plain loops.
pub fn dense_attention(x: &Tensor, store: &ParamStore, p: &KAttentionParams) -> Tensor {
    let [b, n, c] = *x.shape() else { panic!("tokens must be [B,N,C]") };
    let dk = c / p.num_heads;
    let w = |id| store.param(id);
    let project = |m: &Tensor, bi: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..c).map(|j| (0..c).map(|l| x.at(&[bi, i, l]) * m.at(&[l, j])).sum()).collect())
            .collect()
    };
    let mut out = x.clone();
    for bi in 0..b {
        let (q, k, v) = (project(w(p.w_q), bi), project(w(p.w_k), bi), project(w(p.w_v), bi));
        let mut merged = vec![vec![0.0; c]; n];
        for h in 0..p.num_heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (h * dk..(h + 1) * dk).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in h * dk..(h + 1) * dk {
                    merged[i][d] = (0..n).map(|j| e[j] / z * v[j][d]).sum();
                }
            }
        }
        for i in 0..n {
            for j in 0..c {
                let y: f64 = (0..c).map(|l| merged[i][l] * w(p.w_o).at(&[l, j])).sum();
                out.set(&[bi, i, j], x.at(&[bi, i, j]) + y);
            }
        }
    }
    out
}

/// Boundary pixels by definition: foreground with a 4-neighbour that is
/// background or off the grid.
pub fn brute_boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let on = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if on(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !on(r + dr, c + dc)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

pub fn brute_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn brute_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    let union = a.data().iter().zip(b.data()).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Symmetric 95th-percentile (linear interpolation) boundary distance by
/// exhaustive pairwise search.
pub fn brute_hd95(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| ((r as f64 - r2 as f64).powi(2) + (c as f64 - c2 as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
    };
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    directed(&ba, &bb).max(directed(&bb, &ba))
}

/// Random mask with a per-pair density, sometimes empty.
pub fn random_mask(rng: &mut Rng, h: usize, w: usize) -> BinaryMask {
    let density = match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random_range(0.02..0.7),
    };
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(density))
}
