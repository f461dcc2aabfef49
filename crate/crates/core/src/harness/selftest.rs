//! Fast invariant suites run by the `selftest` subcommand.

use rand::Rng as _;

use super::checkpoint::{decode_state, encode_state};
use super::data::synth_dataset;
use super::pgm::{encode_pgm, parse_pgm, quantize};
use super::train::{TrainConfig, TrainState};
use crate::attention::{k_attention_forward, k_attention_forward_traced, KAttentionParams};
use crate::error::{Error, Result};
use crate::fusion::{fusion_forward, FusionLayerParams};
use crate::metrics::{dice, hd95, iou, BinaryMask};
use crate::msagf::{global_attention, msagf_fuse, spatial_attention, MsagfParams};
use crate::network::RichUNetConfig;
use crate::tensor::gradcheck::{check_gradients, store_of, uniform, weighted_sum, GradCheckOptions};
use crate::tensor::{seeded_rng, Mode, ParamStore, Rng, Session, Tensor, Var};

pub struct Suite {
    pub name: &'static str,
    pub run: fn() -> Result<String>,
}

pub const SUITES: &[Suite] = &[
    Suite { name: "gradients", run: gradients },
    Suite { name: "k_attention", run: attention },
    Suite { name: "residual", run: residual },
    Suite { name: "msagf", run: msagf },
    Suite { name: "metrics", run: metrics },
    Suite { name: "io", run: io },
];

fn fail(msg: String) -> Error {
    Error::Numerical(msg)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(fail(msg()))
    }
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Session, &[Var]) -> Result<Var>);

fn gradients() -> Result<String> {
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 3]], |s, v| s.tape.matmul(v[0], v[1])),
        ("conv2d", vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |s, v| {
            s.tape.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        ("depthwise", vec![vec![2, 2, 4, 4], vec![2, 1, 3, 3]], |s, v| {
            s.tape.depthwise_conv2d(v[0], v[1], None, 1, 1)
        }),
        ("batchnorm", vec![vec![2, 3, 2, 2], vec![3], vec![3]], |s, v| {
            let (rm, rv) = (vec![0.0; 3], vec![1.0; 3]);
            Ok(s.tape.batchnorm2d(v[0], v[1], v[2], &rm, &rv, 1e-5)?.0)
        }),
        ("softmax", vec![vec![3, 5]], |s, v| s.tape.softmax(v[0])),
        ("sigmoid*tanh", vec![vec![7], vec![7]], |s, v| {
            let a = s.tape.sigmoid(v[0])?;
            let b = s.tape.tanh(v[1])?;
            s.tape.mul(a, b)
        }),
        ("log_softmax", vec![vec![2, 3, 2, 2]], |s, v| s.tape.log_softmax_channels(v[0])),
        ("upsample+gap", vec![vec![1, 2, 2, 3]], |s, v| {
            let u = s.tape.upsample2x(v[0])?;
            s.tape.global_avg_pool(u)
        }),
    ];
    let mut worst = 0.0f64;
    for (i, (name, shapes, f)) in cases.iter().enumerate() {
        let mut rng = seeded_rng(100 + i as u64);
        let (store, ids) = store_of(shapes.iter().map(|sh| uniform(sh, &mut rng)).collect());
        let report = check_gradients(
            &store,
            |s| {
                let vars: Vec<Var> = ids.iter().map(|&id| s.param(id)).collect();
                let out = f(s, &vars)?;
                weighted_sum(s, out, 1)
            },
            &GradCheckOptions::default(),
        )?;
        ensure(report.passes(1e-4), || format!("{name}: max relative error {:.3e}", report.max_rel_err))?;
        worst = worst.max(report.max_rel_err);
    }
    let blocks = block_gradients()?;
    Ok(format!(
        "{} ops and 3 blocks, max relative error {:.2e}",
        cases.len(),
        worst.max(blocks)
    ))
}

fn block_gradients() -> Result<f64> {
    let opts = GradCheckOptions {
        max_coords_per_param: Some(6),
        ..GradCheckOptions::default()
    };
    let mut rng = seeded_rng(7);
    let mut store = ParamStore::new();
    let attn = KAttentionParams::new(&mut store, "a", 4, 2, 3, 0.2, &mut rng)?;
    let fusion = FusionLayerParams::new(&mut store, "f", 4, &mut rng)?;
    let gate = MsagfParams::new(&mut store, "m", 4, 2, &mut rng)?;
    let tokens = store.add_param("tokens", uniform(&[1, 5, 4], &mut rng));
    let grid = store.add_param("grid", uniform(&[2, 4, 2, 3], &mut rng));
    let other = store.add_param("other", uniform(&[2, 4, 2, 3], &mut rng));
    let report = check_gradients(
        &store,
        |s| {
            let t = s.param(tokens);
            let a = k_attention_forward(s, t, &attn)?;
            let g = s.param(grid);
            let f = fusion_forward(s, g, &fusion)?;
            let o = s.param(other);
            let m = msagf_fuse(s, f, o, &gate)?;
            let la = weighted_sum(s, a, 2)?;
            let lm = weighted_sum(s, m, 3)?;
            s.tape.add(la, lm)
        },
        &opts,
    )?;
    ensure(report.passes(1e-4), || format!("blocks: max relative error {:.3e}", report.max_rel_err))?;
    Ok(report.max_rel_err)
}

/// Dense multi-head attention with the residual, straight from the weights.
pub fn dense_attention_reference(x: &Tensor, store: &ParamStore, p: &KAttentionParams) -> Tensor {
    let [b, n, c] = *x.shape() else { panic!("tokens must be [B,N,C]") };
    let (h, dk) = (p.num_heads, p.head_dim());
    let proj = |w: &Tensor, bi: usize, i: usize, j: usize| -> f64 {
        (0..c).map(|m| x.at(&[bi, i, m]) * w.at(&[m, j])).sum()
    };
    let (wq, wk, wv, wo) = (store.param(p.w_q), store.param(p.w_k), store.param(p.w_v), store.param(p.w_o));
    let mut out = x.clone();
    for bi in 0..b {
        let q: Vec<Vec<f64>> = (0..n).map(|i| (0..c).map(|j| proj(wq, bi, i, j)).collect()).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|i| (0..c).map(|j| proj(wk, bi, i, j)).collect()).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|i| (0..c).map(|j| proj(wv, bi, i, j)).collect()).collect();
        let mut concat = vec![vec![0.0; c]; n];
        for head in 0..h {
            let cols = head * dk..(head + 1) * dk;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() * p.scale)
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in cols.clone() {
                    concat[i][d] = (0..n).map(|j| e[j] / z * v[j][d]).sum();
                }
            }
        }
        for i in 0..n {
            for j in 0..c {
                let y: f64 = (0..c).map(|m| concat[i][m] * wo.at(&[m, j])).sum();
                out.set(&[bi, i, j], x.at(&[bi, i, j]) + y);
            }
        }
    }
    out
}

fn attention() -> Result<String> {
    let mut rng = seeded_rng(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(1..=n);
        let mut store = ParamStore::new();
        let p = KAttentionParams::new(&mut store, "a", 4, 2, k, 0.0, &mut rng)?;
        let x = uniform(&[2, n, 4], &mut rng);
        let mut fwd_rng = seeded_rng(0);
        let mut s = Session::new(&store, Mode::Eval, &mut fwd_rng);
        let xv = s.input(x.clone());
        let (_, trace) = k_attention_forward_traced(&mut s, xv, &p)?;
        for row in s.tape.value(trace.weights).data().chunks(n) {
            let nonzero = row.iter().filter(|&&w| w != 0.0).count();
            let total: f64 = row.iter().sum();
            ensure(nonzero <= k && (total - 1.0).abs() <= 1e-12, || {
                format!("row with {nonzero} nonzeros (k = {k}) sums to {total}")
            })?;
        }
        let dense = KAttentionParams { topk: n, ..p.clone() };
        let y = k_attention_forward(&mut s, xv, &dense)?;
        worst = worst.max(s.tape.value(y).max_abs_diff(&dense_attention_reference(&x, &store, &p)));
    }
    ensure(worst <= 1e-12, || format!("k = N differs from dense attention by {worst:.3e}"))?;
    Ok(format!("20 instances, dense deviation {worst:.1e}"))
}

fn residual() -> Result<String> {
    let mut rng = seeded_rng(12);
    let mut store = ParamStore::new();
    let attn = KAttentionParams::new(&mut store, "a", 6, 3, 4, 0.0, &mut rng)?;
    let fusion = FusionLayerParams::new(&mut store, "f", 6, &mut rng)?;
    store.param_mut(attn.w_o).fill(0.0);
    for id in fusion.branch_params() {
        store.param_mut(id).fill(0.0);
    }
    let tokens = uniform(&[2, 9, 6], &mut rng);
    let grid = uniform(&[2, 6, 3, 3], &mut rng);
    let mut fwd_rng = seeded_rng(0);
    let mut s = Session::new(&store, Mode::Train, &mut fwd_rng);
    let t = s.input(tokens.clone());
    let a = k_attention_forward(&mut s, t, &attn)?;
    ensure(s.tape.value(a) == &tokens, || "zero attention branch changed its input".into())?;
    let g = s.input(grid.clone());
    let f = fusion_forward(&mut s, g, &fusion)?;
    ensure(s.tape.value(f) == &grid, || "zero fusion branch changed its input".into())?;
    Ok("zero branches reproduce inputs exactly".into())
}

fn msagf() -> Result<String> {
    let mut rng = seeded_rng(13);
    for _ in 0..20 {
        let c = 4 * rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let mut store = ParamStore::new();
        let p = MsagfParams::new(&mut store, "m", c, 4, &mut rng)?;
        let mut fwd_rng = seeded_rng(0);
        let mut s = Session::new(&store, Mode::Train, &mut fwd_rng);
        let a = uniform(&[2, c, h, w], &mut rng);
        let b = uniform(&[2, c, h, w], &mut rng);
        let (x1, x2) = (s.input(a.clone()), s.input(b.clone()));
        let wg = global_attention(&mut s, x1, x2, &p)?;
        ensure(s.tape.shape(wg) == [2, c, 1, 1], || "channel gate is not per-channel".into())?;
        let ws = spatial_attention(&mut s, x1, x2, &p)?;
        ensure(s.tape.value(ws).data().iter().all(|&v| v > 0.0 && v < 1.0), || {
            "spatial gate left (0, 1)".into()
        })?;
        let y = msagf_fuse(&mut s, x1, x2, &p)?;
        let bounded = s.tape.value(y).data().iter().zip(a.data().iter().zip(b.data())).all(|(y, (a, b))| y.abs() <= a.abs() + b.abs());
        ensure(bounded, || "fused output exceeds |x1| + |x2|".into())?;
    }
    Ok("20 instances, gates bounded".into())
}

fn brute_hd95(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let edge = |m: &BinaryMask| -> Vec<(f64, f64)> {
        let (h, w) = (m.height() as isize, m.width() as isize);
        let on = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if on(r, c) && !(on(r - 1, c) && on(r + 1, c) && on(r, c - 1) && on(r, c + 1)) {
                    out.push((r as f64, c as f64));
                }
            }
        }
        out
    };
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min))
            .collect();
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
    };
    let (ea, eb) = (edge(a), edge(b));
    directed(&ea, &eb).max(directed(&eb, &ea))
}

fn metrics() -> Result<String> {
    let mut rng = seeded_rng(14);
    for _ in 0..50 {
        let density = rng.random_range(0.05..0.6);
        let a = BinaryMask::from_fn(12, 12, |_, _| rng.random_bool(density));
        let b = BinaryMask::from_fn(12, 12, |_, _| rng.random_bool(density));
        let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count() as f64;
        let (na, nb) = (a.count() as f64, b.count() as f64);
        let d = dice(&a, &b)?;
        let want = if na + nb == 0.0 { 1.0 } else { 2.0 * inter / (na + nb) };
        ensure(d == want, || format!("dice {d} vs {want}"))?;
        let j = iou(&a, &b)?;
        ensure((j - d / (2.0 - d)).abs() < 1e-12, || format!("iou {j} vs dice {d}"))?;
        if na > 0.0 && nb > 0.0 {
            let (got, want) = (hd95(&a, &b)?, brute_hd95(&a, &b));
            ensure((got - want).abs() <= 1e-9, || format!("hd95 {got} vs brute force {want}"))?;
        }
    }
    Ok("50 random pairs match brute force".into())
}

fn io() -> Result<String> {
    let mut rng: Rng = seeded_rng(15);
    let raw: Vec<u8> = (0..35).map(|_| rng.random()).collect();
    let file = encode_pgm(5, 7, &raw);
    let (h, w, back) = quantize(&parse_pgm(&file)?)?;
    ensure(encode_pgm(h, w, &back) == file, || "pgm round trip changed bytes".into())?;

    let net = RichUNetConfig {
        stage_channels: [2, 4, 8],
        heads: 2,
        topk: 4,
        bottleneck_channels: 4,
        reduction: 2,
        ..RichUNetConfig::default()
    };
    let mut state = TrainState::new(&net, TrainConfig { learning_rate: 1e-3, batch_size: 2, ..TrainConfig::default() })?;
    state.train_step(&synth_dataset(2, 16, 16, 0)?)?;
    let bytes = encode_state(&state);
    ensure(encode_state(&decode_state(&bytes)?) == bytes, || "checkpoint round trip changed bytes".into())?;
    Ok("pgm and checkpoint round trips are byte-exact".into())
}

/// Runs every suite, writing one line per suite; returns whether all passed.
pub fn run_all(out: &mut dyn std::io::Write) -> std::io::Result<bool> {
    let mut ok = true;
    for suite in SUITES {
        match (suite.run)() {
            Ok(detail) => writeln!(out, "PASS {}: {detail}", suite.name)?,
            Err(e) => {
                ok = false;
                writeln!(out, "FAIL {}: {e}", suite.name)?;
            }
        }
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_suites_pass() {
        let mut out = Vec::new();
        let ok = super::run_all(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(ok, "{text}");
        assert_eq!(text.lines().count(), super::SUITES.len());
    }
}
