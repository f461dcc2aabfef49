use super::dense::Tensor;
use super::tape::{Mode, Op, Tape, Var};
use crate::error::{shape_err, Result};

/// Batch statistics observed during a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (falls back to the biased one for a single element).
    pub var: Vec<f64>,
}

impl Tape {
    /// Per-channel normalisation of `x[B,C,H,W]` followed by `gamma * x̂ + beta`.
    ///
    /// Training mode normalises with the batch statistics over `(B,H,W)` and
    /// returns them so the caller can fold them into its running averages.
    /// Evaluation mode uses `running_mean`/`running_var`.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xt = self.value(x);
        let [b, c, h, w] = *xt.shape() else {
            return Err(shape_err("batchnorm2d", format!("expected [B,C,H,W], got {:?}", xt.shape())));
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err("batchnorm2d", format!("{name} {:?} for {c} channels", self.shape(v))));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batchnorm2d", "running statistics length mismatch"));
        }
        let plane = h * w;
        let count = (b * plane) as f64;
        let batch_stats = self.mode() == Mode::Train;
        let data = xt.data();

        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for n in 0..b {
                    s += data[(n * c + ch) * plane..][..plane].iter().sum::<f64>();
                }
                let m = s / count;
                let mut sq = 0.0;
                for n in 0..b {
                    sq += data[(n * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gamma_v = self.value(gamma).data();
        let beta_v = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for n in 0..b {
            for ch in 0..c {
                let range = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                for i in range {
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gamma_v[ch] * xh + beta_v[ch];
                }
            }
        }
        let stats = batch_stats.then(|| {
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| v * correction).collect(),
            }
        });
        let out = Tensor::new(&[b, c, h, w], out)?;
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }
}

pub(crate) fn batchnorm_backward(
    shape: &[usize],
    gamma: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c) = (shape[0], shape[1]);
    let plane = shape[2] * shape[3];
    let count = (b * plane) as f64;
    let gd = g.data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            for i in base..base + plane {
                sum_g[ch] += gd[i];
                sum_gx[ch] += gd[i] * xhat[i];
            }
        }
    }
    let mut gx = vec![0.0; gd.len()];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let k = gamma.data()[ch] * inv_std[ch];
            for i in base..base + plane {
                gx[i] = if batch_stats {
                    k * (gd[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                } else {
                    k * gd[i]
                };
            }
        }
    }
    (
        Tensor::new(shape, gx).unwrap(),
        Tensor::new(&[c], sum_gx).unwrap(),
        Tensor::new(&[c], sum_g).unwrap(),
    )
}
