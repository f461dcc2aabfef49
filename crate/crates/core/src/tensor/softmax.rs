use rand::Rng as _;

use super::dense::Tensor;
use super::tape::{Mode, Op, Tape, Var};
use super::Rng;
use crate::error::{shape_err, Error, Result};

impl Tape {
    /// Softmax over the last axis where `mask == false` entries behave as −∞:
    /// they come out as exact zeros and never enter the normaliser.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        self.check(logits)?;
        let xt = self.value(logits);
        if mask.len() != xt.numel() {
            return Err(shape_err(
                "masked_softmax",
                format!("mask of {} entries for {:?}", mask.len(), xt.shape()),
            ));
        }
        let n = *xt.shape().last().unwrap();
        let mut out = vec![0.0; xt.numel()];
        for (row, ((xs, ms), os)) in xt
            .data()
            .chunks(n)
            .zip(mask.chunks(n))
            .zip(out.chunks_mut(n))
            .enumerate()
        {
            let max = xs
                .iter()
                .zip(ms)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Param(format!("masked_softmax: row {row} is fully masked")));
            }
            let mut z = 0.0;
            for ((&x, &m), o) in xs.iter().zip(ms).zip(os.iter_mut()) {
                if m {
                    *o = (x - max).exp();
                    z += *o;
                }
            }
            os.iter_mut().for_each(|o| *o /= z);
        }
        let out = Tensor::new(xt.shape(), out)?;
        Ok(self.push(out, Op::MaskedSoftmax(logits), &[logits]))
    }

    /// Plain softmax over the last axis.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let mask = vec![true; self.value(logits).numel()];
        self.masked_softmax(logits, &mask)
    }

    /// Log-softmax over axis 1 of `[B,K,...]` (the class axis of a logit map).
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xt = self.value(x);
        if xt.rank() < 2 {
            return Err(shape_err("log_softmax_channels", format!("rank {} < 2", xt.rank())));
        }
        let (b, k) = (xt.shape()[0], xt.shape()[1]);
        let inner: usize = xt.shape()[2..].iter().product();
        let d = xt.data();
        let mut out = vec![0.0; d.len()];
        for n in 0..b {
            let base = n * k * inner;
            for s in 0..inner {
                let max = (0..k).map(|c| d[base + c * inner + s]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (d[base + c * inner + s] - max).exp()).sum::<f64>().ln();
                for c in 0..k {
                    out[base + c * inner + s] = d[base + c * inner + s] - lse;
                }
            }
        }
        let out = Tensor::new(xt.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`. Evaluation
    /// mode, or `rate == 0`, returns `x` untouched.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 || self.mode() == Mode::Eval {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xt = self.value(x);
        let out: Vec<f64> = xt.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let out = Tensor::new(xt.shape(), out)?;
        Ok(self.push(out, Op::Dropout { x, scale }, &[x]))
    }
}

/// Softmax backward given the forward output `y` (last axis).
pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut gx = vec![0.0; y.numel()];
    for ((ys, gs), out) in y.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(ys).zip(gs) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), gx).unwrap()
}

pub(crate) fn log_softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let (b, k) = (y.shape()[0], y.shape()[1]);
    let inner: usize = y.shape()[2..].iter().product();
    let (yd, gd) = (y.data(), g.data());
    let mut gx = vec![0.0; yd.len()];
    for n in 0..b {
        let base = n * k * inner;
        for s in 0..inner {
            let gsum: f64 = (0..k).map(|c| gd[base + c * inner + s]).sum();
            for c in 0..k {
                let i = base + c * inner + s;
                gx[i] = gd[i] - yd[i].exp() * gsum;
            }
        }
    }
    Tensor::new(y.shape(), gx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn masked_softmax_anchors() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let y = tape.masked_softmax(a, &[true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let b = tape.constant(Tensor::new(&[2], vec![5.0, 2.0]).unwrap());
        let y = tape.masked_softmax(b, &[true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
        assert!(tape.masked_softmax(b, &[false, false]).is_err());
    }

    #[test]
    fn dropout_rate_contracts() {
        let mut rng = seeded_rng(1);
        let mut train = Tape::new(Mode::Train);
        let x = train.constant(Tensor::ones(&[10]));
        assert_eq!(train.dropout(x, 0.0, &mut rng).unwrap(), x);
        assert!(train.dropout(x, 1.0, &mut rng).is_err());
        let mut eval = Tape::new(Mode::Eval);
        let x = eval.constant(Tensor::ones(&[10]));
        assert_eq!(eval.dropout(x, 0.7, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_drop_fraction() {
        let mut rng = seeded_rng(99);
        let mut tape = Tape::new(Mode::Train);
        let x = tape.constant(Tensor::ones(&[100_000]));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let dropped = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = dropped as f64 / 1e5;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn uniform_log_softmax_is_minus_ln_k() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.3));
        let y = tape.log_softmax_channels(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }
}
