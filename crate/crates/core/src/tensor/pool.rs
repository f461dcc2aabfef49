use super::dense::Tensor;
use super::tape::{Op, Tape, Var};
use crate::error::{shape_err, Result};

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(shape_err(op, format!("expected [B,C,H,W], got {:?}", t.shape()))),
    }
}

impl Tape {
    /// Non-overlapping `k×k` max pooling with stride `k`. Ties go to the first
    /// element of the window in row-major order.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(x)?;
        let xt = self.value(x);
        let (b, c, h, w) = dims4("maxpool2d", xt)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("maxpool2d", format!("{h}x{w} not divisible by window {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let data = xt.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling: each pixel becomes a 2×2 block.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xt = self.value(x);
        let (b, c, h, w) = dims4("upsample2x", xt)?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            let src = &xt.data()[plane * h * w..][..h * w];
            let dst = &mut out[plane * oh * ow..][..oh * ow];
            for y in 0..oh {
                for xo in 0..ow {
                    dst[y * ow + xo] = src[(y / 2) * w + xo / 2];
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// Per-channel spatial mean, `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xt = self.value(x);
        let (b, c, h, w) = dims4("global_avg_pool", xt)?;
        let plane = h * w;
        let out: Vec<f64> = xt
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(&[b, c, 1, 1], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }
}

pub(crate) fn upsample2x_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = Tensor::zeros(in_shape);
    let planes = in_shape[0] * in_shape[1];
    for plane in 0..planes {
        let src = &g.data()[plane * oh * ow..][..oh * ow];
        let dst = &mut gx.data_mut()[plane * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    gx
}

pub(crate) fn global_avg_pool_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let plane = in_shape[2] * in_shape[3];
    let inv = 1.0 / plane as f64;
    let mut gx = Tensor::zeros(in_shape);
    for (chunk, gv) in gx.data_mut().chunks_mut(plane).zip(g.data()) {
        chunk.fill(gv * inv);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    #[test]
    fn maxpool_window_max_and_tie_break() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.leaf(Tensor::full(&[1, 1, 2, 2], 7.0));
        let y = tape.maxpool2d(c, 2).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(c).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_brute_force() {
        let data: Vec<f64> = (0..16).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
        let xv = Tensor::new(&[1, 1, 4, 4], data).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.constant(xv.clone());
        let y = tape.maxpool2d(x, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(xv.at(&[0, 0, 2 * oy + dy, 2 * ox + dx]));
                    }
                }
                assert_eq!(tape.value(y).at(&[0, 0, oy, ox]), m);
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.maxpool2d(x, 2).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(tape.value(y).sum(), 4.0 * tape.value(x).sum());
        let back = tape.maxpool2d(y, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn global_average() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }
}
