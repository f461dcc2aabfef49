//! Elementwise arithmetic, matrix products and layout ops.

use super::dense::Tensor;
use super::tape::{map, zip, Op, Tape, Var};
use crate::error::{shape_err, Result};

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let out = map(self.value(a), |x| x * c);
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let out = map(self.value(a), |x| x + c);
        Ok(self.push(out, Op::AddScalar(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = map(self.value(a), sigmoid);
        Ok(self.push(out, Op::Sigmoid(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = map(self.value(a), f64::tanh);
        Ok(self.push(out, Op::Tanh(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = map(self.value(a), f64::exp);
        Ok(self.push(out, Op::Exp(a), &[a]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push(out, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `x[..., C] + b[C]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(shape_err("bias_add", format!("{xs:?} vs bias {bs:?}")));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(bias.len()) {
            for (v, b) in row.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        Ok(self.push(out, Op::BiasAdd(x, b), &[x, b]))
    }

    /// `x[B,C,H,W] * s[B,C,1,1]`, broadcasting `s` over the spatial grid.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        let (xs, ss) = (self.shape(x), self.shape(s));
        if xs.len() != 4 || ss != [xs[0], xs[1], 1, 1] {
            return Err(shape_err("channel_scale", format!("{xs:?} vs scale {ss:?}")));
        }
        let plane = xs[2] * xs[3];
        let scales = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, &c) in out.data_mut().chunks_mut(plane).zip(&scales) {
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        Ok(self.push(out, Op::ChannelScale(x, s), &[x, s]))
    }

    /// Batched matrix product `[.., M, P] @ [.., P, Q]`. The right operand may
    /// be a plain matrix shared across all leading batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = matmul_forward(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check(a)?;
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("bad permutation {perm:?} for rank {rank}")));
        }
        let out = permute_tensor(self.value(a), perm);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(shape_err("transpose", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x);
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("range {start}+{len} on axis {axis} of {shape:?}"),
            ));
        }
        let out = narrow_tensor(self.value(x), axis, start, len);
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        self.check(first)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            self.check(v)?;
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    p: usize,
    q: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatDims> {
    let err = || shape_err("matmul", format!("{a:?} @ {b:?}"));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, p) = (a[a.len() - 2], a[a.len() - 1]);
    let (p2, q) = (b[b.len() - 2], b[b.len() - 1]);
    if p != p2 {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_rhs = b_batch.iter().product::<usize>() == 1 && b.len() == 2;
    if !shared_rhs && a_batch != b_batch {
        return Err(err());
    }
    Ok(MatDims {
        batch: a_batch.iter().product(),
        m,
        p,
        q,
        shared_rhs,
    })
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.batch * d.m * d.q];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..d.batch {
        let a_off = bi * d.m * d.p;
        let b_off = if d.shared_rhs { 0 } else { bi * d.p * d.q };
        let o_off = bi * d.m * d.q;
        for i in 0..d.m {
            let row = &mut out[o_off + i * d.q..o_off + (i + 1) * d.q];
            for k in 0..d.p {
                let aik = ad[a_off + i * d.p + k];
                let brow = &bd[b_off + k * d.q..b_off + (k + 1) * d.q];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([d.m, d.q]);
    Tensor::new(&shape, out)
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    for bi in 0..d.batch {
        let a_off = bi * d.m * d.p;
        let b_off = if d.shared_rhs { 0 } else { bi * d.p * d.q };
        let g_off = bi * d.m * d.q;
        for i in 0..d.m {
            let grow = &gd[g_off + i * d.q..g_off + (i + 1) * d.q];
            for k in 0..d.p {
                let brow = &bd[b_off + k * d.q..b_off + (k + 1) * d.q];
                ga[a_off + i * d.p + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                let aik = ad[a_off + i * d.p + k];
                let gbrow = &mut gb[b_off + k * d.q..b_off + (k + 1) * d.q];
                for (o, &gv) in gbrow.iter_mut().zip(grow) {
                    *o += aik * gv;
                }
            }
        }
    }
    (
        Tensor::new(a.shape(), ga).unwrap(),
        Tensor::new(b.shape(), gb).unwrap(),
    )
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut index = vec![0usize; rank];
    let src = t.data();
    for _ in 0..t.numel() {
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).unwrap()
}

pub(crate) fn narrow_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(&out_shape, data).unwrap()
}

pub(crate) fn narrow_backward(in_shape: &[usize], g: &Tensor, axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(in_shape);
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let len = g.shape()[axis];
    for o in 0..outer {
        let dst = (o * in_shape[axis] + start) * inner;
        let src = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    out
}

pub(crate) fn channel_scale_backward(x: &Tensor, s: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let plane = x.shape()[2] * x.shape()[3];
    let mut gx = g.clone();
    let mut gs = vec![0.0; s.numel()];
    for (c, scale) in s.data().iter().enumerate() {
        let range = c * plane..(c + 1) * plane;
        gs[c] = g.data()[range.clone()]
            .iter()
            .zip(&x.data()[range.clone()])
            .map(|(a, b)| a * b)
            .sum();
        gx.data_mut()[range].iter_mut().for_each(|v| *v *= scale);
    }
    (gx, Tensor::new(s.shape(), gs).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * q];
        for i in 0..m {
            for j in 0..q {
                for k in 0..p {
                    c[i * q + j] += a[i * p + k] * b[k * q + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul_forward(&a, &b).unwrap();
        assert_eq!(c.data(), &naive_matmul(a.data(), b.data(), 2, 2, 2)[..]);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(&[2, 2], vec![0.3, -1.5, 2.0, 7.0]).unwrap();
        assert_eq!(matmul_forward(&i2, &m).unwrap(), m);
        let z = Tensor::zeros(&[2, 3]);
        let any = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.5);
        assert_eq!(matmul_forward(&z, &any).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new(Mode::Train);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] @ [2, 3]"), "{err}");
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        assert_eq!(permute_tensor(&p, &[1, 2, 0]), t);
    }

    #[test]
    fn activation_anchors() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.constant(Tensor::new(&[2], vec![0.0, -1.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(t).data()[0], 0.0);
        assert_eq!(tape.value(r).data()[1], 0.0);
    }

    #[test]
    fn elementwise_rejects_shape_mismatch() {
        let mut tape = Tape::new(Mode::Train);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }
}
