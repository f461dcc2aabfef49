//! Dense and depthwise 2-D cross-correlation (no kernel flip).

use super::dense::Tensor;
use super::tape::{Op, Tape, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(op: &'static str, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err(op, "stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err(
                op,
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            h,
            w,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn col_range(&self, kx: usize) -> std::ops::Range<usize> {
        let (s, p, k) = (self.stride as isize, self.pad as isize, kx as isize);
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = (self.w as isize - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.clamp(0, self.ow as isize);
        (lo.min(hi) as usize)..(hi as usize)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// `out += kernel ⋆ input` for one input plane and one output plane.
fn correlate_plane(geo: &Geometry, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    for ky in 0..geo.kh {
        for kx in 0..geo.kw {
            let wv = kernel[ky * geo.kw + kx];
            let cols = geo.col_range(kx);
            for oy in 0..geo.oh {
                let Some(iy) = geo.in_row(oy, ky) else { continue };
                let orow = &mut out[oy * geo.ow..(oy + 1) * geo.ow];
                let irow = &input[iy * geo.w..(iy + 1) * geo.w];
                if geo.stride == 1 {
                    let off = kx as isize - geo.pad as isize;
                    for ox in cols.clone() {
                        orow[ox] += wv * irow[(ox as isize + off) as usize];
                    }
                } else {
                    for ox in cols.clone() {
                        orow[ox] += wv * irow[ox * geo.stride + kx - geo.pad];
                    }
                }
            }
        }
    }
}

/// Accumulates kernel gradient and (optionally) input gradient for one plane pair.
fn correlate_plane_backward(
    geo: &Geometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_kernel: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    for ky in 0..geo.kh {
        for kx in 0..geo.kw {
            let wv = kernel[ky * geo.kw + kx];
            let cols = geo.col_range(kx);
            let mut acc = 0.0;
            for oy in 0..geo.oh {
                let Some(iy) = geo.in_row(oy, ky) else { continue };
                let grow = &grad_out[oy * geo.ow..(oy + 1) * geo.ow];
                let irow = &input[iy * geo.w..(iy + 1) * geo.w];
                for ox in cols.clone() {
                    acc += grow[ox] * irow[ox * geo.stride + kx - geo.pad];
                }
                if let Some(gi) = grad_input.as_deref_mut() {
                    let girow = &mut gi[iy * geo.w..(iy + 1) * geo.w];
                    for ox in cols.clone() {
                        girow[ox * geo.stride + kx - geo.pad] += wv * grow[ox];
                    }
                }
            }
            grad_kernel[ky * geo.kw + kx] += acc;
        }
    }
}

fn conv_geometry(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    depthwise: bool,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(shape_err(op, format!("input {xs:?}, weight {ws:?} must be rank 4")));
    }
    let expected_in = if depthwise { 1 } else { xs[1] };
    if ws[1] != expected_in || (depthwise && ws[0] != xs[1]) {
        return Err(shape_err(op, format!("input {xs:?} incompatible with weight {ws:?}")));
    }
    Geometry::new(op, xs[2], xs[3], ws[2], ws[3], stride, padding)
}

fn check_bias(op: &'static str, tape: &Tape, b: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        tape.check(b)?;
        if tape.shape(b) != [channels] {
            return Err(shape_err(op, format!("bias {:?} for {channels} channels", tape.shape(b))));
        }
    }
    Ok(())
}

impl Tape {
    /// `x[B,Cin,H,W] ⋆ w[Cout,Cin,kh,kw] + b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xt, wt) = (self.value(x), self.value(w));
        let geo = conv_geometry("conv2d", xt, wt, false, stride, padding)?;
        let (batch, cin, cout) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
        check_bias("conv2d", self, b, cout)?;
        let (in_plane, out_plane, k) = (geo.h * geo.w, geo.oh * geo.ow, geo.kh * geo.kw);
        let mut out = vec![0.0; batch * cout * out_plane];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..batch {
            for co in 0..cout {
                let o = &mut out[(n * cout + co) * out_plane..][..out_plane];
                if let Some(bias) = &bias {
                    o.fill(bias[co]);
                }
                for ci in 0..cin {
                    let input = &xt.data()[(n * cin + ci) * in_plane..][..in_plane];
                    let kernel = &wt.data()[(co * cin + ci) * k..][..k];
                    correlate_plane(&geo, input, kernel, o);
                }
            }
        }
        let out = Tensor::new(&[batch, cout, geo.oh, geo.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// Per-channel convolution: `x[B,C,H,W]` with `w[C,1,kh,kw]` (groups = C).
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xt, wt) = (self.value(x), self.value(w));
        let geo = conv_geometry("depthwise_conv2d", xt, wt, true, stride, padding)?;
        let (batch, ch) = (xt.shape()[0], xt.shape()[1]);
        check_bias("depthwise_conv2d", self, b, ch)?;
        let (in_plane, out_plane, k) = (geo.h * geo.w, geo.oh * geo.ow, geo.kh * geo.kw);
        let mut out = vec![0.0; batch * ch * out_plane];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..batch {
            for c in 0..ch {
                let o = &mut out[(n * ch + c) * out_plane..][..out_plane];
                if let Some(bias) = &bias {
                    o.fill(bias[c]);
                }
                let input = &xt.data()[(n * ch + c) * in_plane..][..in_plane];
                correlate_plane(&geo, input, &wt.data()[c * k..][..k], o);
            }
        }
        let out = Tensor::new(&[batch, ch, geo.oh, geo.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::DepthwiseConv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let (batch, ch) = (g.shape()[0], g.shape()[1]);
    let plane = g.shape()[2] * g.shape()[3];
    let mut gb = vec![0.0; ch];
    for n in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            *acc += g.data()[(n * ch + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    Tensor::new(&[ch], gb).unwrap()
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
    need_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let geo = conv_geometry("conv2d", x, w, false, stride, padding).unwrap();
    let (batch, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let (in_plane, out_plane, k) = (geo.h * geo.w, geo.oh * geo.ow, geo.kh * geo.kw);
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = vec![0.0; w.numel()];
    for n in 0..batch {
        for co in 0..cout {
            let go = &g.data()[(n * cout + co) * out_plane..][..out_plane];
            for ci in 0..cin {
                let input = &x.data()[(n * cin + ci) * in_plane..][..in_plane];
                let kernel = &w.data()[(co * cin + ci) * k..][..k];
                let gk = &mut gw[(co * cin + ci) * k..][..k];
                let gi = gx.as_mut().map(|gx| &mut gx[(n * cin + ci) * in_plane..][..in_plane]);
                correlate_plane_backward(&geo, input, kernel, go, gk, gi);
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d).unwrap()),
        Tensor::new(w.shape(), gw).unwrap(),
        bias_grad(g),
    )
}

pub(crate) fn depthwise_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let geo = conv_geometry("depthwise_conv2d", x, w, true, stride, padding).unwrap();
    let (batch, ch) = (x.shape()[0], x.shape()[1]);
    let (in_plane, out_plane, k) = (geo.h * geo.w, geo.oh * geo.ow, geo.kh * geo.kw);
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    for n in 0..batch {
        for c in 0..ch {
            let go = &g.data()[(n * ch + c) * out_plane..][..out_plane];
            let input = &x.data()[(n * ch + c) * in_plane..][..in_plane];
            let gi = &mut gx[(n * ch + c) * in_plane..][..in_plane];
            correlate_plane_backward(&geo, input, &w.data()[c * k..][..k], go, &mut gw[c * k..][..k], Some(gi));
        }
    }
    (
        Tensor::new(x.shape(), gx).unwrap(),
        Tensor::new(w.shape(), gw).unwrap(),
        bias_grad(g),
    )
}
