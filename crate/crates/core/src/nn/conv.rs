//! Direct 2-D convolution and transposed convolution (NCHW, no kernel flip).
//!
//! Work is split across `(sample, channel)` planes; within a plane every
//! output element accumulates its taps in a fixed order, so results are
//! bit-identical regardless of the number of worker threads.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` on each side; requires an odd kernel.
    Same,
    Explicit(usize),
}

impl Padding {
    fn resolve(self, k: usize) -> Result<usize> {
        match self {
            Padding::Explicit(p) => Ok(p),
            Padding::Same if k % 2 == 1 => Ok((k - 1) / 2),
            Padding::Same => Err(shape_err!("\"same\" padding needs an odd kernel, got {k}")),
        }
    }
}

/// Weights of a convolution layer. `weight` is `[out_ch, in_ch, kh, kw]`.
#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let &[out_ch, _, kh, kw] = weight.shape() else {
            return Err(shape_err!("conv weight must be rank 4, got {:?}", weight.shape()));
        };
        if bias.shape() != [out_ch] {
            return Err(shape_err!("conv bias must be [{out_ch}], got {:?}", bias.shape()));
        }
        if stride == 0 {
            return Err(config_err!("conv stride must be positive"));
        }
        padding.resolve(kh)?;
        padding.resolve(kw)?;
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, k: usize, padding: Padding, rng: &mut R) -> Result<Self> {
        let bound = (6.0 / (in_ch * k * k) as f64).sqrt();
        let weight = Tensor::uniform(&[out_ch, in_ch, k, k], -bound, bound, rng)?;
        Self::new(weight, Tensor::zeros(&[out_ch])?, 1, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

/// Indices `o` in `0..dst_len` for which `o * stride + k - pad` lies in `0..src_len`.
fn valid_range(dst_len: usize, src_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let (s, k, p) = (stride as i64, k as i64, pad as i64);
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let top = src_len as i64 - 1 + p - k;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / s + 1).min(dst_len as i64);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// `dst[o] += wv * src[o * stride + k - pad]` over a plane, for all valid `o`.
#[allow(clippy::too_many_arguments)]
fn gather_acc(
    dst: &mut [f64],
    (dh, dw): (usize, usize),
    src: &[f64],
    (sh, sw): (usize, usize),
    wv: f64,
    stride: usize,
    (ky, kx): (usize, usize),
    (ph, pw): (usize, usize),
) {
    let (y0, y1) = valid_range(dh, sh, stride, ky, ph);
    let (x0, x1) = valid_range(dw, sw, stride, kx, pw);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let sy = oy * stride + ky - ph;
        let drow = &mut dst[oy * dw + x0..oy * dw + x1];
        if stride == 1 {
            let sx0 = x0 + kx - pw;
            let srow = &src[sy * sw + sx0..sy * sw + sx0 + (x1 - x0)];
            for (d, s) in drow.iter_mut().zip(srow) {
                *d += wv * s;
            }
        } else {
            for (i, d) in drow.iter_mut().enumerate() {
                let sx = (x0 + i) * stride + kx - pw;
                *d += wv * src[sy * sw + sx];
            }
        }
    }
}

/// `dst[i * stride + k - pad] += wv * src[i]` over a plane, for all valid `i`.
#[allow(clippy::too_many_arguments)]
fn scatter_acc(
    dst: &mut [f64],
    (dh, dw): (usize, usize),
    src: &[f64],
    (sh, sw): (usize, usize),
    wv: f64,
    stride: usize,
    (ky, kx): (usize, usize),
    (ph, pw): (usize, usize),
) {
    let (y0, y1) = valid_range(sh, dh, stride, ky, ph);
    let (x0, x1) = valid_range(sw, dw, stride, kx, pw);
    if x0 >= x1 {
        return;
    }
    for sy in y0..y1 {
        let dy = sy * stride + ky - ph;
        let srow = &src[sy * sw + x0..sy * sw + x1];
        if stride == 1 {
            let dx0 = x0 + kx - pw;
            let drow = &mut dst[dy * dw + dx0..dy * dw + dx0 + (x1 - x0)];
            for (d, s) in drow.iter_mut().zip(srow) {
                *d += wv * s;
            }
        } else {
            for (i, s) in srow.iter().enumerate() {
                let dx = (x0 + i) * stride + kx - pw;
                dst[dy * dw + dx] += wv * s;
            }
        }
    }
}

/// `Σ_o small[o] * big[o * stride + k - pad]` over a plane.
#[allow(clippy::too_many_arguments)]
fn shifted_dot(
    small: &[f64],
    (mh, mw): (usize, usize),
    big: &[f64],
    (bh, bw): (usize, usize),
    stride: usize,
    (ky, kx): (usize, usize),
    (ph, pw): (usize, usize),
) -> f64 {
    let (y0, y1) = valid_range(mh, bh, stride, ky, ph);
    let (x0, x1) = valid_range(mw, bw, stride, kx, pw);
    let mut acc = 0.0;
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let by = y * stride + ky - ph;
        let srow = &small[y * mw + x0..y * mw + x1];
        if stride == 1 {
            let bx0 = x0 + kx - pw;
            let brow = &big[by * bw + bx0..by * bw + bx0 + (x1 - x0)];
            for (a, b) in srow.iter().zip(brow) {
                acc += a * b;
            }
        } else {
            for (i, a) in srow.iter().enumerate() {
                acc += a * big[by * bw + (x0 + i) * stride + kx - pw];
            }
        }
    }
    acc
}

fn conv_geom(x: &[usize], weight: &[usize], stride: usize, padding: Padding) -> Result<Geom> {
    let &[n, cin, h, w] = x else {
        return Err(shape_err!("conv2d input must be rank 4, got {x:?}"));
    };
    let &[cout, wcin, kh, kw] = weight else {
        return Err(shape_err!("conv2d weight must be rank 4, got {weight:?}"));
    };
    if wcin != cin {
        return Err(shape_err!("conv2d expects {wcin} input channels, got {cin}"));
    }
    if stride == 0 {
        return Err(config_err!("conv stride must be positive"));
    }
    let (ph, pw) = (padding.resolve(kh)?, padding.resolve(kw)?);
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(shape_err!(
            "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        ));
    }
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    Ok(Geom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        ph,
        pw,
        oh,
        ow,
    })
}

fn conv_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &Geom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, oc) = (idx / g.cout, idx % g.cout);
        if let Some(b) = bias {
            dst.fill(b[oc]);
        }
        for ic in 0..g.cin {
            let src = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weight[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                    gather_acc(dst, (g.oh, g.ow), src, (g.h, g.w), wv, g.stride, (ky, kx), (g.ph, g.pw));
                }
            }
        }
    });
    out
}

fn conv_backward_input_raw(grad: &[f64], weight: &[f64], g: &Geom) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut dx = vec![0.0; g.n * g.cin * plane];
    dx.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, ic) = (idx / g.cin, idx % g.cin);
        for oc in 0..g.cout {
            let src = &grad[(n * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weight[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                    scatter_acc(dst, (g.h, g.w), src, (g.oh, g.ow), wv, g.stride, (ky, kx), (g.ph, g.pw));
                }
            }
        }
    });
    dx
}

fn conv_backward_weight(grad: &[f64], x: &[f64], g: &Geom) -> Vec<f64> {
    let per_oc = g.cin * g.kh * g.kw;
    let mut dw = vec![0.0; g.cout * per_oc];
    dw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dst)| {
        for ic in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let gp = &grad[(n * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
                        let xp = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                        acc += shifted_dot(gp, (g.oh, g.ow), xp, (g.h, g.w), g.stride, (ky, kx), (g.ph, g.pw));
                    }
                    dst[(ic * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    dw
}

/// Per-channel sum of a `[n, c, plane]` buffer, samples in ascending order.
fn channel_sums(grad: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += grad[(s * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    out
}

struct Conv2dOp {
    geom: Geom,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = &self.geom;
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut out = vec![
            ctx.needs[0].then(|| conv_backward_input_raw(ctx.grad, w, g)),
            ctx.needs[1].then(|| conv_backward_weight(ctx.grad, x, g)),
        ];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| channel_sums(ctx.grad, g.n, g.cout, g.oh * g.ow)));
        }
        out
    }
}

/// Cross-correlation of `x: [n, cin, h, w]` with `weight: [cout, cin, kh, kw]`
/// plus optional per-channel `bias`.
pub fn conv2d(
    graph: &mut Graph,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let geom = conv_geom(graph.shape(x), graph.shape(weight), stride, padding)?;
    if let Some(b) = bias {
        if graph.shape(b) != [geom.cout] {
            return Err(shape_err!(
                "conv2d bias must be [{}], got {:?}",
                geom.cout,
                graph.shape(b)
            ));
        }
    }
    let data = conv_forward(
        graph.value(x).data(),
        graph.value(weight).data(),
        bias.map(|b| graph.value(b).data()),
        &geom,
    );
    let out = Tensor::from_vec(&[geom.n, geom.cout, geom.oh, geom.ow], data)?;
    let inputs: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
    Ok(graph.record(out, &inputs, Conv2dOp { geom }))
}

/// Gradient of `conv2d` with respect to its input, given the output gradient.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    input_hw: (usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, cout, oh, ow) = grad_out.dims4()?;
    let cin = weight.shape()[1];
    let geom = conv_geom(&[n, cin, input_hw.0, input_hw.1], weight.shape(), stride, padding)?;
    if geom.cout != cout || geom.oh != oh || geom.ow != ow {
        return Err(shape_err!(
            "output gradient {:?} does not match the convolution geometry",
            grad_out.shape()
        ));
    }
    let dx = conv_backward_input_raw(grad_out.data(), weight.data(), &geom);
    Tensor::from_vec(&[n, cin, input_hw.0, input_hw.1], dx)
}

// ---------------------------------------------------------------------------
// Transposed convolution

/// Geometry of a transposed convolution expressed as the convolution it is
/// the adjoint of: `h, w` are the (large) output extents, `oh, ow` the input.
fn transposed_geom(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Geom> {
    let &[n, cin, ih, iw] = x else {
        return Err(shape_err!("transposed_conv2d input must be rank 4, got {x:?}"));
    };
    let &[wcin, cout, kh, kw] = weight else {
        return Err(shape_err!("transposed_conv2d weight must be rank 4, got {weight:?}"));
    };
    if wcin != cin {
        return Err(shape_err!("transposed_conv2d expects {wcin} input channels, got {cin}"));
    }
    if stride == 0 {
        return Err(config_err!("conv stride must be positive"));
    }
    let full_h = (ih - 1) * stride + kh;
    let full_w = (iw - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(shape_err!("transposed_conv2d output would be empty"));
    }
    Ok(Geom {
        n,
        cin: cout,
        h: full_h - 2 * pad,
        w: full_w - 2 * pad,
        cout: cin,
        kh,
        kw,
        stride,
        ph: pad,
        pw: pad,
        oh: ih,
        ow: iw,
    })
}

struct TransposedConvOp {
    geom: Geom,
}

impl Backward for TransposedConvOp {
    fn name(&self) -> &'static str {
        "transposed_conv2d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        // The geometry is that of the adjoint convolution: its input is our
        // output and vice versa; its weight layout [cout_c, cin_c] equals ours.
        let g = &self.geom;
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut out = vec![
            ctx.needs[0].then(|| conv_forward(ctx.grad, w, None, g)),
            ctx.needs[1].then(|| conv_backward_weight(x, ctx.grad, g)),
        ];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| channel_sums(ctx.grad, g.n, g.cin, g.h * g.w)));
        }
        out
    }
}

/// Learned upsampling. `weight` is `[in_ch, out_ch, kh, kw]`; output extents
/// are `(in - 1) * stride + k - 2 * pad`, i.e. `stride × in` for `k = stride, pad = 0`.
pub fn transposed_conv2d(
    graph: &mut Graph,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let g = transposed_geom(graph.shape(x), graph.shape(weight), stride, pad)?;
    if let Some(b) = bias {
        if graph.shape(b) != [g.cin] {
            return Err(shape_err!(
                "transposed_conv2d bias must be [{}], got {:?}",
                g.cin,
                graph.shape(b)
            ));
        }
    }
    let xd = graph.value(x).data();
    let wd = graph.value(weight).data();
    let bd = bias.map(|b| graph.value(b).data());
    let plane = g.h * g.w;
    let mut data = vec![0.0; g.n * g.cin * plane];
    data.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, oc) = (idx / g.cin, idx % g.cin);
        if let Some(b) = bd {
            dst.fill(b[oc]);
        }
        for ic in 0..g.cout {
            let src = &xd[(n * g.cout + ic) * g.oh * g.ow..][..g.oh * g.ow];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wd[((ic * g.cin + oc) * g.kh + ky) * g.kw + kx];
                    scatter_acc(dst, (g.h, g.w), src, (g.oh, g.ow), wv, g.stride, (ky, kx), (g.ph, g.pw));
                }
            }
        }
    });
    let out = Tensor::from_vec(&[g.n, g.cin, g.h, g.w], data)?;
    let inputs: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
    Ok(graph.record(out, &inputs, TransposedConvOp { geom: g }))
}
