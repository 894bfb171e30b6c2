//! Spatial and channel-wise pooling.

use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Routes each output gradient to one input element.
struct RouteOp {
    name: &'static str,
    /// Input flat index chosen for every output element.
    source: Vec<usize>,
    input_len: usize,
}

impl Backward for RouteOp {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| {
            let mut dx = vec![0.0; self.input_len];
            for (g, &i) in ctx.grad.iter().zip(&self.source) {
                dx[i] += g;
            }
            dx
        })]
    }
}

/// Spreads each output gradient uniformly over a group of `group` inputs.
struct AverageOp {
    name: &'static str,
    /// Output flat index for every input element.
    target: Vec<usize>,
    group: usize,
}

impl Backward for AverageOp {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.group as f64;
        vec![ctx.needs[0].then(|| self.target.iter().map(|&j| ctx.grad[j] * inv).collect())]
    }
}

/// Non-overlapping max pooling with a square `window` (stride = window).
/// Extents must be divisible by the window. Ties go to the first maximum in
/// row-major order.
pub fn maxpool2d(graph: &mut Graph, x: Var, window: usize) -> Result<Var> {
    let t = graph.value(x);
    let (n, c, h, w) = t.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(shape_err!(
            "maxpool2d window {window} must divide spatial extents {h}x{w}"
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let xd = t.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut source = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = base + (oy * window + dy) * w + ox * window + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                source.push(best);
            }
        }
    }
    let input_len = t.numel();
    let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
    Ok(graph.record(
        out,
        &[x],
        RouteOp {
            name: "maxpool2d",
            source,
            input_len,
        },
    ))
}

/// Spatial mean per sample and channel: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(graph: &mut Graph, x: Var) -> Result<Var> {
    let t = graph.value(x);
    let (n, c, h, w) = t.dims4()?;
    let plane = h * w;
    let out: Vec<f64> = t
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    let target = (0..t.numel()).map(|i| i / plane).collect();
    let out = Tensor::from_vec(&[n, c], out)?;
    Ok(graph.record(
        out,
        &[x],
        AverageOp {
            name: "global_avg_pool",
            target,
            group: plane,
        },
    ))
}

/// Per-pixel maximum across channels: `[n, c, h, w] -> [n, 1, h, w]`.
/// Ties go to the lowest channel.
pub fn channel_max_pool(graph: &mut Graph, x: Var) -> Result<Var> {
    let t = graph.value(x);
    let (n, c, h, w) = t.dims4()?;
    let plane = h * w;
    let xd = t.data();
    let mut out = Vec::with_capacity(n * plane);
    let mut source = Vec::with_capacity(n * plane);
    for s in 0..n {
        for p in 0..plane {
            let mut best = s * c * plane + p;
            for ch in 1..c {
                let i = (s * c + ch) * plane + p;
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            out.push(xd[best]);
            source.push(best);
        }
    }
    let input_len = t.numel();
    let out = Tensor::from_vec(&[n, 1, h, w], out)?;
    Ok(graph.record(
        out,
        &[x],
        RouteOp {
            name: "channel_max_pool",
            source,
            input_len,
        },
    ))
}

/// Per-pixel mean across channels: `[n, c, h, w] -> [n, 1, h, w]`.
pub fn channel_avg_pool(graph: &mut Graph, x: Var) -> Result<Var> {
    let t = graph.value(x);
    let (n, c, h, w) = t.dims4()?;
    let plane = h * w;
    let xd = t.data();
    let mut out = vec![0.0; n * plane];
    for s in 0..n {
        let dst = &mut out[s * plane..(s + 1) * plane];
        for ch in 0..c {
            let src = &xd[(s * c + ch) * plane..][..plane];
            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
        }
        dst.iter_mut().for_each(|d| *d /= c as f64);
    }
    let target = (0..t.numel()).map(|i| (i / (c * plane)) * plane + i % plane).collect();
    let out = Tensor::from_vec(&[n, 1, h, w], out)?;
    Ok(graph.record(
        out,
        &[x],
        AverageOp {
            name: "channel_avg_pool",
            target,
            group: c,
        },
    ))
}
