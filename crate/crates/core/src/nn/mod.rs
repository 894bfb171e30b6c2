//! Neural-network operators recorded on an autodiff [`Graph`].

mod conv;
mod pool;

pub use conv::{conv2d, conv2d_backward_input, transposed_conv2d, Conv2dParams, Padding};
pub use pool::{channel_avg_pool, channel_max_pool, global_avg_pool, maxpool2d};

use rand::Rng;

use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// Softmax over axis 1 of `[n, k, h, w]` for every pixel.
pub fn softmax_channel_raw(x: &[f64], n: usize, k: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        let base = s * k * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(x[base + c * plane + p]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (x[base + c * plane + p] - m).exp();
                out[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                out[base + c * plane + p] /= z;
            }
        }
    }
    out
}

struct SoftmaxChannelOp {
    n: usize,
    k: usize,
    plane: usize,
}

impl Backward for SoftmaxChannelOp {
    fn name(&self) -> &'static str {
        "softmax_channel"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let (p, g) = (ctx.output.data(), ctx.grad);
        let mut dx = vec![0.0; p.len()];
        for s in 0..self.n {
            let base = s * self.k * self.plane;
            for px in 0..self.plane {
                let idx = |c: usize| base + c * self.plane + px;
                let dot: f64 = (0..self.k).map(|c| p[idx(c)] * g[idx(c)]).sum();
                for c in 0..self.k {
                    dx[idx(c)] = p[idx(c)] * (g[idx(c)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Per-pixel softmax across channels with max subtraction.
pub fn softmax_channel(graph: &mut Graph, x: Var) -> Result<Var> {
    let (n, k, h, w) = graph.value(x).dims4()?;
    let data = softmax_channel_raw(graph.value(x).data(), n, k, h * w);
    let out = Tensor::from_vec(&[n, k, h, w], data)?;
    Ok(graph.record(out, &[x], SoftmaxChannelOp { n, k, plane: h * w }))
}

// ---------------------------------------------------------------------------

struct ConcatOp {
    n: usize,
    a_block: usize,
    b_block: usize,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let stride = self.a_block + self.b_block;
        let ga = ctx.needs[0].then(|| {
            (0..self.n)
                .flat_map(|s| ctx.grad[s * stride..s * stride + self.a_block].iter().copied())
                .collect()
        });
        let gb = ctx.needs[1].then(|| {
            (0..self.n)
                .flat_map(|s| ctx.grad[s * stride + self.a_block..(s + 1) * stride].iter().copied())
                .collect()
        });
        vec![ga, gb]
    }
}

/// Stacks `a`'s channels followed by `b`'s.
pub fn concat_channels(graph: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (n, c1, h, w) = graph.value(a).dims4()?;
    let (n2, c2, h2, w2) = graph.value(b).dims4()?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(shape_err!(
            "concat_channels needs equal batch and spatial extents, got {:?} and {:?}",
            graph.shape(a),
            graph.shape(b)
        ));
    }
    let (a_block, b_block) = (c1 * h * w, c2 * h * w);
    let (ad, bd) = (graph.value(a).data(), graph.value(b).data());
    let mut data = Vec::with_capacity(n * (a_block + b_block));
    for s in 0..n {
        data.extend_from_slice(&ad[s * a_block..(s + 1) * a_block]);
        data.extend_from_slice(&bd[s * b_block..(s + 1) * b_block]);
    }
    let out = Tensor::from_vec(&[n, c1 + c2, h, w], data)?;
    Ok(graph.record(out, &[a, b], ConcatOp { n, a_block, b_block }))
}

struct SliceOp {
    n: usize,
    c: usize,
    start: usize,
    len: usize,
    plane: usize,
}

impl Backward for SliceOp {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| {
            let mut dx = vec![0.0; self.n * self.c * self.plane];
            let block = self.len * self.plane;
            for s in 0..self.n {
                let off = (s * self.c + self.start) * self.plane;
                dx[off..off + block].copy_from_slice(&ctx.grad[s * block..(s + 1) * block]);
            }
            dx
        })]
    }
}

/// Channels `start..start + len` of `x`.
pub fn slice_channels(graph: &mut Graph, x: Var, start: usize, len: usize) -> Result<Var> {
    let (n, c, h, w) = graph.value(x).dims4()?;
    if len == 0 || start + len > c {
        return Err(shape_err!(
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        ));
    }
    let plane = h * w;
    let xd = graph.value(x).data();
    let mut data = Vec::with_capacity(n * len * plane);
    for s in 0..n {
        let off = (s * c + start) * plane;
        data.extend_from_slice(&xd[off..off + len * plane]);
    }
    let out = Tensor::from_vec(&[n, len, h, w], data)?;
    Ok(graph.record(
        out,
        &[x],
        SliceOp {
            n,
            c,
            start,
            len,
            plane,
        },
    ))
}

// ---------------------------------------------------------------------------

struct MaskOp {
    scale: Vec<f64>,
}

impl Backward for MaskOp {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.grad.iter().zip(&self.scale).map(|(g, s)| g * s).collect())]
    }
}

/// Inverted dropout. Identity when not training or when `rate` is zero.
pub fn dropout<R: Rng + ?Sized>(graph: &mut Graph, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(config_err!("dropout rate must lie in [0, 1), got {rate}"));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..graph.value(x).numel())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let v = graph.value(x);
    let data = v.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
    let out = Tensor::from_vec(v.shape(), data)?;
    Ok(graph.record(out, &[x], MaskOp { scale }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 1, 1], 0.3).unwrap());
        let p = softmax_channel(&mut g, x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::uniform(&[2, 3, 2, 2], -2.0, 2.0, &mut rng).unwrap();
        let shifted: Vec<f64> = logits.data().iter().map(|v| v + 5.0).collect();
        let a = g.constant(logits.clone());
        let b = g.constant(Tensor::from_vec(logits.shape(), shifted).unwrap());
        let pa = softmax_channel(&mut g, a).unwrap();
        let pb = softmax_channel(&mut g, b).unwrap();
        assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-15);
    }

    #[test]
    fn concat_then_slice_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let z = g.constant(Tensor::zeros(&[2, 3, 3, 3]).unwrap());
        let c = concat_channels(&mut g, a, z).unwrap();
        assert_eq!(g.shape(c), &[2, 5, 3, 3]);
        let back = slice_channels(&mut g, c, 0, 2).unwrap();
        assert_eq!(g.value(back), &x);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let b = g.constant(Tensor::zeros(&[1, 2, 4, 2]).unwrap());
        assert!(concat_channels(&mut g, a, b).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[8], 2.0).unwrap());
        assert_eq!(dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.7, false, &mut rng).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&mut g, x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let x = Tensor::uniform(&[n], 0.0, 2.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = dropout(&mut g, xv, 0.5, true, &mut rng).unwrap();
        let y = g.value(y).data();
        let survivors = y.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        let mean_in = x.data().iter().sum::<f64>() / n as f64;
        let mean_out = y.iter().sum::<f64>() / n as f64;
        assert!((mean_in - mean_out).abs() < 0.02, "{mean_in} vs {mean_out}");
    }
}
