//! Channel, spatial, and hybrid attention gates for skip connections.
//!
//! * channel gate: `w_c = σ(W2 · relu(W1 · GAP(F)))`, one scalar per channel
//! * spatial gate: `w_s = σ(conv([maxpool_c(F), avgpool_c(F)]))`, one scalar per pixel
//! * hybrid: `F' = F ⊗ w_c ⊗ w_s`
//!
//! Both gates lie in `(0, 1)`, so the hybrid output never exceeds the input
//! in magnitude.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{self, Conv2dParams, Padding};
use crate::tensor::Tensor;

/// Bottleneck MLP weights: `w1` is `[C/r, C]`, `w2` is `[C, C/r]`. No biases.
#[derive(Clone, Debug)]
pub struct ChannelAttentionParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub reduction: usize,
}

impl ChannelAttentionParams {
    pub fn new(w1: Tensor, w2: Tensor, reduction: usize) -> Result<Self> {
        let &[hidden, c] = w1.shape() else {
            return Err(shape_err!("W1 must be rank 2, got {:?}", w1.shape()));
        };
        if reduction == 0 || c % reduction != 0 || c / reduction != hidden {
            return Err(config_err!(
                "W1 {:?} is inconsistent with reduction ratio {reduction}",
                w1.shape()
            ));
        }
        if w2.shape() != [c, hidden] {
            return Err(shape_err!("W2 must be [{c}, {hidden}], got {:?}", w2.shape()));
        }
        if !w1.is_finite() || !w2.is_finite() {
            return Err(config_err!("channel attention weights must be finite"));
        }
        Ok(ChannelAttentionParams { w1, w2, reduction })
    }

    fn hidden(channels: usize, reduction: usize) -> Result<usize> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(config_err!(
                "reduction ratio {reduction} must divide channel count {channels}"
            ));
        }
        Ok(channels / reduction)
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::hidden(channels, reduction)?;
        Self::new(
            Tensor::zeros(&[hidden, channels])?,
            Tensor::zeros(&[channels, hidden])?,
            reduction,
        )
    }

    /// Uniform in `±1/sqrt(fan_in)`, keeping initial gates near 0.5.
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = Self::hidden(channels, reduction)?;
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Self::new(
            Tensor::uniform(&[hidden, channels], -b1, b1, rng)?,
            Tensor::uniform(&[channels, hidden], -b2, b2, rng)?,
            reduction,
        )
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> ChannelAttentionVars {
        ChannelAttentionVars {
            w1: graph.input(self.w1.detached().with_requires_grad(trainable)),
            w2: graph.input(self.w2.detached().with_requires_grad(trainable)),
        }
    }
}

/// 2-in, 1-out convolution over the stacked `[max, avg]` channel maps.
#[derive(Clone, Debug)]
pub struct SpatialAttentionParams {
    pub conv: Conv2dParams,
}

impl SpatialAttentionParams {
    pub fn new(conv: Conv2dParams) -> Result<Self> {
        let s = conv.weight.shape();
        if s[0] != 1 || s[1] != 2 {
            return Err(shape_err!(
                "spatial attention conv must map 2 channels to 1, got weight {s:?}"
            ));
        }
        if s[2] != s[3] || s[2].is_multiple_of(2) || conv.padding != Padding::Same || conv.stride != 1 {
            return Err(config_err!(
                "spatial attention needs an odd square kernel with same padding at stride 1"
            ));
        }
        Ok(SpatialAttentionParams { conv })
    }

    pub fn zeros(kernel: usize) -> Result<Self> {
        Self::new(Conv2dParams::new(
            Tensor::zeros(&[1, 2, kernel, kernel])?,
            Tensor::zeros(&[1])?,
            1,
            Padding::Same,
        )?)
    }

    pub fn init<R: Rng + ?Sized>(kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(config_err!("spatial attention kernel must be odd, got {kernel}"));
        }
        let b = 1.0 / ((2 * kernel * kernel) as f64).sqrt();
        Self::new(Conv2dParams::new(
            Tensor::uniform(&[1, 2, kernel, kernel], -b, b, rng)?,
            Tensor::zeros(&[1])?,
            1,
            Padding::Same,
        )?)
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> SpatialAttentionVars {
        SpatialAttentionVars {
            weight: graph.input(self.conv.weight.detached().with_requires_grad(trainable)),
            bias: graph.input(self.conv.bias.detached().with_requires_grad(trainable)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionVars {
    pub w1: Var,
    pub w2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionVars {
    pub weight: Var,
    pub bias: Var,
}

/// How the two gates are derived from the skip feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Composition {
    /// Both gates computed from the same input `F`.
    #[default]
    Parallel,
    /// The spatial gate is computed from `F ⊗ w_c`.
    Sequential,
}

impl std::str::FromStr for Composition {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Composition::Parallel),
            "sequential" => Ok(Composition::Sequential),
            other => Err(config_err!(
                "attention composition must be \"parallel\" or \"sequential\", got {other:?}"
            )),
        }
    }
}

impl std::fmt::Display for Composition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Composition::Parallel => "parallel",
            Composition::Sequential => "sequential",
        })
    }
}

/// Channel gate of shape `[n, c, 1, 1]`.
pub fn channel_attention(graph: &mut Graph, f: Var, p: &ChannelAttentionVars) -> Result<Var> {
    let (n, c, _, _) = graph.value(f).dims4()?;
    if graph.shape(p.w1).get(1) != Some(&c) {
        return Err(shape_err!(
            "channel attention W1 {:?} does not match {c} channels",
            graph.shape(p.w1)
        ));
    }
    let pooled = nn::global_avg_pool(graph, f)?;
    // Row-vector form: [n, c] · W1ᵀ = (W1 · gap)ᵀ per sample.
    let w1t = graph.transpose(p.w1)?;
    let hidden = graph.matmul(pooled, w1t)?;
    let hidden = graph.relu(hidden);
    let w2t = graph.transpose(p.w2)?;
    let logits = graph.matmul(hidden, w2t)?;
    let gate = graph.sigmoid(logits);
    graph.reshape(gate, &[n, c, 1, 1])
}

/// Spatial gate of shape `[n, 1, h, w]`.
pub fn spatial_attention(graph: &mut Graph, f: Var, p: &SpatialAttentionVars) -> Result<Var> {
    let mx = nn::channel_max_pool(graph, f)?;
    let av = nn::channel_avg_pool(graph, f)?;
    let stacked = nn::concat_channels(graph, mx, av)?;
    let logits = nn::conv2d(graph, stacked, p.weight, Some(p.bias), 1, Padding::Same)?;
    Ok(graph.sigmoid(logits))
}

/// `F ⊗ w_c ⊗ w_s`.
pub fn hybrid_apply(graph: &mut Graph, f: Var, w_c: Var, w_s: Var) -> Result<Var> {
    let scaled = graph.mul(f, w_c)?;
    graph.mul(scaled, w_s)
}

pub fn hybrid_attention_block(
    graph: &mut Graph,
    f: Var,
    cp: &ChannelAttentionVars,
    sp: &SpatialAttentionVars,
    composition: Composition,
) -> Result<Var> {
    let w_c = channel_attention(graph, f, cp)?;
    match composition {
        Composition::Parallel => {
            let w_s = spatial_attention(graph, f, sp)?;
            hybrid_apply(graph, f, w_c, w_s)
        }
        Composition::Sequential => {
            let gated = graph.mul(f, w_c)?;
            let w_s = spatial_attention(graph, gated, sp)?;
            graph.mul(gated, w_s)
        }
    }
}
