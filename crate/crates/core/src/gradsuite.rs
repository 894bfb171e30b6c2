//! Finite-difference checks over every differentiable unit: primitive ops,
//! the attention gates, a whole (small) Unet, and the training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, ChannelAttentionVars, Composition, SpatialAttentionVars};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::loss::{self, LossConfig};
use crate::model::{ForwardOptions, UnetConfig, UnetModel};
use crate::nn::{self, Padding};
use crate::tensor::Tensor;

pub const SINGLE_OP_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;

/// Worst relative error of one unit across all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitResult {
    pub name: &'static str,
    pub composite: bool,
    pub worst: f64,
    pub tol: f64,
}

impl UnitResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

type Body = fn(&mut Graph, &[Var], &Fixture) -> Result<Var>;

struct Unit {
    name: &'static str,
    composite: bool,
    inputs: fn(&mut ChaCha8Rng) -> Result<Vec<Tensor>>,
    body: Body,
}

/// Per-seed constants the unit bodies close over.
struct Fixture {
    labels: LabelMap,
    weights: Vec<f64>,
    model: UnetModel,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Random values at least 0.1 away from zero, so ReLU kinks stay out of
/// reach of the finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut t = uniform(shape, rng)?;
    t.data_mut().iter_mut().for_each(|v| *v += 0.1f64.copysign(*v));
    Ok(t)
}

/// Random values spaced at least 0.05 apart, so max selections are stable.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, vals)
}

/// Reduces `out` to a scalar by a fixed random weighting.
fn project(g: &mut Graph, out: Var, fx: &Fixture) -> Result<Var> {
    let n = g.value(out).numel();
    let w = Tensor::from_vec(g.shape(out), fx.weights[..n].to_vec())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

fn units() -> Vec<Unit> {
    macro_rules! unit {
        ($name:expr, $composite:expr, |$rng:ident| $inputs:expr, |$g:ident, $v:ident, $fx:ident| $body:expr) => {
            Unit {
                name: $name,
                composite: $composite,
                inputs: |$rng| Ok($inputs),
                body: |$g, $v, $fx| {
                    let out = $body;
                    project($g, out, $fx)
                },
            }
        };
    }
    vec![
        unit!(
            "add",
            false,
            |r| vec![uniform(&[2, 3, 4], r)?, uniform(&[2, 1, 4], r)?],
            |g, v, fx| g.add(v[0], v[1])?
        ),
        unit!(
            "sub",
            false,
            |r| vec![uniform(&[2, 3], r)?, uniform(&[1, 3], r)?],
            |g, v, fx| g.sub(v[0], v[1])?
        ),
        unit!(
            "mul",
            false,
            |r| vec![uniform(&[2, 3, 2], r)?, uniform(&[2, 3, 1], r)?],
            |g, v, fx| g.mul(v[0], v[1])?
        ),
        unit!("scale", false, |r| vec![uniform(&[5], r)?], |g, v, fx| g
            .scale(v[0], -1.75)),
        unit!("relu", false, |r| vec![away_from_zero(&[3, 4], r)?], |g, v, fx| g
            .relu(v[0])),
        unit!("sigmoid", false, |r| vec![uniform(&[3, 4], r)?], |g, v, fx| g
            .sigmoid(v[0])),
        unit!("reshape", false, |r| vec![uniform(&[2, 6], r)?], |g, v, fx| g
            .reshape(v[0], &[3, 4])?),
        unit!(
            "matmul",
            false,
            |r| vec![uniform(&[3, 4], r)?, uniform(&[4, 2], r)?],
            |g, v, fx| g.matmul(v[0], v[1])?
        ),
        unit!("transpose", false, |r| vec![uniform(&[3, 5], r)?], |g, v, fx| g
            .transpose(v[0])?),
        unit!("reduce_sum", false, |r| vec![uniform(&[2, 3, 4], r)?], |g, v, fx| g
            .reduce_sum(v[0], &[0, 2], true)?),
        unit!("reduce_mean", false, |r| vec![uniform(&[2, 3, 4], r)?], |g, v, fx| g
            .reduce_mean(v[0], &[1], false)?),
        unit!(
            "conv2d",
            false,
            |r| vec![
                uniform(&[2, 2, 5, 5], r)?,
                uniform(&[3, 2, 3, 3], r)?,
                uniform(&[3], r)?
            ],
            |g, v, fx| nn::conv2d(g, v[0], v[1], Some(v[2]), 1, Padding::Same)?
        ),
        unit!(
            "conv2d_strided",
            false,
            |r| vec![uniform(&[1, 2, 6, 5], r)?, uniform(&[2, 2, 3, 3], r)?],
            |g, v, fx| nn::conv2d(g, v[0], v[1], None, 2, Padding::Explicit(1))?
        ),
        unit!(
            "transposed_conv2d",
            false,
            |r| vec![
                uniform(&[2, 3, 3, 3], r)?,
                uniform(&[3, 2, 2, 2], r)?,
                uniform(&[2], r)?
            ],
            |g, v, fx| nn::transposed_conv2d(g, v[0], v[1], Some(v[2]), 2, 0)?
        ),
        unit!(
            "transposed_conv2d_padded",
            false,
            |r| vec![uniform(&[1, 2, 3, 4], r)?, uniform(&[2, 2, 3, 3], r)?],
            |g, v, fx| nn::transposed_conv2d(g, v[0], v[1], None, 2, 1)?
        ),
        unit!("maxpool2d", false, |r| vec![distinct(&[2, 2, 4, 6], r)?], |g, v, fx| {
            nn::maxpool2d(g, v[0], 2)?
        }),
        unit!(
            "global_avg_pool",
            false,
            |r| vec![uniform(&[2, 3, 3, 4], r)?],
            |g, v, fx| nn::global_avg_pool(g, v[0])?
        ),
        unit!(
            "channel_max_pool",
            false,
            |r| vec![distinct(&[2, 4, 3, 3], r)?],
            |g, v, fx| nn::channel_max_pool(g, v[0])?
        ),
        unit!(
            "channel_avg_pool",
            false,
            |r| vec![uniform(&[2, 4, 3, 3], r)?],
            |g, v, fx| nn::channel_avg_pool(g, v[0])?
        ),
        unit!(
            "softmax_channel",
            false,
            |r| vec![uniform(&[2, 4, 2, 3], r)?],
            |g, v, fx| nn::softmax_channel(g, v[0])?
        ),
        unit!(
            "concat_channels",
            false,
            |r| vec![uniform(&[2, 1, 2, 2], r)?, uniform(&[2, 3, 2, 2], r)?],
            |g, v, fx| nn::concat_channels(g, v[0], v[1])?
        ),
        unit!(
            "slice_channels",
            false,
            |r| vec![uniform(&[2, 5, 2, 2], r)?],
            |g, v, fx| nn::slice_channels(g, v[0], 1, 3)?
        ),
        unit!(
            "cross_entropy",
            false,
            |r| vec![uniform(&[2, 3, 3, 4], r)?.scaled(3.0)],
            |g, v, fx| loss::cross_entropy(g, v[0], &fx.labels, &LossConfig::default())?
        ),
        unit!(
            "dice_loss",
            false,
            |r| vec![uniform(&[2, 3, 3, 4], r)?.scaled(3.0)],
            |g, v, fx| loss::dice_loss(g, v[0], &fx.labels, &LossConfig::default())?
        ),
        unit!(
            "channel_attention",
            true,
            |r| vec![uniform(&[2, 4, 3, 3], r)?, uniform(&[2, 4], r)?, uniform(&[4, 2], r)?],
            |g, v, fx| attention::channel_attention(g, v[0], &ChannelAttentionVars { w1: v[1], w2: v[2] })?
        ),
        unit!(
            "spatial_attention",
            true,
            |r| vec![
                distinct(&[2, 3, 4, 4], r)?,
                uniform(&[1, 2, 3, 3], r)?,
                uniform(&[1], r)?
            ],
            |g, v, fx| attention::spatial_attention(
                g,
                v[0],
                &SpatialAttentionVars {
                    weight: v[1],
                    bias: v[2]
                }
            )?
        ),
        unit!(
            "hybrid_attention_parallel",
            true,
            |r| attention_inputs(r)?,
            |g, v, fx| hybrid(g, v, Composition::Parallel)?
        ),
        unit!(
            "hybrid_attention_sequential",
            true,
            |r| attention_inputs(r)?,
            |g, v, fx| hybrid(g, v, Composition::Sequential)?
        ),
        Unit {
            name: "unet_forward",
            composite: true,
            inputs: |r| {
                let mut v = vec![distinct(&[1, 2, 4, 4], r)?.scaled(2.0)];
                v.extend(small_unet(r)?.params().iter().map(|p| p.tensor.detached()));
                Ok(v)
            },
            body: |g, v, fx| {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let out = fx
                    .model
                    .forward_with(g, &v[1..], v[0], ForwardOptions::eval(), &mut unused)?;
                project(g, out, fx)
            },
        },
        Unit {
            name: "combined_loss",
            composite: true,
            inputs: |r| Ok(vec![uniform(&[2, 3, 3, 4], r)?.scaled(3.0)]),
            body: |g, v, fx| {
                let cfg = LossConfig {
                    alpha: 0.3,
                    class_weights: Some(vec![0.5, 1.0, 2.0]),
                    ..LossConfig::default()
                };
                loss::combined_loss(g, v[0], &fx.labels, &cfg)
            },
        },
    ]
}

fn attention_inputs(r: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    Ok(vec![
        distinct(&[2, 4, 3, 3], r)?,
        uniform(&[2, 4], r)?,
        uniform(&[4, 2], r)?,
        uniform(&[1, 2, 3, 3], r)?,
        uniform(&[1], r)?,
    ])
}

fn hybrid(g: &mut Graph, v: &[Var], composition: Composition) -> Result<Var> {
    attention::hybrid_attention_block(
        g,
        v[0],
        &ChannelAttentionVars { w1: v[1], w2: v[2] },
        &SpatialAttentionVars {
            weight: v[3],
            bias: v[4],
        },
        composition,
    )
}

fn small_unet(rng: &mut ChaCha8Rng) -> Result<UnetModel> {
    UnetModel::build(
        UnetConfig {
            in_channels: 2,
            num_classes: 3,
            depth: 2,
            base_channels: 2,
            reduction_ratio: 2,
            spatial_kernel: 3,
            dropout_rate: 0.0,
            ..UnetConfig::default()
        },
        rng,
    )
}

fn fixture(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    // Labels mix every class with ignored pixels.
    let labels: Vec<u8> = (0..24)
        .map(|i| {
            if i % 7 == 3 {
                IGNORE_INDEX
            } else {
                rng.random_range(0..3)
            }
        })
        .collect();
    Ok(Fixture {
        labels: LabelMap::new(2, 3, 4, labels)?,
        weights: (0..512).map(|_| rng.random_range(-1.0..1.0)).collect(),
        model: small_unet(rng)?,
    })
}

pub fn unit_names() -> Vec<&'static str> {
    units().iter().map(|u| u.name).collect()
}

/// Runs every unit under each seed; `tolerance` overrides the per-unit
/// defaults ([`SINGLE_OP_TOL`], [`COMPOSITE_TOL`]).
pub fn run_suite(seeds: &[u64], tolerance: Option<f64>) -> Result<Vec<UnitResult>> {
    let units = units();
    let mut results: Vec<UnitResult> = units
        .iter()
        .map(|u| UnitResult {
            name: u.name,
            composite: u.composite,
            worst: 0.0,
            tol: tolerance.unwrap_or(if u.composite { COMPOSITE_TOL } else { SINGLE_OP_TOL }),
        })
        .collect();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fx = fixture(&mut rng)?;
        for (u, res) in units.iter().zip(&mut results) {
            let inputs = (u.inputs)(&mut rng)?;
            let opts = GradCheckOptions {
                tol: res.tol,
                seed: rng.random(),
                ..GradCheckOptions::default()
            };
            let body = u.body;
            let report = grad_check(|g, v| body(g, v, &fx), &inputs, &opts)?;
            res.worst = res.worst.max(report.max_error());
        }
    }
    Ok(results)
}
