//! Encoder-decoder segmentation network with attention-gated skips.
//!
//! Each encoder stage is `conv3×3 → relu → conv3×3 → relu → dropout`
//! followed by 2×2 max pooling; the bottleneck is the same block without
//! pooling. Each decoder stage upsamples with a stride-2 transposed
//! convolution, concatenates the (gated) encoder feature from before pooling,
//! and runs another conv block. A 1×1 convolution produces class logits.

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};

use crate::attention::{
    self, ChannelAttentionParams, ChannelAttentionVars, Composition, SpatialAttentionParams, SpatialAttentionVars,
};
use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::labels::LabelMap;
use crate::nn::{self, Conv2dParams, Padding};
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub attention_enabled: bool,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    pub dropout_rate: f64,
    pub attention_composition: Composition,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            in_channels: 3,
            num_classes: 19,
            depth: 4,
            base_channels: 16,
            attention_enabled: true,
            reduction_ratio: 4,
            spatial_kernel: 7,
            dropout_rate: 0.1,
            attention_composition: Composition::Parallel,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config_err!("depth must be at least 1"));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(config_err!("num_classes must lie in 2..=255, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.attention_enabled {
            if self.reduction_ratio == 0 {
                return Err(config_err!("reduction_ratio must be positive"));
            }
            for level in 0..self.depth {
                let c = self.stage_channels(level);
                if !c.is_multiple_of(self.reduction_ratio) {
                    return Err(config_err!(
                        "reduction_ratio {} does not divide the {c} channels of stage {level}",
                        self.reduction_ratio
                    ));
                }
            }
            if self.spatial_kernel.is_multiple_of(2) {
                return Err(config_err!("spatial_kernel must be odd, got {}", self.spatial_kernel));
            }
        }
        Ok(())
    }

    /// Encoder width at `level`; `level == depth` is the bottleneck.
    pub fn stage_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub training: bool,
    /// Replaces both attention gates with ones (test hook).
    pub pin_gates: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            training: true,
            pin_gates: false,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions::default()
    }
}

#[derive(Clone, Debug)]
pub struct UnetModel {
    config: UnetConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

fn conv_params(out: &mut Vec<Parameter>, prefix: &str, conv: Conv2dParams) {
    out.push(Parameter {
        name: format!("{prefix}.weight"),
        tensor: conv.weight,
    });
    out.push(Parameter {
        name: format!("{prefix}.bias"),
        tensor: conv.bias,
    });
}

/// Transposed-conv weights `[in, out, 2, 2]`, fan-in scaled.
fn upsample_params<R: Rng + ?Sized>(
    out: &mut Vec<Parameter>,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (6.0 / cin as f64).sqrt();
    out.push(Parameter {
        name: format!("{prefix}.weight"),
        tensor: Tensor::uniform(&[cin, cout, 2, 2], -bound, bound, rng)?,
    });
    out.push(Parameter {
        name: format!("{prefix}.bias"),
        tensor: Tensor::zeros(&[cout])?,
    });
    Ok(())
}

impl UnetModel {
    /// Builds and initialises a model. Convolution weights are drawn first,
    /// then attention weights, so enabling attention does not change the
    /// initial convolution weights for a given seed.
    pub fn build<R: Rng + ?Sized>(config: UnetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let same = Padding::Same;
        for level in 0..config.depth {
            let cin = if level == 0 {
                config.in_channels
            } else {
                config.stage_channels(level - 1)
            };
            let c = config.stage_channels(level);
            conv_params(
                &mut params,
                &format!("enc{level}.conv1"),
                Conv2dParams::init(c, cin, 3, same, rng)?,
            );
            conv_params(
                &mut params,
                &format!("enc{level}.conv2"),
                Conv2dParams::init(c, c, 3, same, rng)?,
            );
        }
        let top = config.stage_channels(config.depth);
        let below = config.stage_channels(config.depth - 1);
        conv_params(
            &mut params,
            "bottleneck.conv1",
            Conv2dParams::init(top, below, 3, same, rng)?,
        );
        conv_params(
            &mut params,
            "bottleneck.conv2",
            Conv2dParams::init(top, top, 3, same, rng)?,
        );
        for level in (0..config.depth).rev() {
            let c = config.stage_channels(level);
            upsample_params(&mut params, &format!("dec{level}.up"), 2 * c, c, rng)?;
            conv_params(
                &mut params,
                &format!("dec{level}.conv1"),
                Conv2dParams::init(c, 2 * c, 3, same, rng)?,
            );
            conv_params(
                &mut params,
                &format!("dec{level}.conv2"),
                Conv2dParams::init(c, c, 3, same, rng)?,
            );
        }
        conv_params(
            &mut params,
            "head",
            Conv2dParams::init(config.num_classes, config.base_channels, 1, same, rng)?,
        );
        if config.attention_enabled {
            for level in 0..config.depth {
                let c = config.stage_channels(level);
                let ca = ChannelAttentionParams::init(c, config.reduction_ratio, rng)?;
                let sa = SpatialAttentionParams::init(config.spatial_kernel, rng)?;
                params.push(Parameter {
                    name: format!("skip{level}.ca.w1"),
                    tensor: ca.w1,
                });
                params.push(Parameter {
                    name: format!("skip{level}.ca.w2"),
                    tensor: ca.w2,
                });
                conv_params(&mut params, &format!("skip{level}.sa"), sa.conv);
            }
        }
        for p in &mut params {
            p.tensor.set_requires_grad(true);
        }
        Self::from_params(config, params)
    }

    fn from_params(config: UnetConfig, params: Vec<Parameter>) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(config_err!("duplicate parameter name {}", p.name));
            }
        }
        Ok(UnetModel { config, params, index })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn is_attention_param(name: &str) -> bool {
        name.starts_with("skip")
    }

    pub fn attention_param_count(&self) -> usize {
        self.params.iter().filter(|p| Self::is_attention_param(&p.name)).count()
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set_param(&mut self, name: &str, values: &Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| config_err!("model has no parameter named {name}"))?;
        let p = &mut self.params[i];
        if p.tensor.shape() != values.shape() {
            return Err(shape_err!(
                "parameter {name} has shape {:?}, got {:?}",
                p.tensor.shape(),
                values.shape()
            ));
        }
        p.tensor = values.detached().with_requires_grad(true);
        Ok(())
    }

    /// Replaces every parameter; names and shapes must match the build order.
    pub fn load_params(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(config_err!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            ));
        }
        for (p, (name, t)) in self.params.iter().zip(&values) {
            if &p.name != name || p.tensor.shape() != t.shape() {
                return Err(config_err!(
                    "parameter mismatch: expected {} {:?}, got {name} {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.shape()
                ));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(values) {
            p.tensor = t.with_requires_grad(true);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds every parameter onto `graph` as a tracked leaf, in registry order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.param(p.tensor.detached())).collect()
    }

    /// Accumulates the graph's leaf gradients into the parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = graph.grad(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    /// Checks input rank, channels, and divisibility.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(shape_err!("model input must be [n, c, h, w], got {shape:?}"));
        };
        if c != self.config.in_channels {
            return Err(shape_err!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            ));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err!(
                "input extents {h}x{w} must be multiples of {m} for depth {}",
                self.config.depth
            ));
        }
        Ok(())
    }

    /// Forward pass binding the parameters onto `graph`. Returns the logits
    /// and the parameter handles for [`UnetModel::accumulate_grads`].
    pub fn forward(
        &self,
        graph: &mut Graph,
        x: Var,
        opts: ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(graph);
        let logits = self.forward_with(graph, &bound, x, opts, rng)?;
        Ok((logits, bound))
    }

    /// Forward pass over caller-supplied parameter handles (registry order).
    pub fn forward_with(
        &self,
        graph: &mut Graph,
        bound: &[Var],
        x: Var,
        opts: ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        if bound.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter handles given for {} parameters",
                bound.len(),
                self.params.len()
            )));
        }
        self.check_input(graph.shape(x))?;
        let cfg = &self.config;
        let p = |name: String| -> Var { bound[self.index[&name]] };
        let block = |graph: &mut Graph, x: Var, prefix: &str, rng: &mut dyn RngCore| -> Result<Var> {
            let h = nn::conv2d(
                graph,
                x,
                p(format!("{prefix}.conv1.weight")),
                Some(p(format!("{prefix}.conv1.bias"))),
                1,
                Padding::Same,
            )?;
            let h = graph.relu(h);
            let h = nn::conv2d(
                graph,
                h,
                p(format!("{prefix}.conv2.weight")),
                Some(p(format!("{prefix}.conv2.bias"))),
                1,
                Padding::Same,
            )?;
            let h = graph.relu(h);
            nn::dropout(graph, h, cfg.dropout_rate, opts.training, rng)
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = x;
        for level in 0..cfg.depth {
            let f = block(graph, h, &format!("enc{level}"), rng)?;
            skips.push(f);
            h = nn::maxpool2d(graph, f, 2)?;
        }
        h = block(graph, h, "bottleneck", rng)?;
        for level in (0..cfg.depth).rev() {
            let up = nn::transposed_conv2d(
                graph,
                h,
                p(format!("dec{level}.up.weight")),
                Some(p(format!("dec{level}.up.bias"))),
                2,
                0,
            )?;
            let skip = skips[level];
            let gated = if !cfg.attention_enabled {
                skip
            } else if opts.pin_gates {
                let (n, c, hh, ww) = graph.value(skip).dims4()?;
                let wc = graph.constant(Tensor::ones(&[n, c, 1, 1])?);
                let ws = graph.constant(Tensor::ones(&[n, 1, hh, ww])?);
                attention::hybrid_apply(graph, skip, wc, ws)?
            } else {
                let ca = ChannelAttentionVars {
                    w1: p(format!("skip{level}.ca.w1")),
                    w2: p(format!("skip{level}.ca.w2")),
                };
                let sa = SpatialAttentionVars {
                    weight: p(format!("skip{level}.sa.weight")),
                    bias: p(format!("skip{level}.sa.bias")),
                };
                attention::hybrid_attention_block(graph, skip, &ca, &sa, cfg.attention_composition)?
            };
            let merged = nn::concat_channels(graph, gated, up)?;
            h = block(graph, merged, &format!("dec{level}"), rng)?;
        }
        nn::conv2d(
            graph,
            h,
            p("head.weight".into()),
            Some(p("head.bias".into())),
            1,
            Padding::Same,
        )
    }

    /// Inference logits for a batch, without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound: Vec<Var> = self
            .params
            .iter()
            .map(|p| graph.constant(p.tensor.detached()))
            .collect();
        let xv = graph.constant(x.detached());
        // dropout is inactive at inference, so this stream is never drawn from
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_with(&mut graph, &bound, xv, ForwardOptions::eval(), &mut unused)?;
        Ok(graph.value(out).detached())
    }

    pub fn predict_labels(&self, x: &Tensor) -> Result<LabelMap> {
        argmax_labels(&self.logits(x)?)
    }
}

/// Per-pixel argmax over axis 1 of `[n, k, h, w]`; ties go to the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (n, k, h, w) = logits.dims4()?;
    if k > 255 {
        return Err(shape_err!("at most 255 classes fit a label map, got {k}"));
    }
    let plane = h * w;
    let z = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if z[(s * k + c) * plane + p] > z[(s * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap::new(n, h, w, out)
}
