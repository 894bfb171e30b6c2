//! Segmentation objective: `α · CE + (1 − α) · Dice` over per-pixel logits.

use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::nn::softmax_channel_raw;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the cross-entropy term; Dice gets `1 − alpha`.
    pub alpha: f64,
    /// Per-class cross-entropy weights; uniform when `None`.
    pub class_weights: Option<Vec<f64>>,
    pub dice_smooth: f64,
    pub ignore_index: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            class_weights: None,
            dice_smooth: 1e-6,
            ignore_index: IGNORE_INDEX,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(config_err!("dice_smooth must be positive, got {}", self.dice_smooth));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(config_err!("class weights must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// Inverse-frequency class weights over non-ignored pixels, normalised so
/// the weights of observed classes average to one. Unobserved classes get 1.
pub fn inverse_frequency_weights<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    num_classes: usize,
    ignore: u8,
) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for map in labels {
        for &v in map.data() {
            if v != ignore && (v as usize) < num_classes {
                counts[v as usize] += 1;
            }
        }
    }
    let observed: Vec<usize> = (0..num_classes).filter(|&k| counts[k] > 0).collect();
    let mut weights = vec![1.0; num_classes];
    if observed.is_empty() {
        return weights;
    }
    for &k in &observed {
        weights[k] = 1.0 / counts[k] as f64;
    }
    let mean = observed.iter().map(|&k| weights[k]).sum::<f64>() / observed.len() as f64;
    for &k in &observed {
        weights[k] /= mean;
    }
    weights
}

struct Prepared {
    n: usize,
    k: usize,
    plane: usize,
    valid: usize,
}

fn prepare(graph: &Graph, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Prepared> {
    cfg.validate()?;
    let t = graph.value(logits);
    let (n, k, h, w) = t.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(shape_err!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            t.shape()
        ));
    }
    if k < 2 {
        return Err(shape_err!("segmentation loss needs at least 2 classes, got {k}"));
    }
    if let Some(wts) = &cfg.class_weights {
        if wts.len() != k {
            return Err(config_err!("{} class weights given for {k} classes", wts.len()));
        }
    }
    labels.validate(k, cfg.ignore_index)?;
    if !t.is_finite() {
        return Err(Error::Numeric("logits contain NaN or infinite values".into()));
    }
    let valid = labels.data().iter().filter(|&&v| v != cfg.ignore_index).count();
    if valid == 0 {
        return Err(Error::Contract("every pixel carries the ignore label".into()));
    }
    Ok(Prepared {
        n,
        k,
        plane: h * w,
        valid,
    })
}

struct CrossEntropyOp {
    n: usize,
    k: usize,
    plane: usize,
    /// Per-pixel `(class, weight / valid_count)`; `None` for ignored pixels.
    targets: Vec<Option<(usize, f64)>>,
    probs: Vec<f64>,
}

impl Backward for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let g = ctx.grad[0];
        let mut dx = vec![0.0; self.probs.len()];
        for s in 0..self.n {
            for p in 0..self.plane {
                let Some((y, scale)) = self.targets[s * self.plane + p] else {
                    continue;
                };
                for c in 0..self.k {
                    let i = (s * self.k + c) * self.plane + p;
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    dx[i] = g * scale * (self.probs[i] - onehot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Mean over non-ignored pixels of `−w_y · log softmax(logits)_y`.
pub fn cross_entropy(graph: &mut Graph, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let Prepared { n, k, plane, valid } = prepare(graph, logits, labels, cfg)?;
    let z = graph.value(logits).data();
    let probs = softmax_channel_raw(z, n, k, plane);
    let mut targets = Vec::with_capacity(n * plane);
    let mut total = 0.0;
    for s in 0..n {
        for p in 0..plane {
            let y = labels.data()[s * plane + p];
            if y == cfg.ignore_index {
                targets.push(None);
                continue;
            }
            let y = y as usize;
            let at = |c: usize| z[(s * k + c) * plane + p];
            let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
            let w = cfg.class_weights.as_ref().map_or(1.0, |w| w[y]);
            total += w * (lse - at(y));
            targets.push(Some((y, w / valid as f64)));
        }
    }
    let value = total / valid as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy evaluated to {value}")));
    }
    Ok(graph.record(
        Tensor::scalar(value),
        &[logits],
        CrossEntropyOp {
            n,
            k,
            plane,
            targets,
            probs,
        },
    ))
}

struct DiceOp {
    n: usize,
    k: usize,
    plane: usize,
    probs: Vec<f64>,
    /// Per-pixel class, `None` for ignored pixels.
    targets: Vec<Option<usize>>,
    /// Per class: `(numerator 2I + s, denominator S + G + s)` for classes
    /// present in the labels, `None` otherwise.
    terms: Vec<Option<(f64, f64)>>,
    present: usize,
}

impl Backward for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let g = ctx.grad[0] / self.present as f64;
        let mut dx = vec![0.0; self.probs.len()];
        let mut dp = vec![0.0; self.k];
        for s in 0..self.n {
            for p in 0..self.plane {
                let Some(y) = self.targets[s * self.plane + p] else {
                    continue;
                };
                // d loss / d P_c at this pixel
                for (c, d) in dp.iter_mut().enumerate() {
                    *d = match self.terms[c] {
                        Some((num, den)) => {
                            let yc = if c == y { 2.0 } else { 0.0 };
                            -g * (yc * den - num) / (den * den)
                        }
                        None => 0.0,
                    };
                }
                let idx = |c: usize| (s * self.k + c) * self.plane + p;
                let dot: f64 = (0..self.k).map(|c| self.probs[idx(c)] * dp[c]).sum();
                for c in 0..self.k {
                    dx[idx(c)] = self.probs[idx(c)] * (dp[c] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Soft multiclass Dice loss averaged over classes present in the labels.
pub fn dice_loss(graph: &mut Graph, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let Prepared { n, k, plane, .. } = prepare(graph, logits, labels, cfg)?;
    let probs = softmax_channel_raw(graph.value(logits).data(), n, k, plane);
    let mut inter = vec![0.0; k];
    let mut pred_sum = vec![0.0; k];
    let mut truth = vec![0u64; k];
    let mut targets = Vec::with_capacity(n * plane);
    for s in 0..n {
        for p in 0..plane {
            let y = labels.data()[s * plane + p];
            if y == cfg.ignore_index {
                targets.push(None);
                continue;
            }
            let y = y as usize;
            targets.push(Some(y));
            truth[y] += 1;
            for c in 0..k {
                pred_sum[c] += probs[(s * k + c) * plane + p];
            }
            inter[y] += probs[(s * k + y) * plane + p];
        }
    }
    let s = cfg.dice_smooth;
    let terms: Vec<Option<(f64, f64)>> = (0..k)
        .map(|c| (truth[c] > 0).then(|| (2.0 * inter[c] + s, pred_sum[c] + truth[c] as f64 + s)))
        .collect();
    let present = terms.iter().flatten().count();
    let value = terms.iter().flatten().map(|(num, den)| 1.0 - num / den).sum::<f64>() / present as f64;
    Ok(graph.record(
        Tensor::scalar(value),
        &[logits],
        DiceOp {
            n,
            k,
            plane,
            probs,
            targets,
            terms,
            present,
        },
    ))
}

/// `alpha · cross_entropy + (1 − alpha) · dice_loss`.
pub fn combined_loss(graph: &mut Graph, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let ce = cross_entropy(graph, logits, labels, cfg)?;
    let dice = dice_loss(graph, logits, labels, cfg)?;
    let a = graph.scale(ce, cfg.alpha);
    let b = graph.scale(dice, 1.0 - cfg.alpha);
    graph.add(a, b)
}
