//! Optimization loop, validation, and the learning-rate sweep harness.

mod log;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use log::{moving_average, LogRow, TrainLog, CSV_HEADER};
pub use optim::{adamw_step, AdamWState, CosineSchedule, EarlyStopper, StopDecision, BETA1, BETA2, EPSILON};

use crate::autodiff::Graph;
use crate::data::{batch_iter, AugmentConfig, Sample};
use crate::error::{config_err, Error, Result};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax_labels, ForwardOptions, UnetConfig, UnetModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub early_stopping: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Record real epoch durations in the log; when off the column is zero
    /// and the log is a pure function of seed, config, and data.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            lr_max: 0.0005,
            lr_min: 1e-6,
            weight_decay: 0.01,
            early_stopping: true,
            patience: 10,
            min_delta: 1e-4,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<CosineSchedule> {
        CosineSchedule::new(self.lr_max, self.lr_min, self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.lr_max <= 0.0 {
            return Err(config_err!("lr_max must be positive, got {}", self.lr_max));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(config_err!("min_delta must be non-negative, got {}", self.min_delta));
        }
        self.schedule()?;
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// Builds a model whose initial weights depend only on `seed`.
pub fn init_model(config: &UnetConfig, seed: u64) -> Result<UnetModel> {
    UnetModel::build(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Combined loss averaged over samples.
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    pub fn miou(&self) -> Result<f64> {
        self.confusion.miou()
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        self.confusion.pixel_accuracy()
    }
}

/// Inference-mode loss and confusion matrix over `samples`.
pub fn evaluate(model: &UnetModel, samples: &[Sample], batch_size: usize, loss: &LossConfig) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(config_err!("evaluation split is empty"));
    }
    let k = model.config().num_classes;
    let mut confusion = ConfusionMatrix::new(k);
    let mut total = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in batch_iter(samples, batch_size, false, None, &mut rng)? {
        let batch = batch?;
        let logits = model.logits(&batch.images)?;
        confusion.accumulate(&argmax_labels(&logits)?, &batch.labels, loss.ignore_index)?;
        let mut g = Graph::new();
        let lv = g.constant(logits);
        let l = combined_loss(&mut g, lv, &batch.labels, loss)?;
        total += g.value(l).data()[0] * batch.len() as f64;
    }
    Ok(Evaluation {
        loss: total / samples.len() as f64,
        confusion,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: UnetModel,
    pub best_epoch: usize,
    pub final_model: UnetModel,
    pub log: TrainLog,
    pub stopped_early: bool,
}

pub fn train(model: UnetModel, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback invoked after every logged epoch.
pub fn train_with(
    mut model: UnetModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(config_err!("training split is empty"));
    }
    if val_set.is_empty() {
        return Err(config_err!("validation split is empty"));
    }
    let k = model.config().num_classes;
    for s in train_set.iter().chain(val_set) {
        s.label
            .validate(k, cfg.loss.ignore_index)
            .map_err(|e| Error::Data(format!("sample {}: {e}", s.id)))?;
    }
    let schedule = cfg.schedule()?;
    let mut state = AdamWState::new(model.params(), cfg.weight_decay);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut best = (model.clone(), 0, f64::INFINITY);
    let mut stopped_early = false;
    let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = schedule.lr(epoch);
        let mut seen = 0usize;
        let mut loss_sum = 0.0;
        let batches = batch_iter(train_set, cfg.batch_size, true, Some(&cfg.augment), &mut rng)?;
        for (bi, batch) in batches.enumerate() {
            let batch = batch?;
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let locate = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let x = g.constant(batch.images);
            let logits = model
                .forward_with(&mut g, &bound, x, ForwardOptions::train(), &mut dropout_rng)
                .map_err(locate)?;
            let loss = combined_loss(&mut g, logits, &batch.labels, &cfg.loss).map_err(locate)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, batch {bi}: loss is {value}")));
            }
            g.backward(loss)?;
            let grads: Vec<&[f64]> = bound.iter().zip(&zeros).map(|(&v, z)| g.grad(v).unwrap_or(z)).collect();
            adamw_step(model.params_mut(), &grads, &mut state, lr).map_err(locate)?;
            loss_sum += value * batch.ids.len() as f64;
            seen += batch.ids.len();
        }
        let eval = evaluate(&model, val_set, cfg.batch_size, &cfg.loss)?;
        let row = LogRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss: eval.loss,
            lr,
            miou: eval.miou()?,
            pa: eval.pixel_accuracy()?,
            seconds: if cfg.wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if row.val_loss < best.2 {
            best = (model.clone(), epoch, row.val_loss);
        }
        let decision = stopper.check(row.val_loss);
        on_epoch(&row);
        log.push(row)?;
        if cfg.early_stopping && decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        final_model: model,
        log,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lr: f64,
    pub miou: f64,
    pub pa: f64,
}

/// Trains from the same initial weights and data once per learning rate and
/// scores the best checkpoint on `val_set`. Rows follow the input order.
pub fn lr_sweep(
    model_cfg: &UnetConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    base: &TrainConfig,
    lrs: &[f64],
) -> Result<Vec<SweepRow>> {
    if lrs.is_empty() {
        return Err(config_err!("learning-rate sweep needs at least one rate"));
    }
    lrs.iter()
        .map(|&lr| {
            let cfg = TrainConfig {
                lr_max: lr,
                ..base.clone()
            };
            let out = train(init_model(model_cfg, cfg.seed)?, train_set, val_set, &cfg)?;
            let eval = evaluate(&out.best, val_set, cfg.batch_size, &cfg.loss)?;
            Ok(SweepRow {
                lr,
                miou: eval.miou()?,
                pa: eval.pixel_accuracy()?,
            })
        })
        .collect()
}

/// `Learning Rate | mIoU | PA` table, scores in percent with one decimal.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>13} | {:>6} | {:>6}\n", "Learning Rate", "mIoU", "PA");
    for r in rows {
        let _ = writeln!(s, "{:>13} | {:>6.1} | {:>6.1}", r.lr, r.miou * 100.0, r.pa * 100.0);
    }
    s
}
