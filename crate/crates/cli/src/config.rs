//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Every key is optional
//! and unknown or repeated keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use auseg::error::{Error, Result};
use auseg::model::UnetConfig;
use auseg::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum ClassWeights {
    Uniform,
    /// Computed from the training labels at startup.
    InverseFrequency,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub model: UnetConfig,
    pub train: TrainConfig,
    pub class_weights: ClassWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            model: UnetConfig::default(),
            train: TrainConfig::default(),
            class_weights: ClassWeights::Uniform,
        }
    }
}

/// `(key, description)` in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("data_root", "dataset root holding one directory per split"),
    ("train_split", "training split directory name"),
    ("val_split", "validation split directory name"),
    ("seed", "seed for weight init, shuffling, augmentation, and dropout"),
    ("epochs", "training epochs; also the cosine schedule length"),
    ("batch_size", "samples per optimizer step"),
    ("lr_max", "initial learning rate"),
    ("lr_min", "final learning rate of the cosine schedule"),
    ("weight_decay", "decoupled AdamW weight decay"),
    ("early_stopping", "stop once validation loss stalls"),
    ("patience", "non-improving epochs tolerated before stopping"),
    ("min_delta", "smallest validation loss drop counted as improvement"),
    ("in_channels", "image channels"),
    ("num_classes", "segmentation classes"),
    ("depth", "encoder levels; inputs must be multiples of 2^depth"),
    (
        "base_channels",
        "channels of the first encoder level, doubled per level",
    ),
    ("attention", "gate skip connections with channel and spatial attention"),
    ("attention_composition", "parallel or sequential gate derivation"),
    ("reduction_ratio", "channel attention bottleneck ratio"),
    ("spatial_kernel", "spatial attention kernel size (odd)"),
    ("dropout", "dropout rate after every conv block"),
    ("alpha", "cross-entropy share of the loss; Dice gets 1 - alpha"),
    ("dice_smooth", "Dice smoothing constant"),
    ("class_weights", "none, inverse_frequency, or a comma-separated list"),
    ("ignore_index", "label value excluded from loss and metrics"),
    ("crop", "random crop HxW, or none"),
    ("flip_prob", "horizontal flip probability"),
    ("jitter", "per-channel brightness jitter bound"),
    ("wall_clock", "record epoch durations in the training log"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key {key} expects true or false, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "train_split" => self.train_split = value.to_owned(),
            "val_split" => self.val_split = value.to_owned(),
            "seed" => t.seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_max" => t.lr_max = parse(key, value)?,
            "lr_min" => t.lr_min = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "early_stopping" => t.early_stopping = parse_bool(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "min_delta" => t.min_delta = parse(key, value)?,
            "in_channels" => m.in_channels = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "base_channels" => m.base_channels = parse(key, value)?,
            "attention" => m.attention_enabled = parse_bool(key, value)?,
            "attention_composition" => m.attention_composition = value.parse()?,
            "reduction_ratio" => m.reduction_ratio = parse(key, value)?,
            "spatial_kernel" => m.spatial_kernel = parse(key, value)?,
            "dropout" => m.dropout_rate = parse(key, value)?,
            "alpha" => t.loss.alpha = parse(key, value)?,
            "dice_smooth" => t.loss.dice_smooth = parse(key, value)?,
            "class_weights" => {
                self.class_weights = match value {
                    "none" => ClassWeights::Uniform,
                    "inverse_frequency" => ClassWeights::InverseFrequency,
                    list => ClassWeights::Fixed(list.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?),
                }
            }
            "ignore_index" => t.loss.ignore_index = parse(key, value)?,
            "crop" => {
                t.augment.crop = match value {
                    "none" => None,
                    hw => {
                        let (h, w) = hw
                            .split_once('x')
                            .ok_or_else(|| Error::Config(format!("key crop expects HxW or none, got {hw:?}")))?;
                        Some((parse(key, h)?, parse(key, w)?))
                    }
                }
            }
            "flip_prob" => t.augment.flip_prob = parse(key, value)?,
            "jitter" => t.augment.jitter = parse(key, value)?,
            "wall_clock" => t.wall_clock = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "data_root" => self.data_root.display().to_string(),
            "train_split" => self.train_split.clone(),
            "val_split" => self.val_split.clone(),
            "seed" => t.seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_max" => t.lr_max.to_string(),
            "lr_min" => t.lr_min.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "early_stopping" => t.early_stopping.to_string(),
            "patience" => t.patience.to_string(),
            "min_delta" => t.min_delta.to_string(),
            "in_channels" => m.in_channels.to_string(),
            "num_classes" => m.num_classes.to_string(),
            "depth" => m.depth.to_string(),
            "base_channels" => m.base_channels.to_string(),
            "attention" => m.attention_enabled.to_string(),
            "attention_composition" => m.attention_composition.to_string(),
            "reduction_ratio" => m.reduction_ratio.to_string(),
            "spatial_kernel" => m.spatial_kernel.to_string(),
            "dropout" => m.dropout_rate.to_string(),
            "alpha" => t.loss.alpha.to_string(),
            "dice_smooth" => t.loss.dice_smooth.to_string(),
            "class_weights" => match &self.class_weights {
                ClassWeights::Uniform => "none".into(),
                ClassWeights::InverseFrequency => "inverse_frequency".into(),
                ClassWeights::Fixed(w) => w.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            },
            "ignore_index" => t.loss.ignore_index.to_string(),
            "crop" => match t.augment.crop {
                None => "none".into(),
                Some((h, w)) => format!("{h}x{w}"),
            },
            "flip_prob" => t.augment.flip_prob.to_string(),
            "jitter" => t.augment.jitter.to_string(),
            "wall_clock" => t.wall_clock.to_string(),
            _ => return None,
        })
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: key {key} given twice", i + 1)));
            }
            seen.push(key);
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    /// Every key with its effective value, in [`KEYS`] order. Parsing the
    /// result yields an equal config.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(s, "# {doc}");
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }

    /// Model, loss, and training settings checked together.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let ClassWeights::Fixed(w) = &self.class_weights {
            if w.len() != self.model.num_classes {
                return Err(Error::Config(format!(
                    "class_weights lists {} values for {} classes",
                    w.len(),
                    self.model.num_classes
                )));
            }
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
