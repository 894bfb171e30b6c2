//! Label-consistent augmentations. Geometric ops move image and label
//! together; photometric ops touch only the image.

use rand::Rng;

use super::Sample;
use crate::error::{config_err, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// `(height, width)` of a random crop, or no crop.
    pub crop: Option<(usize, usize)>,
    pub flip_prob: f64,
    /// Per-channel additive brightness offset bound.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: None,
            flip_prob: 0.5,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Identity augmentation.
    pub fn none() -> Self {
        AugmentConfig {
            crop: None,
            flip_prob: 0.0,
            jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(config_err!(
                "flip probability must be in [0, 1], got {}",
                self.flip_prob
            ));
        }
        check_jitter(self.jitter)?;
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return Err(config_err!("crop extent must be positive, got {h}x{w}"));
            }
        }
        Ok(())
    }

    /// Crop, then flip, then jitter.
    pub fn apply<R: Rng + ?Sized>(&self, sample: &Sample, rng: &mut R) -> Result<Sample> {
        self.validate()?;
        let s = match self.crop {
            Some((h, w)) => random_crop(sample, h, w, rng)?,
            None => sample.clone(),
        };
        let s = horizontal_flip(&s, self.flip_prob, rng);
        color_jitter(&s, self.jitter, rng)
    }
}

fn check_jitter(max_delta: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&max_delta) {
        return Err(config_err!("color jitter bound must be in [0, 0.5], got {max_delta}"));
    }
    Ok(())
}

pub fn random_crop<R: Rng + ?Sized>(sample: &Sample, ch: usize, cw: usize, rng: &mut R) -> Result<Sample> {
    let (c, h, w) = (sample.image.shape()[0], sample.height(), sample.width());
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(config_err!("crop {ch}x{cw} does not fit in a {h}x{w} sample"));
    }
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let img = sample.image.data();
    let mut data = Vec::with_capacity(c * ch * cw);
    for plane in 0..c {
        for y in y0..y0 + ch {
            let row = (plane * h + y) * w;
            data.extend_from_slice(&img[row + x0..row + x0 + cw]);
        }
    }
    let lab = sample.label.data();
    let mut labels = Vec::with_capacity(ch * cw);
    for y in y0..y0 + ch {
        labels.extend_from_slice(&lab[y * w + x0..y * w + x0 + cw]);
    }
    Sample::new(
        Tensor::from_vec(&[c, ch, cw], data)?,
        LabelMap::new(1, ch, cw, labels)?,
        sample.id.clone(),
    )
}

/// Mirrors left-right with probability `p`. One uniform draw either way.
pub fn horizontal_flip<R: Rng + ?Sized>(sample: &Sample, p: f64, rng: &mut R) -> Sample {
    let flip = rng.random::<f64>() < p;
    let mut out = sample.clone();
    if flip {
        let w = sample.width();
        out.image.data_mut().chunks_exact_mut(w).for_each(|r| r.reverse());
        out.label.data_mut().chunks_exact_mut(w).for_each(|r| r.reverse());
    }
    out
}

/// Adds a per-channel offset drawn from `[-max_delta, max_delta]` and clamps
/// to `[0, 1]`. `max_delta = 0` is the identity.
pub fn color_jitter<R: Rng + ?Sized>(sample: &Sample, max_delta: f64, rng: &mut R) -> Result<Sample> {
    check_jitter(max_delta)?;
    let mut out = sample.clone();
    if max_delta == 0.0 {
        return Ok(out);
    }
    let plane = sample.height() * sample.width();
    for ch in out.image.data_mut().chunks_exact_mut(plane) {
        let delta = rng.random_range(-max_delta..=max_delta);
        ch.iter_mut().for_each(|v| *v = (*v + delta).clamp(0.0, 1.0));
    }
    Ok(out)
}
