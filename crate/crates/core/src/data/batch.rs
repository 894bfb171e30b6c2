use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AugmentConfig, Sample};
use crate::error::{config_err, shape_err, Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Stacked images `[n, c, h, w]` and labels `[n, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: LabelMap,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| shape_err!("cannot batch zero samples"))?;
        let shape = first.image.shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * first.image.numel());
        for s in samples {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "sample {} is {:?} but {} is {:?}; batch members must agree",
                    s.id,
                    s.image.shape(),
                    first.id,
                    shape
                )));
            }
            data.extend_from_slice(s.image.data());
        }
        let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.label).collect();
        Ok(Batch {
            images: Tensor::from_vec(&[samples.len(), shape[0], shape[1], shape[2]], data)?,
            labels: LabelMap::stack(&labels)?,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }
}

/// One epoch over `samples`. Order and every per-sample augmentation seed are
/// drawn from `rng` up front, so the emitted batches depend only on the seed
/// and not on how augmentation work is scheduled across threads.
pub struct BatchIter<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    seeds: Vec<u64>,
    augment: Option<&'a AugmentConfig>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter<'a, R: Rng + ?Sized>(
    samples: &'a [Sample],
    batch_size: usize,
    shuffle: bool,
    augment: Option<&'a AugmentConfig>,
    rng: &mut R,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    if let Some(a) = augment {
        a.validate()?;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let seeds = match augment {
        Some(_) => (0..samples.len()).map(|_| rng.random()).collect(),
        None => Vec::new(),
    };
    Ok(BatchIter {
        samples,
        order,
        seeds,
        augment,
        batch_size,
        pos: 0,
    })
}

impl BatchIter<'_> {
    /// Number of batches left, counting a short final batch.
    pub fn remaining(&self) -> usize {
        (self.order.len() - self.pos).div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let span = self.pos..end;
        self.pos = end;
        let picked: Vec<&Sample> = self.order[span.clone()].iter().map(|&i| &self.samples[i]).collect();
        Some(match self.augment {
            None => Batch::from_samples(&picked),
            Some(aug) => {
                let seeds = &self.seeds[span];
                picked
                    .par_iter()
                    .zip(seeds.par_iter())
                    .map(|(s, &seed)| aug.apply(s, &mut ChaCha8Rng::seed_from_u64(seed)))
                    .collect::<Result<Vec<Sample>>>()
                    .and_then(|v| Batch::from_samples(&v.iter().collect::<Vec<_>>()))
            }
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.remaining();
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}
