//! Procedural segmentation scenes: flat-colored rectangles and discs on a
//! background, one shape per foreground class, with Gaussian pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{config_err, Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub const PALETTE_SIZE: usize = 32;
pub const DEFAULT_NOISE: f64 = 0.05;
pub const MIN_EXTENT: usize = 16;

const LEVELS: [f64; 4] = [0.05, 0.35, 0.65, 0.95];
const MAX_ATTEMPTS: usize = 10_000;

/// Class colors on a `{0.05, 0.35, 0.65, 0.95}^3` lattice; the eight cube
/// corners come first, so small class counts get well separated colors.
pub fn palette() -> Vec<[f64; 3]> {
    let mut corners = Vec::new();
    let mut rest = Vec::new();
    for r in 0..4 {
        for g in 0..4 {
            for b in 0..4 {
                let color = [LEVELS[r], LEVELS[g], LEVELS[b]];
                if [r, g, b].iter().all(|&i| i == 0 || i == 3) {
                    corners.push(color);
                } else if (r + g + b) % 2 == 0 {
                    rest.push(color);
                }
            }
        }
    }
    corners.extend(rest);
    corners.truncate(PALETTE_SIZE);
    corners
}

/// `n` samples of `h × w` with `k` classes and the default noise level.
pub fn synth_generate<R: Rng + ?Sized>(n: usize, h: usize, w: usize, k: usize, rng: &mut R) -> Result<Vec<Sample>> {
    synth_render(n, h, w, k, DEFAULT_NOISE, rng)
}

/// Every sample contains all `k` classes.
pub fn synth_render<R: Rng + ?Sized>(
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if !(2..=PALETTE_SIZE).contains(&k) {
        return Err(config_err!(
            "synthetic class count must be in 2..={PALETTE_SIZE}, got {k}"
        ));
    }
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(config_err!(
            "synthetic images must be at least {MIN_EXTENT}x{MIN_EXTENT}, got {h}x{w}"
        ));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(config_err!(
            "noise level must be a finite non-negative number, got {noise}"
        ));
    }
    let palette = palette();
    let normal = Normal::new(0.0, noise).map_err(|e| config_err!("noise level: {e}"))?;
    (0..n)
        .map(|i| {
            let labels = layout(h, w, k, rng)?;
            let plane = h * w;
            let mut data = vec![0.0; 3 * plane];
            for (p, &class) in labels.iter().enumerate() {
                for c in 0..3 {
                    let jitter = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                    data[c * plane + p] = (palette[class as usize][c] + jitter).clamp(0.0, 1.0);
                }
            }
            Sample::new(
                Tensor::from_vec(&[3, h, w], data)?,
                LabelMap::new(1, h, w, labels)?,
                format!("synth_{i:05}"),
            )
        })
        .collect()
}

fn layout<R: Rng + ?Sized>(h: usize, w: usize, k: usize, rng: &mut R) -> Result<Vec<u8>> {
    for _ in 0..MAX_ATTEMPTS {
        let mut labels = vec![0u8; h * w];
        for class in 1..k {
            paint(&mut labels, h, w, class as u8, rng);
        }
        let mut seen = vec![false; k];
        labels.iter().for_each(|&v| seen[v as usize] = true);
        if seen.iter().all(|&s| s) {
            return Ok(labels);
        }
    }
    Err(Error::Data(format!(
        "could not place {k} visible classes in a {h}x{w} image"
    )))
}

fn paint<R: Rng + ?Sized>(labels: &mut [u8], h: usize, w: usize, class: u8, rng: &mut R) {
    if rng.random_bool(0.5) {
        let rh = rng.random_range(h / 8..=h / 3);
        let rw = rng.random_range(w / 8..=w / 3);
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            labels[y * w + x0..y * w + x0 + rw].fill(class);
        }
    } else {
        let m = h.min(w);
        let r = rng.random_range(m / 16..=m / 6) as f64;
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r * r {
                    labels[y * w + x] = class;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn palette_is_distinct() {
        let p = palette();
        assert_eq!(p.len(), PALETTE_SIZE);
        for i in 0..p.len() {
            for j in 0..i {
                assert_ne!(p[i], p[j]);
            }
        }
    }

    #[test]
    fn every_class_is_present() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [2, 5, 19, 32] {
            for s in synth_generate(3, 16, 20, k, &mut rng).unwrap() {
                let mut seen = vec![false; k];
                s.label.data().iter().for_each(|&v| seen[v as usize] = true);
                assert!(seen.iter().all(|&b| b), "k = {k}");
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(synth_generate(1, 16, 16, 33, &mut rng), Err(Error::Config(_))));
        assert!(matches!(synth_generate(1, 16, 16, 1, &mut rng), Err(Error::Config(_))));
        assert!(matches!(synth_generate(1, 8, 16, 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn noise_free_pixels_match_palette() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = &synth_render(1, 16, 16, 4, 0.0, &mut rng).unwrap()[0];
        let p = palette();
        for (i, &c) in s.label.data().iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(s.image.data()[ch * 256 + i], p[c as usize][ch]);
            }
        }
    }
}
