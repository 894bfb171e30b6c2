use std::collections::BTreeMap;
use std::path::Path;

use auseg::data::{
    batch_iter, color_jitter, encode_pnm, horizontal_flip, parse_pnm, random_crop, AugmentConfig, PnmKind, Sample,
};
use auseg::{LabelMap, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generated cases per property.
pub const DATA_CASES: u32 = 256;

/// Image channel 0 stores the flat source index / 1000 and the label stores
/// it modulo 200, so any output pixel can be traced back to its origin.
fn traceable(c: usize, h: usize, w: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    let mut img = vec![0.0; c * plane];
    for i in 0..plane {
        img[i] = i as f64 / 1000.0;
        for ch in 1..c {
            img[ch * plane + i] = rng.random::<f64>();
        }
    }
    let lab = (0..plane).map(|i| (i % 200) as u8).collect();
    Sample::new(
        Tensor::from_vec(&[c, h, w], img).unwrap(),
        LabelMap::new(1, h, w, lab).unwrap(),
        format!("s{seed}"),
    )
    .unwrap()
}

fn source_index(s: &Sample, y: usize, x: usize) -> usize {
    (s.image.data()[y * s.width() + x] * 1000.0).round() as usize
}

fn aligned(s: &Sample) -> bool {
    (0..s.height()).all(|y| (0..s.width()).all(|x| s.label.get(0, y, x) as usize == source_index(s, y, x) % 200))
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..4, 1usize..12, 1usize..12, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: DATA_CASES,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    fn flip_is_an_involution((c, h, w, seed) in dims()) {
        let s = traceable(c, h, w, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let once = horizontal_flip(&s, 1.0, &mut rng);
        prop_assert!(aligned(&once));
        if w > 1 {
            prop_assert_eq!(source_index(&once, 0, 0), w - 1);
        }
        prop_assert_eq!(horizontal_flip(&once, 1.0, &mut rng), s);
    }

    fn crop_moves_image_and_label_together((c, h, w, seed) in dims(), fh in 0.0f64..1.0, fw in 0.0f64..1.0) {
        let s = traceable(c, h, w, seed);
        let ch = 1 + ((h - 1) as f64 * fh) as usize;
        let cw = 1 + ((w - 1) as f64 * fw) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let out = random_crop(&s, ch, cw, &mut rng).unwrap();
        prop_assert_eq!(out.image.shape(), &[c, ch, cw]);
        prop_assert!(aligned(&out));
        let origin = source_index(&out, 0, 0);
        for y in 0..ch {
            for x in 0..cw {
                prop_assert_eq!(source_index(&out, y, x), origin + y * w + x);
            }
        }
        prop_assert!(random_crop(&s, h + 1, cw, &mut rng).is_err());
    }

    fn jitter_leaves_labels_and_stays_in_range((c, h, w, seed) in dims(), delta in 0.0f64..=0.5) {
        let s = traceable(c, h, w, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = color_jitter(&s, delta, &mut rng).unwrap();
        prop_assert_eq!(&out.label, &s.label);
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in out.image.data().iter().zip(s.image.data()) {
            prop_assert!((a - b).abs() <= delta + 1e-15);
        }
    }

    fn every_epoch_visits_every_sample_once(n in 1usize..40, bs in 1usize..12, shuffle: bool, seed: u64) {
        let samples: Vec<Sample> = (0..n).map(|i| traceable(1, 2, 2, i as u64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches: Vec<_> = batch_iter(&samples, bs, shuffle, None, &mut rng)
            .unwrap()
            .map(Result::unwrap)
            .collect();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut seen = BTreeMap::new();
        for id in batches.iter().flat_map(|b| b.ids.iter()) {
            *seen.entry(id.clone()).or_insert(0) += 1;
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(seen.values().all(|&k| k == 1));
        if !shuffle {
            let order: Vec<&String> = batches.iter().flat_map(|b| b.ids.iter()).collect();
            let want: Vec<&String> = samples.iter().map(|s| &s.id).collect();
            prop_assert_eq!(order, want);
        }
    }

    fn seeded_batches_are_reproducible(n in 1usize..12, bs in 1usize..5, seed: u64) {
        let samples: Vec<Sample> = (0..n).map(|i| traceable(3, 6, 7, i as u64)).collect();
        let aug = AugmentConfig { crop: Some((4, 5)), flip_prob: 0.5, jitter: 0.2 };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            batch_iter(&samples, bs, true, Some(&aug), &mut rng)
                .unwrap()
                .map(Result::unwrap)
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        for batch in &a {
            prop_assert!(batch.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn augment_chain_preserves_alignment((c, h, w, seed) in dims()) {
        let s = traceable(c, h, w, seed);
        let aug = AugmentConfig { crop: Some((h.div_ceil(2), w)), flip_prob: 0.5, jitter: 0.0 };
        let out = aug.apply(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(aligned(&out));
    }

    fn pnm_round_trip(w in 1usize..20, h in 1usize..20, rgb: bool, seed: u64) {
        let kind = if rgb { PnmKind::Rgb } else { PnmKind::Gray };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..w * h * kind.channels()).map(|_| rng.random()).collect();
        let bytes = encode_pnm(kind, w, h, &px);
        let back = parse_pnm(&bytes, kind, Path::new("p")).unwrap();
        prop_assert_eq!((back.width, back.height), (w, h));
        prop_assert_eq!(back.pixels, px);
    }
}

pub const DATA_PROPERTIES: &[(&str, fn())] = &[
    ("flip_is_an_involution", flip_is_an_involution),
    ("crop_moves_image_and_label_together", crop_moves_image_and_label_together),
    ("jitter_leaves_labels_and_stays_in_range", jitter_leaves_labels_and_stays_in_range),
    ("every_epoch_visits_every_sample_once", every_epoch_visits_every_sample_once),
    ("seeded_batches_are_reproducible", seeded_batches_are_reproducible),
    ("augment_chain_preserves_alignment", augment_chain_preserves_alignment),
    ("pnm_round_trip", pnm_round_trip),
];
