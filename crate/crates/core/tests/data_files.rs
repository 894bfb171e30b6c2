use std::fs;
use std::path::Path;

use auseg::data::{
    batch_iter, encode_pnm, load_sample, synth::palette, synth_generate, synth_render, write_sample, Batch,
    DatasetSpec, PnmKind, Sample,
};
use auseg::{Error, LabelMap, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn put(dir: &Path, name: &str, bytes: Vec<u8>) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn white_image_and_zero_labels() {
    let dir = tempfile::tempdir().unwrap();
    let img = put(
        dir.path(),
        "a_img.ppm",
        b"P6\n2 2\n255\n".iter().copied().chain([255u8; 12]).collect(),
    );
    let lab = put(
        dir.path(),
        "a_lab.pgm",
        b"P5\n2 2\n255\n".iter().copied().chain([0u8; 4]).collect(),
    );
    let s = load_sample(&img, &lab, &DatasetSpec::new(dir.path(), ".", 3)).unwrap();
    assert_eq!(s.image.shape(), [3, 2, 2]);
    assert!(s.image.data().iter().all(|&v| v == 1.0));
    assert_eq!(s.label.shape(), [1, 2, 2]);
    assert!(s.label.data().iter().all(|&v| v == 0));
    assert_eq!(s.id, "a");
}

#[test]
fn extent_mismatch_names_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = put(dir.path(), "m_img.ppm", encode_pnm(PnmKind::Rgb, 4, 4, &[0; 48]));
    let lab = put(dir.path(), "m_lab.pgm", encode_pnm(PnmKind::Gray, 5, 4, &[0; 20]));
    let err = load_sample(&img, &lab, &DatasetSpec::new(dir.path(), ".", 3)).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("m_img.ppm") && msg.contains("m_lab.pgm"), "{msg}");
}

#[test]
fn out_of_range_label_reports_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let img = put(dir.path(), "o_img.ppm", encode_pnm(PnmKind::Rgb, 3, 2, &[9; 18]));
    let mut px = vec![0u8, 1, 255, 2, 0, 1];
    px[3] = 7;
    let bytes = encode_pnm(PnmKind::Gray, 3, 2, &px);
    let header = bytes.len() - px.len();
    let lab = put(dir.path(), "o_lab.pgm", bytes);
    match load_sample(&img, &lab, &DatasetSpec::new(dir.path(), ".", 3)).unwrap_err() {
        Error::DataAt { path, offset, .. } => {
            assert_eq!(path, lab);
            assert_eq!(offset, header + 3);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn malformed_headers_and_truncation_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let lab = put(dir.path(), "t_lab.pgm", encode_pnm(PnmKind::Gray, 2, 2, &[0; 4]));
    let spec = DatasetSpec::new(dir.path(), ".", 2);
    let mut short = encode_pnm(PnmKind::Rgb, 2, 2, &[0; 12]);
    short.pop();
    for (name, bytes) in [
        ("short_img.ppm", short),
        ("magic_img.ppm", b"P3\n2 2\n255\n".to_vec()),
        (
            "depth_img.ppm",
            b"P6\n2 2\n65535\n".iter().copied().chain([0u8; 24]).collect(),
        ),
    ] {
        let img = put(dir.path(), name, bytes);
        let err = load_sample(&img, &lab, &spec).unwrap_err();
        assert!(matches!(err, Error::DataAt { .. }), "{name}: {err}");
    }
    let err = load_sample(&dir.path().join("absent_img.ppm"), &lab, &spec).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn dataset_round_trip_and_missing_partner() {
    let dir = tempfile::tempdir().unwrap();
    let split = dir.path().join("train");
    fs::create_dir(&split).unwrap();
    let samples = synth_generate(3, 16, 24, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for s in &samples {
        write_sample(&split, s).unwrap();
    }
    let spec = DatasetSpec::new(dir.path(), "train", 4);
    let loaded = spec.load().unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    fs::remove_file(split.join("synth_00001_lab.pgm")).unwrap();
    let err = spec.load().unwrap_err().to_string();
    assert!(
        err.contains("synth_00001_img.ppm") && err.contains("synth_00001_lab.pgm"),
        "{err}"
    );
}

#[test]
fn nearest_palette_color_recovers_noise_free_labels() {
    let pal = palette();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [2, 3, 8, 32] {
        let samples = synth_render(4, 32, 32, k, 0.0, &mut rng).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for s in &samples {
            let plane = 32 * 32;
            for p in 0..plane {
                let px = [0, 1, 2].map(|c| s.image.data()[c * plane + p]);
                let nearest = (0..k)
                    .min_by(|&a, &b| {
                        let d = |i: usize| (0..3).map(|c| (pal[i][c] - px[c]).powi(2)).sum::<f64>();
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap();
                hit += (nearest == s.label.data()[p] as usize) as usize;
                total += 1;
            }
        }
        assert!(hit as f64 / total as f64 >= 0.9, "k={k}: {hit}/{total}");
    }
}

#[test]
fn synthetic_data_is_seeded_and_shows_every_class() {
    let a = synth_generate(5, 20, 18, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = synth_generate(5, 20, 18, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut seen = s.label.data().to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, [0, 1, 2, 3, 4]);
    }
    let one = synth_generate(1, 16, 16, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut vals = one[0].label.data().to_vec();
    vals.sort();
    vals.dedup();
    assert_eq!(vals, [0, 1]);
    assert!(matches!(
        synth_generate(1, 8, 16, 2, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        synth_generate(1, 16, 16, 33, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn ten_samples_in_batches_of_four() {
    let samples = synth_generate(10, 16, 16, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let sizes: Vec<usize> = batch_iter(&samples, 4, true, None, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap()
        .map(|b| b.unwrap().len())
        .collect();
    assert_eq!(sizes, [4, 4, 2]);
}

#[test]
fn mixed_extents_cannot_share_a_batch() {
    let mk = |w: usize| {
        Sample::new(
            Tensor::zeros(&[3, 2, w]).unwrap(),
            LabelMap::filled(1, 2, w, 0).unwrap(),
            format!("w{w}"),
        )
        .unwrap()
    };
    let (a, b) = (mk(2), mk(3));
    let err = Batch::from_samples(&[&a, &b]).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert!(err.to_string().contains("w2") && err.to_string().contains("w3"));
}
