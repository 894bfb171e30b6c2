// Every kernel against a direct nested-loop implementation on random small
// instances. Agreement is required to 1e-12 absolute.

use auseg::labels::{LabelMap, IGNORE_INDEX};
use auseg::loss::{self, LossConfig};
use auseg::metrics::ConfusionMatrix;
use auseg::nn::{self, Padding};
use auseg::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 120;
const TOL: f64 = 1e-12;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng).unwrap()
}

fn assert_close(got: &[f64], want: &[f64], what: &str, case: usize) {
    assert_eq!(got.len(), want.len(), "{what} case {case}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() < TOL, "{what} case {case} index {i}: {g} vs {w}");
    }
}

fn eval1(x: &Tensor, f: impl Fn(&mut Graph, auseg::Var) -> auseg::Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v);
    g.value(out).clone()
}

fn rand_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, k: usize) -> LabelMap {
    let mut data: Vec<u8> = (0..n * h * w)
        .map(|_| if rng.random_bool(0.1) { IGNORE_INDEX } else { rng.random_range(0..k as u8) })
        .collect();
    data[0] = 0;
    LabelMap::new(n, h, w, data).unwrap()
}

pub fn conv2d_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..CASES {
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=k / 2);
        let h = rng.random_range(k.max(2)..8);
        let w = rng.random_range(k.max(2)..8);
        let x = rand_tensor(&mut rng, &[n, cin, h, w]);
        let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);

        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let (xd, wd) = (x.data(), wt.data());
        let mut want = vec![0.0; n * cout * oh * ow];
        for s in 0..n {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let (iy, ix) = (iy as usize, ix as usize);
                                    acc += xd[((s * cin + c) * h + iy) * w + ix] * wd[((o * cin + c) * k + i) * k + j];
                                }
                            }
                        }
                        want[((s * cout + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(wt), g.constant(b));
        let out = nn::conv2d(&mut g, xv, wv, Some(bv), stride, Padding::Explicit(pad)).unwrap();
        assert_eq!(g.shape(out), [n, cout, oh, ow]);
        assert_close(g.value(out).data(), &want, "conv2d", case);
    }
}

pub fn same_padding_keeps_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..CASES {
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let x = rand_tensor(&mut rng, &[1, 2, h, w]);
        let wt = rand_tensor(&mut rng, &[3, 2, k, k]);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(wt));
        let out = nn::conv2d(&mut g, xv, wv, None, 1, Padding::Same).unwrap();
        assert_eq!(g.shape(out), [1, 3, h, w]);
    }
}

pub fn transposed_conv2d_matches_scatter_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..CASES {
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let (ih, iw) = (rng.random_range(1..5), rng.random_range(1..5));
        let full = ((ih - 1) * stride + k).min((iw - 1) * stride + k);
        let pad = rng.random_range(0..=(full - 1) / 2);
        let x = rand_tensor(&mut rng, &[n, cin, ih, iw]);
        let wt = rand_tensor(&mut rng, &[cin, cout, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);

        let oh = (ih - 1) * stride + k - 2 * pad;
        let ow = (iw - 1) * stride + k - 2 * pad;
        let mut want = vec![0.0; n * cout * oh * ow];
        for s in 0..n {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        want[((s * cout + o) * oh + y) * ow + xx] = b.data()[o];
                    }
                }
            }
            for c in 0..cin {
                for iy in 0..ih {
                    for ix in 0..iw {
                        let v = x.data()[((s * cin + c) * ih + iy) * iw + ix];
                        for o in 0..cout {
                            for i in 0..k {
                                for j in 0..k {
                                    let y = (iy * stride + i) as isize - pad as isize;
                                    let xx = (ix * stride + j) as isize - pad as isize;
                                    if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                        continue;
                                    }
                                    want[((s * cout + o) * oh + y as usize) * ow + xx as usize] +=
                                        v * wt.data()[((c * cout + o) * k + i) * k + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(wt), g.constant(b));
        let out = nn::transposed_conv2d(&mut g, xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(g.shape(out), [n, cout, oh, ow]);
        assert_close(g.value(out).data(), &want, "transposed_conv2d", case);
    }
}

pub fn maxpool_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..CASES {
        let win = rng.random_range(1..4);
        let (n, c) = (rng.random_range(1..3), rng.random_range(1..4));
        let (oh, ow) = (rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (oh * win, ow * win);
        let x = rand_tensor(&mut rng, &[n, c, h, w]);
        let mut want = Vec::new();
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..win {
                        for j in 0..win {
                            m = m.max(x.data()[(p * h + y * win + i) * w + xx * win + j]);
                        }
                    }
                    want.push(m);
                }
            }
        }
        let out = eval1(&x, |g, v| nn::maxpool2d(g, v, win).unwrap());
        assert_eq!(out.shape(), [n, c, oh, ow]);
        assert_close(out.data(), &want, "maxpool2d", case);
    }
}

pub fn global_and_channel_pools_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..CASES {
        let (n, c, h, w) = (
            rng.random_range(1..3),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let x = rand_tensor(&mut rng, &[n, c, h, w]);
        let at = |s: usize, ch: usize, y: usize, xx: usize| x.data()[((s * c + ch) * h + y) * w + xx];

        let mut gap = Vec::new();
        for s in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        acc += at(s, ch, y, xx);
                    }
                }
                gap.push(acc / (h * w) as f64);
            }
        }
        let (mut cmax, mut cavg) = (Vec::new(), Vec::new());
        for s in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let vals: Vec<f64> = (0..c).map(|ch| at(s, ch, y, xx)).collect();
                    cmax.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                    cavg.push(vals.iter().sum::<f64>() / c as f64);
                }
            }
        }
        let out = eval1(&x, |g, v| nn::global_avg_pool(g, v).unwrap());
        assert_eq!(out.shape(), [n, c]);
        assert_close(out.data(), &gap, "global_avg_pool", case);
        let out = eval1(&x, |g, v| nn::channel_max_pool(g, v).unwrap());
        assert_eq!(out.shape(), [n, 1, h, w]);
        assert_close(out.data(), &cmax, "channel_max_pool", case);
        let out = eval1(&x, |g, v| nn::channel_avg_pool(g, v).unwrap());
        assert_close(out.data(), &cavg, "channel_avg_pool", case);
    }
}

/// Unshifted textbook softmax over axis 1.
fn softmax_oracle(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for p in 0..plane {
            let z: f64 = (0..k).map(|c| x.data()[(b * k + c) * plane + p].exp()).sum();
            for c in 0..k {
                out[(b * k + c) * plane + p] = x.data()[(b * k + c) * plane + p].exp() / z;
            }
        }
    }
    out
}

pub fn softmax_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..CASES {
        let shape = [rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..4)];
        let x = rand_tensor(&mut rng, &shape);
        let out = eval1(&x, |g, v| nn::softmax_channel(g, v).unwrap());
        assert_close(out.data(), &softmax_oracle(&x), "softmax", case);
    }
}

fn loss_value(
    logits: &Tensor,
    labels: &LabelMap,
    cfg: &LossConfig,
    f: fn(&mut Graph, auseg::Var, &LabelMap, &LossConfig) -> auseg::Result<auseg::Var>,
) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let l = f(&mut g, v, labels, cfg).unwrap();
    g.value(l).data()[0]
}

pub fn cross_entropy_and_dice_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..CASES {
        let (n, k, h, w) = (
            rng.random_range(1..3),
            rng.random_range(2..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        );
        let logits = rand_tensor(&mut rng, &[n, k, h, w]);
        let labels = rand_labels(&mut rng, n, h, w, k);
        let weights: Option<Vec<f64>> = rng
            .random_bool(0.5)
            .then(|| (0..k).map(|_| rng.random_range(0.1..3.0)).collect());
        let cfg = LossConfig {
            class_weights: weights.clone(),
            ..LossConfig::default()
        };
        let probs = softmax_oracle(&logits);
        let plane = h * w;

        let (mut ce, mut valid) = (0.0, 0usize);
        let mut inter = vec![0.0; k];
        let mut psum = vec![0.0; k];
        let mut count = vec![0.0; k];
        for b in 0..n {
            for p in 0..plane {
                let y = labels.data()[b * plane + p];
                if y == IGNORE_INDEX {
                    continue;
                }
                let y = y as usize;
                valid += 1;
                let wy = weights.as_ref().map_or(1.0, |w| w[y]);
                ce -= wy * probs[(b * k + y) * plane + p].ln();
                for c in 0..k {
                    let pc = probs[(b * k + c) * plane + p];
                    psum[c] += pc;
                    if c == y {
                        inter[c] += pc;
                        count[c] += 1.0;
                    }
                }
            }
        }
        let ce = ce / valid as f64;
        let s = cfg.dice_smooth;
        let present: Vec<usize> = (0..k).filter(|&c| count[c] > 0.0).collect();
        let dice = present
            .iter()
            .map(|&c| 1.0 - (2.0 * inter[c] + s) / (psum[c] + count[c] + s))
            .sum::<f64>()
            / present.len() as f64;

        let got_ce = loss_value(&logits, &labels, &cfg, loss::cross_entropy);
        let got_dice = loss_value(&logits, &labels, &cfg, loss::dice_loss);
        let got_combined = loss_value(&logits, &labels, &cfg, loss::combined_loss);
        assert_close(&[got_ce], &[ce], "cross_entropy", case);
        assert_close(&[got_dice], &[dice], "dice", case);
        assert_close(&[got_combined], &[0.5 * ce + 0.5 * dice], "combined", case);
    }
}

pub fn confusion_miou_pa_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..CASES {
        let (n, h, w, k) = (
            rng.random_range(1..3),
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(2..6),
        );
        let truth = rand_labels(&mut rng, n, h, w, k);
        let pred_data: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..k as u8)).collect();
        let pred = LabelMap::new(n, h, w, pred_data).unwrap();

        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &truth, IGNORE_INDEX).unwrap();

        let mut counts = vec![vec![0u64; k]; k];
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t != IGNORE_INDEX {
                counts[t as usize][p as usize] += 1;
            }
        }
        for t in 0..k {
            for p in 0..k {
                assert_eq!(cm.get(t, p), counts[t][p], "case {case}");
            }
        }
        let mut ious = Vec::new();
        for c in 0..k {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &t) in pred.data().iter().zip(truth.data()) {
                if t == IGNORE_INDEX {
                    continue;
                }
                match (p as usize == c, t as usize == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            if tp + fp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let (mut right, mut total) = (0u64, 0u64);
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t != IGNORE_INDEX {
                total += 1;
                right += u64::from(p == t);
            }
        }
        assert_close(&[cm.miou().unwrap()], &[miou], "miou", case);
        assert_close(&[cm.pixel_accuracy().unwrap()], &[right as f64 / total as f64], "pa", case);
    }
}

pub const ORACLE_CHECKS: &[(&str, fn())] = &[
    ("conv2d_matches_loops", conv2d_matches_loops),
    ("same_padding_keeps_extent", same_padding_keeps_extent),
    ("transposed_conv2d_matches_scatter_loops", transposed_conv2d_matches_scatter_loops),
    ("maxpool_matches_loops", maxpool_matches_loops),
    ("global_and_channel_pools_match_loops", global_and_channel_pools_match_loops),
    ("softmax_matches_loops", softmax_matches_loops),
    ("cross_entropy_and_dice_match_loops", cross_entropy_and_dice_match_loops),
    ("confusion_miou_pa_match_loops", confusion_miou_pa_match_loops),
];
