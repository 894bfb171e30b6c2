use auseg::attention::{
    channel_attention, hybrid_attention_block, spatial_attention, ChannelAttentionParams, Composition,
    SpatialAttentionParams,
};
use auseg::model::{ForwardOptions, UnetConfig, UnetModel};
use auseg::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 100;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Case {
    f: Tensor,
    ca: ChannelAttentionParams,
    sa: SpatialAttentionParams,
}

fn random_case(rng: &mut ChaCha8Rng, scale: f64) -> Case {
    let r = [1, 2][rng.random_range(0..2)];
    let c = r * rng.random_range(1..4);
    let (n, h, w) = (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..6));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let mut ca = ChannelAttentionParams::init(c, r, rng).unwrap();
    let mut sa = SpatialAttentionParams::init(k, rng).unwrap();
    ca.w1.data_mut().iter_mut().for_each(|v| *v *= scale);
    ca.w2.data_mut().iter_mut().for_each(|v| *v *= scale);
    sa.conv.weight.data_mut().iter_mut().for_each(|v| *v *= scale);
    Case {
        f: Tensor::uniform(&[n, c, h, w], -3.0, 3.0, rng).unwrap(),
        ca,
        sa,
    }
}

/// Returns (channel gate, spatial gate, block output) for `composition`.
fn run(case: &Case, composition: Composition) -> (Tensor, Tensor, Tensor) {
    let mut g = Graph::new();
    let f = g.constant(case.f.clone());
    let cv = case.ca.bind(&mut g, false);
    let sv = case.sa.bind(&mut g, false);
    let wc = channel_attention(&mut g, f, &cv).unwrap();
    let ws = spatial_attention(&mut g, f, &sv).unwrap();
    let out = hybrid_attention_block(&mut g, f, &cv, &sv, composition).unwrap();
    let get = |v: Var| g.value(v).clone();
    (get(wc), get(ws), get(out))
}

fn channel_gate_oracle(case: &Case) -> Vec<f64> {
    let s = case.f.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let hidden = case.ca.w1.shape()[0];
    let (w1, w2) = (case.ca.w1.data(), case.ca.w2.data());
    let mut out = Vec::new();
    for b in 0..n {
        let gap: Vec<f64> = (0..c)
            .map(|ch| case.f.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let mut z = vec![0.0; hidden];
        for (j, zj) in z.iter_mut().enumerate() {
            for ch in 0..c {
                *zj += w1[j * c + ch] * gap[ch];
            }
            *zj = zj.max(0.0);
        }
        for ch in 0..c {
            let mut acc = 0.0;
            for (j, zj) in z.iter().enumerate() {
                acc += w2[ch * hidden + j] * zj;
            }
            out.push(sigmoid(acc));
        }
    }
    out
}

fn spatial_gate_oracle(f: &Tensor, sa: &SpatialAttentionParams) -> Vec<f64> {
    let s = f.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = sa.conv.weight.shape()[2];
    let p = (k / 2) as isize;
    let wt = sa.conv.weight.data();
    let bias = sa.conv.bias.data()[0];
    let mut out = Vec::new();
    for b in 0..n {
        let at = |ch: usize, y: usize, x: usize| f.data()[((b * c + ch) * h + y) * w + x];
        let mut maps = [vec![0.0; h * w], vec![0.0; h * w]];
        for y in 0..h {
            for x in 0..w {
                maps[0][y * w + x] = (0..c).map(|ch| at(ch, y, x)).fold(f64::NEG_INFINITY, f64::max);
                maps[1][y * w + x] = (0..c).map(|ch| at(ch, y, x)).sum::<f64>() / c as f64;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias;
                for (m, map) in maps.iter().enumerate() {
                    for i in 0..k {
                        for j in 0..k {
                            let (yy, xx) = (y as isize + i as isize - p, x as isize + j as isize - p);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += wt[(m * k + i) * k + j] * map[yy as usize * w + xx as usize];
                            }
                        }
                    }
                }
                out.push(sigmoid(acc));
            }
        }
    }
    out
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}");
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() < tol, "{what} [{i}]: {a} vs {b}");
    }
}

pub fn channel_gate_matches_matrix_vector_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..CASES {
        let case = random_case(&mut rng, 2.0);
        let (wc, _, _) = run(&case, Composition::Parallel);
        assert_eq!(wc.shape(), [case.f.shape()[0], case.f.shape()[1], 1, 1]);
        assert_close(wc.data(), &channel_gate_oracle(&case), 1e-12, "channel gate");
    }
}

pub fn composed_block_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..CASES {
        let case = random_case(&mut rng, 2.0);
        let s = case.f.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        let wc = channel_gate_oracle(&case);

        let ws = spatial_gate_oracle(&case.f, &case.sa);
        let parallel: Vec<f64> = (0..case.f.numel())
            .map(|i| {
                let (b, ch, p) = (i / (c * plane), (i / plane) % c, i % plane);
                case.f.data()[i] * wc[b * c + ch] * ws[b * plane + p]
            })
            .collect();
        let (_, ws_got, out) = run(&case, Composition::Parallel);
        assert_close(ws_got.data(), &ws, 1e-12, "spatial gate");
        assert_close(out.data(), &parallel, 1e-12, "parallel block");

        let scaled: Vec<f64> = (0..case.f.numel())
            .map(|i| case.f.data()[i] * wc[(i / (c * plane)) * c + (i / plane) % c])
            .collect();
        let scaled_t = Tensor::from_vec(&s, scaled.clone()).unwrap();
        let ws2 = spatial_gate_oracle(&scaled_t, &case.sa);
        let sequential: Vec<f64> = (0..case.f.numel())
            .map(|i| scaled[i] * ws2[(i / (c * plane)) * plane + i % plane])
            .collect();
        let (_, _, out) = run(&case, Composition::Sequential);
        assert_close(out.data(), &sequential, 1e-12, "sequential block");
    }
}

pub fn gates_stay_in_unit_interval_and_attenuate() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..CASES {
        let case = random_case(&mut rng, 1.0);
        for comp in [Composition::Parallel, Composition::Sequential] {
            let (wc, ws, out) = run(&case, comp);
            assert!(wc.data().iter().chain(ws.data()).all(|&g| g > 0.0 && g < 1.0));
            for (o, f) in out.data().iter().zip(case.f.data()) {
                assert!(o.abs() <= f.abs(), "{o} vs {f}");
            }
        }
    }
}

fn flip_w(t: &Tensor) -> Tensor {
    let w = t.shape()[t.rank() - 1];
    let mut out = t.clone();
    out.data_mut().chunks_exact_mut(w).for_each(|r| r.reverse());
    out
}

pub fn flip_equivariance_with_mirror_symmetric_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..CASES {
        let mut case = random_case(&mut rng, 1.0);
        let k = case.sa.conv.weight.shape()[3];
        let wt = case.sa.conv.weight.data_mut();
        for row in wt.chunks_exact_mut(k) {
            for j in 0..k / 2 {
                row[k - 1 - j] = row[j];
            }
        }
        let (_, _, out) = run(&case, Composition::Parallel);
        let flipped = Case {
            f: flip_w(&case.f),
            ca: case.ca.clone(),
            sa: case.sa.clone(),
        };
        let (_, _, out_f) = run(&flipped, Composition::Parallel);
        assert_close(out_f.data(), flip_w(&out).data(), 1e-12, "flip equivariance");
    }
}

pub fn channel_gate_ignores_pixel_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..CASES {
        let case = random_case(&mut rng, 2.0);
        let s = case.f.shape().to_vec();
        let plane = s[2] * s[3];
        let mut perm: Vec<usize> = (0..plane).collect();
        for i in (1..plane).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = case.f.clone();
        for (dst, src) in shuffled.data_mut().chunks_exact_mut(plane).zip(case.f.data().chunks_exact(plane)) {
            for (i, &p) in perm.iter().enumerate() {
                dst[i] = src[p];
            }
        }
        let (wc, _, _) = run(&case, Composition::Parallel);
        let other = Case {
            f: shuffled,
            ca: case.ca.clone(),
            sa: case.sa.clone(),
        };
        let (wc2, _, _) = run(&other, Composition::Parallel);
        assert_close(wc.data(), wc2.data(), 1e-12, "permuted channel gate");
    }
}

pub fn pinned_gates_reproduce_the_plain_unet_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for depth in 1..=3 {
        for comp in [Composition::Parallel, Composition::Sequential] {
            let cfg = UnetConfig {
                num_classes: 4,
                depth,
                base_channels: 4,
                attention_composition: comp,
                ..UnetConfig::default()
            };
            let with = UnetModel::build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(depth as u64)).unwrap();
            let plain = UnetModel::build(
                UnetConfig {
                    attention_enabled: false,
                    ..cfg
                },
                &mut ChaCha8Rng::seed_from_u64(depth as u64),
            )
            .unwrap();
            let side = 1 << depth;
            let x = Tensor::uniform(&[2, 3, 2 * side, 3 * side], 0.0, 1.0, &mut rng).unwrap();
            let forward = |m: &UnetModel, opts: ForwardOptions| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let (out, _) = m.forward(&mut g, xv, opts, &mut unused).unwrap();
                g.value(out).clone()
            };
            let pinned = forward(
                &with,
                ForwardOptions {
                    training: false,
                    pin_gates: true,
                },
            );
            let base = forward(&plain, ForwardOptions::eval());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&pinned), bits(&base), "depth {depth} {comp}");
            let free = forward(&with, ForwardOptions::eval());
            assert_ne!(bits(&free), bits(&base));
        }
    }
}

pub const ATTENTION_CHECKS: &[(&str, fn())] = &[
    ("channel_gate_matches_matrix_vector_oracle", channel_gate_matches_matrix_vector_oracle),
    ("composed_block_matches_loop_oracle", composed_block_matches_loop_oracle),
    ("gates_stay_in_unit_interval_and_attenuate", gates_stay_in_unit_interval_and_attenuate),
    ("flip_equivariance_with_mirror_symmetric_kernel", flip_equivariance_with_mirror_symmetric_kernel),
    ("channel_gate_ignores_pixel_order", channel_gate_ignores_pixel_order),
    ("pinned_gates_reproduce_the_plain_unet_bit_exactly", pinned_gates_reproduce_the_plain_unet_bit_exactly),
];
