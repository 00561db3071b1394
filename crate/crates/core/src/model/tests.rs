#![allow(clippy::needless_range_loop)]

use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(in_channels: usize, num_classes: usize, depth: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        in_channels,
        num_classes,
        base_width: 4,
        depth,
        seed,
    }
}

fn random_image(w: usize, h: usize, c: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RasterImage::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
}

fn random_labels(n: usize, classes: u8, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Straight-line reference network: no shared kernels, every activation
/// indexed as `[c][y][x]` nested vectors.
mod naive {
    type Act = Vec<Vec<Vec<f64>>>;

    pub struct Params<'a> {
        pub w: &'a [f64],
        pub pos: usize,
    }

    impl Params<'_> {
        fn take(&mut self, n: usize) -> Vec<f64> {
            let v = self.w[self.pos..self.pos + n].to_vec();
            self.pos += n;
            v
        }
    }

    fn conv(x: &Act, p: &mut Params, out_c: usize, k: usize, relu: bool) -> Act {
        let in_c = x.len();
        let (h, w) = (x[0].len(), x[0][0].len());
        let wt = p.take(out_c * in_c * k * k);
        let b = p.take(out_c);
        let r = (k / 2) as isize;
        let mut out = vec![vec![vec![0.0; w]; h]; out_c];
        for o in 0..out_c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[o];
                    for i in 0..in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += wt[((o * in_c + i) * k + ky) * k + kx] * x[i][sy as usize][sx as usize];
                                }
                            }
                        }
                    }
                    out[o][y][xx] = if relu { acc.max(0.0) } else { acc };
                }
            }
        }
        out
    }

    fn pool(x: &Act) -> Act {
        x.iter()
            .map(|pl| {
                (0..pl.len() / 2)
                    .map(|y| {
                        (0..pl[0].len() / 2)
                            .map(|xx| {
                                pl[2 * y][2 * xx]
                                    .max(pl[2 * y][2 * xx + 1])
                                    .max(pl[2 * y + 1][2 * xx])
                                    .max(pl[2 * y + 1][2 * xx + 1])
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn up(x: &Act, h: usize, w: usize) -> Act {
        x.iter()
            .map(|pl| {
                (0..h)
                    .map(|y| (0..w).map(|xx| pl[(y / 2).min(pl.len() - 1)][(xx / 2).min(pl[0].len() - 1)]).collect())
                    .collect()
            })
            .collect()
    }

    /// Softmax probabilities `[y][x][k]`.
    pub fn forward(x: Act, weights: &[f64], base: usize, depth: usize, classes: usize) -> Vec<Vec<Vec<f64>>> {
        let mut p = Params { w: weights, pos: 0 };
        let mut skips = Vec::new();
        let mut cur = x;
        for i in 0..depth {
            let s = conv(&cur, &mut p, base << i, 3, true);
            cur = pool(&s);
            skips.push(s);
        }
        cur = conv(&cur, &mut p, base << depth, 3, true);
        for i in (0..depth).rev() {
            let skip = &skips[i];
            let mut cat = up(&cur, skip[0].len(), skip[0][0].len());
            cat.extend(skip.iter().cloned());
            cur = conv(&cat, &mut p, base << i, 3, true);
        }
        let logits = conv(&cur, &mut p, classes, 1, false);
        assert_eq!(p.pos, weights.len());
        let (h, w) = (logits[0].len(), logits[0][0].len());
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|xx| {
                        let z: Vec<f64> = (0..classes).map(|k| logits[k][y][xx]).collect();
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.iter().map(|v| v / s).collect()
                    })
                    .collect()
            })
            .collect()
    }
}

#[test]
fn init_is_deterministic() {
    let cfg = tiny(6, 5, 2, 11);
    let a = init_model(&cfg).unwrap();
    let b = init_model(&cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.weights, init_model(&tiny(6, 5, 2, 12)).unwrap().weights);
}

#[test]
fn parameter_count_matches_closed_form() {
    // enc0 4*6*9+4, bottleneck 8*4*9+8, dec0 4*12*9+4, head 5*4+5.
    let cfg = tiny(6, 5, 1, 0);
    let expect = (4 * 6 * 9 + 4) + (8 * 4 * 9 + 8) + (4 * 12 * 9 + 4) + (5 * 4 + 5);
    assert_eq!(expect, 977);
    assert_eq!(cfg.parameter_count(), expect);
    assert_eq!(init_model(&cfg).unwrap().weights.len(), expect);
}

#[test]
fn init_weights_within_three_sigma() {
    let cfg = ModelConfig {
        base_width: 8,
        ..tiny(6, 5, 2, 3)
    };
    let ckpt = init_model(&cfg).unwrap();
    let std = init_std(&cfg);
    assert!(ckpt.weights.iter().all(|w| w.is_finite()));
    let drawn: Vec<(f64, f64)> = ckpt.weights.iter().copied().zip(std).filter(|(_, s)| *s > 0.0).collect();
    let inside = drawn.iter().filter(|(w, s)| w.abs() <= 3.0 * s).count();
    assert!(inside as f64 >= 0.99 * drawn.len() as f64, "{inside}/{}", drawn.len());
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(init_model(&tiny(0, 5, 1, 0)).is_err());
    assert!(init_model(&tiny(3, 3, 1, 0)).is_err());
    assert!(init_model(&tiny(3, 2, 0, 0)).is_err());
}

#[test]
fn probabilities_are_normalized() {
    let ckpt = init_model(&tiny(6, 5, 2, 1)).unwrap();
    let probs = forward(&ckpt, &random_image(9, 7, 6, 2)).unwrap();
    assert_eq!((probs.width, probs.height, probs.classes), (9, 7, 5));
    for p in 0..probs.pixel_count() {
        let row = probs.pixel(p);
        assert!(row.iter().all(|v| *v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn zero_weights_give_uniform_output() {
    for classes in [2, 5] {
        let mut ckpt = init_model(&tiny(3, classes, 2, 1)).unwrap();
        ckpt.weights.fill(0.0);
        let probs = forward(&ckpt, &random_image(8, 8, 3, 4)).unwrap();
        assert!(probs.data.iter().all(|v| (v - 1.0 / classes as f64).abs() < 1e-15));
    }
}

#[test]
fn forward_matches_naive_oracle() {
    for (depth, w, h) in [(1, 6, 5), (2, 9, 8), (2, 8, 8)] {
        let cfg = tiny(3, 5, depth, 21);
        let ckpt = init_model(&cfg).unwrap();
        let img = random_image(w, h, 3, 5);
        let fast = forward(&ckpt, &img).unwrap();
        let x = (0..3)
            .map(|c| (0..h).map(|y| (0..w).map(|xx| 2.0 * img.get(xx, y, c) - 1.0).collect()).collect())
            .collect();
        let slow = naive::forward(x, &ckpt.weights, 4, depth, 5);
        for y in 0..h {
            for xx in 0..w {
                for k in 0..5 {
                    let a = fast.pixel(y * w + xx)[k];
                    assert!((a - slow[y][xx][k]).abs() < 1e-6, "depth {depth} at ({xx},{y},{k})");
                }
            }
        }
    }
}

#[test]
fn forward_errors() {
    let ckpt = init_model(&tiny(6, 5, 2, 1)).unwrap();
    assert!(matches!(forward(&ckpt, &random_image(8, 8, 3, 0)), Err(Error::InvalidArgument(_))));
    assert!(forward(&ckpt, &random_image(3, 8, 6, 0)).is_err());
}

#[test]
fn forward_is_bitwise_repeatable() {
    let ckpt = init_model(&tiny(6, 5, 2, 8)).unwrap();
    let img = random_image(12, 10, 6, 9);
    assert_eq!(forward(&ckpt, &img).unwrap(), forward(&ckpt, &img).unwrap());
}

#[test]
fn loss_of_one_hot_prediction_is_zero() {
    let target = vec![0u8, 3, 4, 1];
    let mut data = vec![0.0; 4 * 5];
    for (p, t) in target.iter().enumerate() {
        data[p * 5 + *t as usize] = 1.0;
    }
    let pred = ProbMap::new(2, 2, 5, data).unwrap();
    assert_eq!(masked_cross_entropy(&pred, &target, None).unwrap().loss, 0.0);
}

#[test]
fn loss_of_uniform_prediction_is_ln5() {
    let pred = ProbMap::new(3, 2, 5, vec![0.2; 30]).unwrap();
    let target = random_labels(6, 5, 1);
    let out = masked_cross_entropy(&pred, &target, None).unwrap();
    assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    assert!((out.loss - 1.6094).abs() < 1e-4);
}

#[test]
fn masked_loss_matches_scalar_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut data = Vec::new();
    for _ in 0..16 {
        let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.01).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    let pred = ProbMap::new(4, 4, 5, data.clone()).unwrap();
    let target = random_labels(16, 5, 14);
    let mask: Vec<u8> = (0..16).map(|p| u8::from(p % 4 < 2)).collect();
    let out = masked_cross_entropy(&pred, &target, Some(&mask)).unwrap();
    let mut sum = 0.0;
    let mut n = 0.0;
    for p in 0..16 {
        if mask[p] == 1 {
            sum += -data[p * 5 + target[p] as usize].ln();
            n += 1.0;
        }
    }
    assert_eq!(out.contributing, 8);
    assert!((out.loss - sum / n).abs() < 1e-9);
    // Masked-out pixels carry no gradient.
    for p in (0..16).filter(|p| mask[*p] == 0) {
        assert!(out.grad_logits[p * 5..p * 5 + 5].iter().all(|g| *g == 0.0));
    }
}

#[test]
fn empty_mask_gives_zero_loss_and_gradient() {
    let pred = ProbMap::new(2, 2, 2, vec![0.5; 8]).unwrap();
    let out = masked_cross_entropy(&pred, &[1, 0, 1, 0], Some(&[0; 4])).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grad_logits.iter().all(|g| *g == 0.0));
}

#[test]
fn loss_shape_mismatch_errors() {
    let pred = ProbMap::new(2, 2, 2, vec![0.5; 8]).unwrap();
    assert!(masked_cross_entropy(&pred, &[0; 3], None).is_err());
    assert!(masked_cross_entropy(&pred, &[0; 4], Some(&[1; 5])).is_err());
    assert!(masked_cross_entropy(&pred, &[0, 0, 0, 2], None).is_err());
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = tiny(3, 5, 2, 31);
    let mut ckpt = init_model(&cfg).unwrap();
    let img = random_image(8, 8, 3, 32);
    let target = random_labels(64, 5, 33);
    let mask: Vec<u8> = random_labels(64, 2, 34);
    let (_, grad) = loss_and_grad(&ckpt, &img, &target, Some(&mask)).unwrap();
    let loss_at = |c: &ModelCheckpoint| {
        masked_cross_entropy(&forward(c, &img).unwrap(), &target, Some(&mask)).unwrap().loss
    };
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let n = ckpt.weights.len();
    let picks: Vec<usize> = (0..250).map(|_| rng.random_range(0..n)).collect();
    let h = 1e-4;
    let mut good = 0;
    for &i in &picks {
        let w0 = ckpt.weights[i];
        ckpt.weights[i] = w0 + h;
        let up = loss_at(&ckpt);
        ckpt.weights[i] = w0 - h;
        let down = loss_at(&ckpt);
        ckpt.weights[i] = w0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-8);
        if rel < 1e-3 {
            good += 1;
        }
    }
    assert!(good as f64 >= 0.98 * picks.len() as f64, "{good}/{}", picks.len());
}

fn overfit_sample() -> TrainSample {
    // Four colored quadrants over background, each quadrant its own class.
    let palette = [[0.1, 0.1, 0.1], [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9], [0.9, 0.9, 0.2]];
    let label = |x: usize, y: usize| -> u8 {
        if x.is_multiple_of(8) || y.is_multiple_of(8) {
            0
        } else {
            1 + (x / 8 + 2 * (y / 8)) as u8
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let input = RasterImage::from_fn(16, 16, 3, |x, y, c| palette[label(x, y) as usize][c] + rng.random_range(-0.05..0.05));
    let target = (0..256).map(|p| label(p % 16, p / 16)).collect();
    TrainSample { input, target, mask: None }
}

fn overfit_hyper() -> TrainHyper {
    TrainHyper {
        learning_rate: 0.1,
        epochs: 200,
        crop_size: 16,
        batch_size: 1,
        crops_per_sample: 1,
        destroyed_bias: 0.0,
        seed: 7,
    }
}

#[test]
fn zero_epochs_keep_weights() {
    let ckpt = init_model(&tiny(3, 5, 2, 1)).unwrap();
    let hyper = TrainHyper { epochs: 0, ..overfit_hyper() };
    assert_eq!(train(&ckpt, &[overfit_sample()], &hyper).unwrap().weights, ckpt.weights);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let ckpt = init_model(&tiny(3, 5, 2, 1)).unwrap();
    let hyper = TrainHyper {
        learning_rate: 0.0,
        epochs: 3,
        ..overfit_hyper()
    };
    let out = train(&ckpt, &[overfit_sample()], &hyper).unwrap();
    assert_eq!(out.weights, ckpt.weights);
    assert_eq!(out.meta.epochs, 3);
}

#[test]
fn single_crop_overfits() {
    let cfg = ModelConfig { base_width: 8, ..tiny(3, 5, 2, 1) };
    let ckpt = init_model(&cfg).unwrap();
    let out = train(&ckpt, &[overfit_sample()], &overfit_hyper()).unwrap();
    assert_eq!(out.meta.steps, 200);
    let s = overfit_sample();
    let loss = masked_cross_entropy(&forward(&out, &s.input).unwrap(), &s.target, None).unwrap().loss;
    assert!(loss < 0.05, "loss {loss}");
}

#[test]
fn training_is_seed_deterministic() {
    let ckpt = init_model(&tiny(3, 5, 2, 1)).unwrap();
    let input = random_image(24, 24, 3, 2);
    let sample = TrainSample {
        target: random_labels(576, 5, 3),
        mask: Some(random_labels(576, 2, 4)),
        input,
    };
    let hyper = TrainHyper {
        epochs: 3,
        crop_size: 8,
        batch_size: 2,
        crops_per_sample: 3,
        learning_rate: 0.1,
        ..overfit_hyper()
    };
    let a = train(&ckpt, std::slice::from_ref(&sample), &hyper).unwrap();
    let b = train(&ckpt, &[sample], &hyper).unwrap();
    assert_eq!(a.meta.final_loss, b.meta.final_loss);
    assert_eq!(a.weights, b.weights);
}

#[test]
fn training_rejects_bad_inputs() {
    let ckpt = init_model(&tiny(3, 5, 2, 1)).unwrap();
    let mut s = overfit_sample();
    let big = TrainHyper { crop_size: 32, ..overfit_hyper() };
    assert!(train(&ckpt, &[s.clone()], &big).is_err());
    assert!(train(&ckpt, &[], &overfit_hyper()).is_err());
    s.target.pop();
    assert!(train(&ckpt, &[s], &overfit_hyper()).is_err());
}

#[test]
fn divergence_is_reported() {
    let ckpt = init_model(&tiny(3, 5, 2, 1)).unwrap();
    let hyper = TrainHyper {
        learning_rate: 1e300,
        epochs: 5,
        ..overfit_hyper()
    };
    assert!(matches!(
        train(&ckpt, &[overfit_sample()], &hyper),
        Err(Error::TrainingDiverged { .. })
    ));
}

#[test]
fn ensemble_of_copies_matches_member() {
    let ckpt = init_model(&tiny(6, 5, 2, 5)).unwrap();
    let img = random_image(8, 8, 6, 6);
    let ens = EnsembleSpec::new(vec![ckpt.clone(); 3]).unwrap();
    let a = ensemble_predict(&ens, &img).unwrap();
    let b = forward(&ckpt, &img).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn two_member_average() {
    let a = ProbMap::new(1, 1, 2, vec![0.2, 0.8]).unwrap();
    let b = ProbMap::new(1, 1, 2, vec![0.6, 0.4]).unwrap();
    let m = average_maps(&[a, b]).unwrap();
    assert!((m.data[0] - 0.4).abs() < 1e-12 && (m.data[1] - 0.6).abs() < 1e-12);
}

#[test]
fn ensemble_rows_sum_to_one() {
    let members = (0..3).map(|s| init_model(&tiny(6, 5, 2, s)).unwrap()).collect();
    let ens = EnsembleSpec::new(members).unwrap();
    let probs = ensemble_predict(&ens, &random_image(10, 8, 6, 7)).unwrap();
    for p in 0..probs.pixel_count() {
        assert!((probs.pixel(p).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn heterogeneous_ensemble_is_rejected() {
    let a = init_model(&tiny(6, 5, 2, 1)).unwrap();
    let b = init_model(&tiny(3, 5, 2, 1)).unwrap();
    let c = init_model(&tiny(6, 2, 2, 1)).unwrap();
    assert!(EnsembleSpec::new(vec![a.clone(), b]).is_err());
    assert!(EnsembleSpec::new(vec![a, c]).is_err());
    assert!(EnsembleSpec::new(vec![]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut ckpt = init_model(&tiny(6, 5, 2, 9)).unwrap().with_domain(DomainTag::Target);
    ckpt.meta = TrainingMeta {
        epochs: 4,
        steps: 17,
        final_loss: Some(0.123),
    };
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert!(back.weights.iter().zip(&ckpt.weights).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn truncated_checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&init_model(&tiny(6, 5, 1, 9)).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 5, 12, 40, bytes.len() - 3] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(load_checkpoint(&path).is_err(), "cut at {cut}");
    }
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn mismatched_layout_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut ckpt = init_model(&tiny(6, 5, 1, 9)).unwrap();
    ckpt.weights.push(0.0);
    assert!(save_checkpoint(&ckpt, &path).is_err() || load_checkpoint(&path).is_err());
    ckpt.weights.pop();
    ckpt.layout[0].offset = 3;
    assert!(ckpt.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ensemble_is_permutation_invariant(seeds in prop::collection::vec(0u64..100, 2..5), img_seed in 0u64..100) {
        let members: Vec<_> = seeds.iter().map(|s| init_model(&tiny(3, 5, 1, *s)).unwrap()).collect();
        let img = random_image(4, 4, 3, img_seed);
        let a = ensemble_predict(&EnsembleSpec::new(members.clone()).unwrap(), &img).unwrap();
        let mut rev = members;
        rev.reverse();
        rev.rotate_left(1);
        let b = ensemble_predict(&EnsembleSpec::new(rev).unwrap(), &img).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loss_is_nonnegative(seed in 0u64..1000) {
        let ckpt = init_model(&tiny(3, 2, 1, seed)).unwrap();
        let img = random_image(4, 4, 3, seed + 1);
        let t = random_labels(16, 2, seed + 2);
        let (loss, grad) = loss_and_grad(&ckpt, &img, &t, None).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }
}
