//! Property tests for the invariants of each module.

mod common;

use proptest::prelude::*;
use rand::Rng;
use rfbsr::checkpoint::{Checkpoint, Entry, EntryData, Meta};
use rfbsr::data::{augment, bicubic_resize, resized_len, AugmentFlags, EdgeMode, FixedPair};
use rfbsr::ensemble::average_checkpoints;
use rfbsr::losses::{adversarial_loss_g, discriminator_loss, relativistic_deltas, FakeLossForm};
use rfbsr::metrics::{psnr, ssim};
use rfbsr::nn::Generator;
use rfbsr::nn::{DenseBlock, GeneratorConfig, Init, Rfb, RfbLayout, Rrdb, Rrfdb, UpsampleKind, UpsampleStage};
use rfbsr::optim::LrSchedule;
use rfbsr::train::{list_checkpoints, train_psnr_stage, TrainRun, TrainStage};
use rfbsr::{ops, ConvSpec, Eval, ParamStore, Tensor};

use common::{bicubic_oracle, conv_oracle, random_tensor, rng, ssim_oracle, ulps_f64};

fn logits(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec([v.len(), 1, 1, 1], v.to_vec()).unwrap()
}

fn flat_checkpoint(values: &[f64], step: u64) -> Checkpoint {
    let mut entries = std::collections::BTreeMap::new();
    entries.insert(
        "w".to_string(),
        Entry {
            dims: vec![values.len()],
            data: EntryData::F64(values.to_vec()),
        },
    );
    Checkpoint {
        fingerprint: [7; 32],
        meta: Meta {
            step,
            ..Meta::default()
        },
        entries,
    }
}

fn entry_values(ck: &Checkpoint) -> Vec<f64> {
    ck.entries["w"].data.to_f64()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shuffle_and_unshuffle_invert(seed in any::<u64>(), r in 1usize..4, c in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let x = random_tensor(&mut rng(seed), [2, c * r * r, h, w], -1.0, 1.0);
        let y = ops::pixel_shuffle(&x, r).unwrap();
        prop_assert!(ops::pixel_unshuffle(&y, r).unwrap().bitwise_eq(&x));
        let z = random_tensor(&mut rng(seed ^ 1), [1, c, h * r, w * r], -1.0, 1.0);
        prop_assert!(ops::pixel_shuffle(&ops::pixel_unshuffle(&z, r).unwrap(), r).unwrap().bitwise_eq(&z));
    }

    #[test]
    fn nearest_upsample_then_block_mean_is_identity(seed in any::<u64>(), r in 2usize..5, h in 1usize..6, w in 1usize..6) {
        let x = random_tensor(&mut rng(seed), [2, 3, h, w], -1.0, 1.0);
        let up = ops::nearest_upsample(&x, r).unwrap();
        let pooled = Tensor::from_fn([2, 3, h, w], |n, c, i, j| {
            let mut s = 0.0;
            for a in 0..r {
                for b in 0..r {
                    s += up.at(n, c, i * r + a, j * r + b);
                }
            }
            s / (r * r) as f64
        });
        prop_assert!(pooled.max_abs_diff(&x) <= 1e-15);
    }

    #[test]
    fn conv_leaves_inputs_untouched(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, [1, 2, 6, 6], -1.0, 1.0);
        let w = random_tensor(&mut r, [3, 2, 3, 3], -1.0, 1.0);
        let (x0, w0) = (x.data().to_vec(), w.data().to_vec());
        let y = ops::conv2d(&x, &w, None, &ConvSpec::same(3, 3, (1, 1))).unwrap();
        let _ = ops::leaky_relu(&y, 0.2);
        prop_assert_eq!(x.data(), &x0[..]);
        prop_assert_eq!(w.data(), &w0[..]);
    }

    #[test]
    fn f32_conv_tracks_the_oracle(seed in any::<u64>(), dil in 1usize..4, stride in 1usize..3) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, [1, 5, 12, 12], -1.0, 1.0);
        let w = random_tensor(&mut r, [4, 5, 3, 3], -1.0, 1.0);
        let spec = ConvSpec::same(3, 3, (dil, dil)).with_stride(stride);
        let want = conv_oracle(&x, &w, None, &spec);
        let got = ops::conv2d(&x.cast::<f32>(), &w.cast::<f32>(), None, &spec).unwrap().cast::<f64>();
        let peak = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(got.max_abs_diff(&want) <= 1e-5 * peak);
    }

    #[test]
    fn deltas_swap_roles(a in prop::collection::vec(-6.0f64..6.0, 1..8), shift in -3.0f64..3.0) {
        let b: Vec<f64> = a.iter().rev().map(|v| v * 0.5 + shift).collect();
        let g = Eval;
        let (real_ab, fake_ab) = relativistic_deltas(&g, &logits(&a), &logits(&b)).unwrap();
        let (real_ba, fake_ba) = relativistic_deltas(&g, &logits(&b), &logits(&a)).unwrap();
        prop_assert!(real_ab.bitwise_eq(&fake_ba));
        prop_assert!(fake_ab.bitwise_eq(&real_ba));
    }

    #[test]
    fn common_logit_shift_changes_nothing(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..8),
        c in -40.0f64..40.0,
    ) {
        let g = Eval;
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let eval = |a: &[f64], b: &[f64]| {
            let (dr, df) = relativistic_deltas(&g, &logits(a), &logits(b)).unwrap();
            let adv = adversarial_loss_g(&g, &dr, &df).unwrap().item();
            let d = discriminator_loss(&g, &dr, &df, FakeLossForm::Standard).unwrap().2.item();
            (dr, df, adv, d)
        };
        let (r0, f0, adv0, d0) = eval(&a, &b);
        let shifted = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let (r1, f1, adv1, d1) = eval(&shifted(&a), &shifted(&b));
        prop_assert!(r0.max_abs_diff(&r1) <= 1e-9 && f0.max_abs_diff(&f1) <= 1e-9);
        prop_assert!((adv0 - adv1).abs() <= 1e-9 && (d0 - d1).abs() <= 1e-9);
    }

    #[test]
    fn raising_fake_logits_lowers_adversarial_loss(
        pairs in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 1..8),
        k in 0.01f64..2.0,
    ) {
        let g = Eval;
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let adv = |b: &[f64]| {
            let (dr, df) = relativistic_deltas(&g, &logits(&a), &logits(b)).unwrap();
            adversarial_loss_g(&g, &dr, &df).unwrap().item()
        };
        let raised: Vec<f64> = b.iter().map(|v| v + k).collect();
        prop_assert!(adv(&raised) < adv(&b));
    }

    #[test]
    fn schedules_never_increase(
        initial in 1e-6f64..1e-2,
        period in 1u64..500,
        mut milestones in prop::collection::vec(0u64..2000, 0..6),
        steps in prop::collection::vec(0u64..3000, 2..20),
    ) {
        milestones.sort_unstable();
        let mut steps = steps;
        steps.sort_unstable();
        for s in [LrSchedule::PsnrStage { initial, period }, LrSchedule::GanStage { initial, milestones: milestones.clone() }] {
            for w in steps.windows(2) {
                prop_assert!(s.lr_at(w[1]) <= s.lr_at(w[0]));
            }
        }
    }

    #[test]
    fn averaging_is_order_free_idempotent_and_linear(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 6), 2..6),
        order_seed in any::<u64>(),
        delta in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let cks: Vec<Checkpoint> = rows.iter().enumerate().map(|(i, v)| flat_checkpoint(v, i as u64)).collect();
        let n = cks.len();
        let mean = average_checkpoints(&cks, n).unwrap();
        let mut shuffled = cks.clone();
        let mut r = rng(order_seed);
        for i in (1..n).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        prop_assert_eq!(entry_values(&average_checkpoints(&shuffled, n).unwrap()), entry_values(&mean));

        let again = average_checkpoints(&vec![mean.clone(); n], n).unwrap();
        let drift = entry_values(&again).iter().zip(entry_values(&mean)).map(|(&x, y)| ulps_f64(x, y)).max().unwrap();
        prop_assert!(drift <= 1);

        let theta = &rows[0];
        let moved: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + d).collect();
        let mid = average_checkpoints(&[flat_checkpoint(theta, 0), flat_checkpoint(&moved, 1)], 2).unwrap();
        for ((m, t), d) in entry_values(&mid).iter().zip(theta).zip(&delta) {
            prop_assert!((m - (t + d / 2.0)).abs() <= 1e-12 * t.abs().max(1.0));
        }
    }

    #[test]
    fn bicubic_matches_the_2d_oracle(seed in any::<u64>(), h in 1usize..=32, w in 1usize..=32, scale in 0.1f64..4.0) {
        let img = random_tensor(&mut rng(seed), [1, 1, h, w], 0.0, 1.0);
        let got = bicubic_resize(&img, scale, EdgeMode::Replicate).unwrap();
        let want = bicubic_oracle(&img, scale, resized_len(h, scale).unwrap(), resized_len(w, scale).unwrap());
        prop_assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn degradation_commutes_with_augmentation(seed in any::<u64>(), hflip in any::<bool>(), k in 0u8..4, scale in 2usize..5) {
        let hr = random_tensor(&mut rng(seed), [1, 3, 4 * scale, 3 * scale], 0.0, 1.0);
        let flags = AugmentFlags { hflip, rot90_k: k };
        let s = 1.0 / scale as f64;
        for edge in [EdgeMode::Replicate, EdgeMode::Symmetric] {
            let a = bicubic_resize(&augment(&hr, flags), s, edge).unwrap();
            let b = augment(&bicubic_resize(&hr, s, edge).unwrap(), flags);
            prop_assert!(a.max_abs_diff(&b) <= 1e-10);
        }
    }

    #[test]
    fn unit_scale_is_identity(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let img = random_tensor(&mut rng(seed), [1, 3, h, w], 0.0, 1.0);
        prop_assert!(bicubic_resize(&img, 1.0, EdgeMode::Replicate).unwrap().max_abs_diff(&img) <= 1e-15);
    }

    #[test]
    fn psnr_symmetric_and_monotone(seed in any::<u64>(), k in 1.01f64..3.0) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, [1, 3, 12, 12], 0.2, 0.8);
        let noise = random_tensor(&mut r, [1, 3, 12, 12], -0.05, 0.05);
        let b = Tensor::from_fn([1, 3, 12, 12], |n, c, h, w| a.at(n, c, h, w) + noise.at(n, c, h, w));
        let far = Tensor::from_fn([1, 3, 12, 12], |n, c, h, w| a.at(n, c, h, w) + k * noise.at(n, c, h, w));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(psnr(&a, &far).unwrap() < psnr(&a, &b).unwrap());
        let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
        prop_assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() <= 1e-9);
    }

    #[test]
    fn ssim_matches_oracle_and_is_symmetric(seed in any::<u64>(), h in 11usize..18, w in 11usize..18) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, [1, 2, h, w], 0.0, 1.0);
        let b = random_tensor(&mut r, [1, 2, h, w], 0.0, 1.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim_oracle(&a, &b)).abs() <= 1e-8);
        prop_assert_eq!(s, ssim(&b, &a).unwrap());
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-8);
        prop_assert!(s < 1.0 - 1e-8);
    }
}

/// SSIM offset invariance holds only between similar images: the luminance
/// term `(2 ma mb + C1) / (ma^2 + mb^2 + C1)` depends on the means
/// themselves, not just their difference.
#[test]
fn ssim_nearly_offset_invariant_for_similar_images() {
    let mut r = rng(5);
    for _ in 0..10 {
        let base = Tensor::<f64>::from_fn([1, 3, 24, 24], |_, c, h, w| {
            0.5 + 0.2 * ((h as f64 * 0.4 + c as f64).sin() * (w as f64 * 0.3).cos())
        });
        let a = ops::add(&base, &random_tensor(&mut r, [1, 3, 24, 24], -0.005, 0.005)).unwrap();
        let b = ops::add(&base, &random_tensor(&mut r, [1, 3, 24, 24], -0.005, 0.005)).unwrap();
        let c = r.random_range(0.0..0.1);
        let before = ssim(&a, &b).unwrap();
        let after = ssim(&a.map(|v| v + c), &b.map(|v| v + c)).unwrap();
        assert!((before - after).abs() < 1e-6, "{before} vs {after}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn blocks_preserve_shape_and_upsampling_doubles(seed in any::<u64>(), c in 2usize..9, growth in 1usize..5, h in 3usize..7, w in 3usize..7) {
        let mut r = rng(seed);
        let mut init = Init::new(&mut r, 0.1);
        let mut store = ParamStore::<f64>::new();
        let layout = RfbLayout::default();
        let x = Tensor::<f64>::full([2, c, h, w], 0.3);
        let dense = DenseBlock::new(&mut store, &mut init, "d", c, growth, 0.2).unwrap();
        let rrdb = Rrdb::new(&mut store, &mut init, "r", c, growth, 0.2).unwrap();
        let rfb = Rfb::new(&mut store, &mut init, "f", c, c, &layout, 1.0).unwrap();
        let rrfdb = Rrfdb::new(&mut store, &mut init, "q", c, growth, 2, &layout, 1.0, 0.2).unwrap();
        let nni = UpsampleStage::new(&mut store, &mut init, "u", UpsampleKind::Nni, c, true, &layout, 1.0).unwrap();
        let spc = UpsampleStage::new(&mut store, &mut init, "s", UpsampleKind::Spc, c, false, &layout, 1.0).unwrap();
        let g = Eval;
        for y in [
            dense.forward(&g, &store, &x).unwrap(),
            rrdb.forward(&g, &store, &x).unwrap(),
            rfb.forward(&g, &store, &x).unwrap(),
            rrfdb.forward(&g, &store, &x).unwrap(),
        ] {
            prop_assert_eq!(y.shape(), x.shape());
        }
        for y in [nni.forward(&g, &store, &x).unwrap(), spc.forward(&g, &store, &x).unwrap()] {
            prop_assert_eq!(y.shape().dims(), [2, c, 2 * h, 2 * w]);
        }
    }

    #[test]
    fn default_plan_scales_by_sixteen(h in 4usize..7, w in 4usize..7, n in 1usize..3) {
        let cfg = GeneratorConfig::tiny(16);
        prop_assert_eq!(&cfg.upsample_plan, &GeneratorConfig::default().upsample_plan);
        let (g, store) = Generator::build::<f32>(&cfg, 0).unwrap();
        let out = g.forward(&Eval, &store, &Tensor::full([n, 3, h, w], 0.5f32)).unwrap();
        prop_assert_eq!(out.shape().dims(), [n, 3, 16 * h, 16 * w]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoint_count_follows_cadence(steps in 1u64..13, every in 1u64..6) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::tiny(2);
        let (g, mut store) = Generator::build::<f32>(&cfg, 0).unwrap();
        let run = TrainRun {
            batch_size: 1,
            checkpoint_every: every,
            schedule: LrSchedule::Constant { lr: 1e-4 },
            ..TrainRun::new(TrainStage::Psnr, steps, dir.path())
        };
        let mut data = FixedPair {
            lr: Tensor::<f32>::full([1, 3, 4, 4], 0.5),
            hr: Tensor::<f32>::full([1, 3, 8, 8], 0.5),
        };
        let out = train_psnr_stage(&run, &g, &mut store, &mut data, &mut |_, _, _| {}).unwrap();
        prop_assert_eq!(out.checkpoints.len() as u64, steps / every);
        prop_assert_eq!(list_checkpoints(dir.path()).unwrap().len() as u64, steps / every);
    }
}

#[test]
fn ensemble_of_trained_checkpoints_runs() {
    let cfg = GeneratorConfig::tiny(2);
    let cks: Vec<Checkpoint> = (0..3)
        .map(|seed| {
            let (_, s) = Generator::build::<f32>(&cfg, seed).unwrap();
            Checkpoint::from_store(
                &s,
                cfg.fingerprint(),
                Meta {
                    step: seed,
                    ..Meta::default()
                },
            )
        })
        .collect();
    let avg = average_checkpoints(&cks, 3).unwrap();
    let (g, mut store) = Generator::build::<f32>(&cfg, 9).unwrap();
    avg.load_into(&mut store, &cfg.fingerprint(), false).unwrap();
    let lr = random_tensor(&mut rng(1), [1, 3, 6, 5], 0.0, 1.0).cast::<f32>();
    let sr = g.forward(&Eval, &store, &lr).unwrap();
    assert_eq!(sr.shape().dims(), [1, 3, 12, 10]);
    assert!(sr.all_finite());
}
