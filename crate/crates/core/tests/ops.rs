use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdn_core::ops::{self, BnAttrs, ConvAttrs, Mode, PoolAttrs, RunningStats};
use sdn_core::{LabelMap, Shape4, Tensor4};

fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(),
        n in 1usize..3, ci in 1usize..4, co in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 2, 3]),
        stride in 1usize..3, pad in 0usize..3, dil in 1usize..3,
        bias in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attrs = ConvAttrs::new(stride, pad, dil);
        prop_assume!(ops::conv_out_len(h, k, stride, pad, dil).is_some());
        prop_assume!(ops::conv_out_len(w, k, stride, pad, dil).is_some());
        let x = random(Shape4::new(n, ci, h, w), &mut rng);
        let wt = random(Shape4::new(co, ci, k, k), &mut rng);
        let b = random(Shape4::new(1, co, 1, 1), &mut rng);
        let b = bias.then_some(&b);
        let fast = ops::conv2d(&x, &wt, b, &attrs).unwrap();
        let slow = ops::conv2d_direct(&x, &wt, b, &attrs).unwrap();
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn deconv_matches_direct_loops(
        seed in any::<u64>(),
        ci in 1usize..4, co in 1usize..4,
        h in 1usize..6, w in 1usize..6,
        k in prop::sample::select(vec![1usize, 3, 4]),
        stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attrs = ConvAttrs::new(stride, pad, 1);
        prop_assume!(ops::deconv_out_len(h, k, stride, pad, 1).is_some());
        prop_assume!(ops::deconv_out_len(w, k, stride, pad, 1).is_some());
        let x = random(Shape4::new(2, ci, h, w), &mut rng);
        let wt = random(Shape4::new(ci, co, k, k), &mut rng);
        let b = random(Shape4::new(1, co, 1, 1), &mut rng);
        let fast = ops::deconv2d(&x, &wt, Some(&b), &attrs).unwrap();
        let slow = ops::deconv2d_direct(&x, &wt, Some(&b), &attrs).unwrap();
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn resize_preserves_constants(c in -3.0f64..3.0, h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17) {
        let x = Tensor4::full(Shape4::new(1, 2, h, w), c);
        let y = ops::bilinear_resize(&x, oh, ow);
        prop_assert!(y.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn resize_backward_is_adjoint(seed in any::<u64>(), h in 1usize..7, w in 1usize..7, oh in 1usize..13, ow in 1usize..13) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape4::new(1, 2, h, w), &mut rng);
        let g = random(Shape4::new(1, 2, oh, ow), &mut rng);
        let lhs = ops::bilinear_resize(&x, oh, ow).dot(&g);
        let rhs = x.dot(&ops::bilinear_resize_backward(x.shape(), &g));
        prop_assert!(rel(lhs, rhs) < 1e-10);
    }

    #[test]
    fn softmax_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape4::new(1, 4, 3, 3), &mut rng);
        let p = ops::softmax_channels(&x);
        let q = ops::softmax_channels(&x.map(|v| v + shift));
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn maxpool_output_is_window_max(seed in any::<u64>(), h in 2usize..9, w in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape4::new(1, 1, h, w), &mut rng);
        let (y, _) = ops::maxpool2d(&x, &PoolAttrs::HALVE).unwrap();
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| x.at(0, 0, 2 * oy + dy, 2 * ox + dx))
                    .fold(f64::MIN, f64::max);
                prop_assert_eq!(y.at(0, 0, oy, ox), m);
            }
        }
    }
}

/// `<conv(x, w), y> == <x, deconv(y, w)>` over a matrix of kernel, stride,
/// padding and dilation settings.
#[test]
fn deconv_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    for k in [1, 2, 3, 4] {
        for stride in [1, 2] {
            for pad in [0, 1, 2] {
                for dil in [1, 2] {
                    for h in [5, 6, 8, 9] {
                        let Some(oh) = ops::conv_out_len(h, k, stride, pad, dil) else {
                            continue;
                        };
                        if ops::deconv_out_len(oh, k, stride, pad, dil) != Some(h) {
                            continue;
                        }
                        let attrs = ConvAttrs::new(stride, pad, dil);
                        let x = random(Shape4::new(2, 3, h, h), &mut rng);
                        let w = random(Shape4::new(4, 3, k, k), &mut rng);
                        let y = random(Shape4::new(2, 4, oh, oh), &mut rng);
                        let lhs = ops::conv2d(&x, &w, None, &attrs).unwrap().dot(&y);
                        let rhs = x.dot(&ops::deconv2d(&y, &w, None, &attrs).unwrap());
                        assert!(
                            rel(lhs, rhs) < 1e-6,
                            "k{k} s{stride} p{pad} d{dil} h{h}: {lhs} vs {rhs}"
                        );
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked >= 40, "only {checked} settings were consistent");
}

#[test]
fn stride_two_deconv_doubles_resolution() {
    let x = Tensor4::<f32>::full(Shape4::new(1, 1024, 5, 5), 0.1);
    let w = Tensor4::<f32>::full(Shape4::new(1024, 8, 4, 4), 0.01);
    let y = ops::deconv2d(&x, &w, None, &ConvAttrs::new(2, 1, 1)).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 8, 10, 10));
}

#[test]
fn batch_norm_infer_uses_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(Shape4::new(4, 2, 3, 3), &mut rng);
    let gamma = Tensor4::full(Shape4::new(1, 2, 1, 1), 2.0);
    let beta = Tensor4::full(Shape4::new(1, 2, 1, 1), 0.5);
    let mut stats = RunningStats {
        mean: vec![1.0, -1.0],
        var: vec![4.0, 0.25],
    };
    let (y, _) = ops::batch_norm(
        &x,
        &gamma,
        &beta,
        &mut stats,
        Mode::Infer,
        &BnAttrs::default(),
    )
    .unwrap();
    let eps = BnAttrs::default().eps;
    let expect = 2.0 * (x.at(1, 1, 2, 0) + 1.0) / (0.25f64 + eps).sqrt() + 0.5;
    assert!((y.at(1, 1, 2, 0) - expect).abs() < 1e-12);
    assert_eq!(
        stats.mean,
        vec![1.0, -1.0],
        "infer mode must not update statistics"
    );
}

#[test]
fn dropout_train_masks_are_seeded() {
    let x = Tensor4::<f32>::full(Shape4::new(2, 4, 8, 8), 1.0);
    let (a, _) = ops::dropout(&x, 0.8, Mode::Train, 5).unwrap();
    let (b, _) = ops::dropout(&x, 0.8, Mode::Train, 5).unwrap();
    let (c, _) = ops::dropout(&x, 0.8, Mode::Train, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let kept = a.data().iter().filter(|&&v| v != 0.0).count() as f64 / a.len() as f64;
    assert!((kept - 0.8).abs() < 0.08, "kept fraction {kept}");
    assert!(a
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-6));
}

#[test]
fn loss_ignores_void_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(Shape4::new(1, 3, 2, 2), &mut rng);
    let all = LabelMap::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
    let some = LabelMap::new(1, 2, 2, vec![0, 255, 2, 255]).unwrap();
    let (_, g) = ops::softmax_ce_loss(&x, &some, 255).unwrap();
    for c in 0..3 {
        assert_eq!(g.at(0, c, 0, 1), 0.0);
        assert_eq!(g.at(0, c, 1, 1), 0.0);
    }
    let (full, _) = ops::softmax_ce_loss(&x, &all, 255).unwrap();
    let (part, _) = ops::softmax_ce_loss(&x, &some, 255).unwrap();
    let p = ops::softmax_channels(&x);
    let oracle = -(p.at(0, 0, 0, 0).ln() + p.at(0, 2, 1, 0).ln()) / 2.0;
    assert!((part - oracle).abs() < 1e-12);
    assert!(full.is_finite());
}
