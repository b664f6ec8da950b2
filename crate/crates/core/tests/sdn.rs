use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdn_core::sdn::{argmax_labels, build_sdn};
use sdn_core::{Error, LabelMap, Mode, SdnConfig, SdnModel, Shape4, Tensor4};

fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(Shape4::new(n, 3, h, w), |_| rng.random_range(0.0..1.0))
}

fn labels(n: usize, h: usize, w: usize, classes: u8, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelMap::new(
        n,
        h,
        w,
        (0..n * h * w)
            .map(|_| rng.random_range(0..classes))
            .collect(),
    )
    .unwrap()
}

#[test]
fn head_counts() {
    for units in 1..=3 {
        let cfg = SdnConfig::mini(units, 3);
        let (_, layout) = build_sdn(&cfg).unwrap();
        assert_eq!(layout.heads.len(), 3 * units);
        let last = &layout.heads[layout.prediction];
        assert_eq!((last.unit, last.up_ratio), (units, 4));

        let (_, layout) = build_sdn(&cfg.clone().with_supervision(&[4])).unwrap();
        assert_eq!(layout.heads.len(), units);

        let off = SdnConfig {
            unit1_ratio16_from_encoder: false,
            ..cfg
        };
        let (_, layout) = build_sdn(&off).unwrap();
        assert_eq!(layout.heads.len(), 3 * units - 1);
    }
}

#[test]
fn paper_sized_heads_and_widths() {
    let (g, layout) = build_sdn(&SdnConfig::paper(3)).unwrap();
    assert_eq!(layout.heads.len(), 9);
    let shapes = g.infer_shapes(&[Shape4::new(1, 3, 320, 320)]).unwrap();
    for unit in &layout.units {
        assert_eq!(shapes[unit.f16], Shape4::new(1, 1024, 20, 20));
        assert_eq!(shapes[unit.f8].h, 40);
        assert_eq!((shapes[unit.f4].h, shapes[unit.f4].w), (80, 80));
    }
    for h in &layout.heads {
        assert_eq!(shapes[h.resized], Shape4::new(1, 21, 320, 320));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = SdnConfig::mini(2, 3);
    let bad = [
        SdnConfig {
            num_units: 0,
            ..base.clone()
        },
        SdnConfig {
            num_classes: 1,
            ..base.clone()
        },
        base.clone().with_supervision(&[16, 8]),
        base.clone().with_supervision(&[2, 4]),
        SdnConfig {
            down_blocks: vec![base.down_blocks[0].clone()],
            ..base.clone()
        },
    ];
    for cfg in bad {
        assert!(matches!(build_sdn(&cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

/// Every unit reaches 1/16 and its decoder returns to 1/4; the prediction
/// matches the input resolution, for any size divisible by 16.
#[test]
fn shape_contract() {
    for units in 1..=3 {
        let (g, layout) = build_sdn(&SdnConfig::mini(units, 4)).unwrap();
        for (h, w) in [(16, 16), (32, 48), (64, 64), (80, 32), (112, 96)] {
            let s = g.infer_shapes(&[Shape4::new(2, 3, h, w)]).unwrap();
            for u in &layout.units {
                assert_eq!((s[u.f16].h, s[u.f16].w), (h / 16, w / 16));
                assert_eq!((s[u.f8].h, s[u.f8].w), (h / 8, w / 8));
                assert_eq!((s[u.f4].h, s[u.f4].w), (h / 4, w / 4));
            }
            let pred = layout.heads[layout.prediction].resized;
            assert_eq!(s[pred], Shape4::new(2, 4, h, w));
        }
    }
}

#[test]
fn indivisible_image_is_usage_error() {
    let mut model: SdnModel<f64> = SdnModel::new(SdnConfig::mini(1, 3), 0).unwrap();
    assert!(matches!(
        model.predict(&image(1, 24, 32, 0)),
        Err(Error::Usage(_))
    ));
}

#[test]
fn mismatched_or_invalid_labels_are_data_errors() {
    let mut model: SdnModel<f64> = SdnModel::new(SdnConfig::mini(1, 3), 0).unwrap();
    let x = image(1, 32, 32, 0);
    let r = model.forward_losses(&x, &labels(1, 16, 32, 3, 0), Mode::Train, 0);
    assert!(matches!(r, Err(Error::Data(_))));
    let mut y = labels(1, 32, 32, 3, 0);
    y.data[5] = 3;
    assert!(matches!(
        model.forward_losses(&x, &y, Mode::Train, 0),
        Err(Error::Data(_))
    ));
    y.data[5] = 255;
    assert!(model.forward_losses(&x, &y, Mode::Train, 0).is_ok());
}

#[test]
fn builds_are_pure() {
    let a: SdnModel<f32> = SdnModel::new(SdnConfig::mini(2, 3), 11).unwrap();
    let b: SdnModel<f32> = SdnModel::new(SdnConfig::mini(2, 3), 11).unwrap();
    let c: SdnModel<f32> = SdnModel::new(SdnConfig::mini(2, 3), 12).unwrap();
    for (p, q) in a.net.params.iter().zip(&b.net.params) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert!(a
        .net
        .params
        .iter()
        .zip(&c.net.params)
        .any(|(p, q)| p.value != q.value));
}

#[test]
fn fused_score_is_running_sum_of_classifier_outputs() {
    let mut model: SdnModel<f64> = SdnModel::new(SdnConfig::mini(3, 3), 1).unwrap();
    let (heads, _) = model
        .forward_train(&image(1, 32, 32, 1), &labels(1, 32, 32, 3, 1), 0)
        .unwrap();
    for ratio in [16, 8, 4] {
        let mut running: Option<Tensor4<f64>> = None;
        for h in heads.iter().filter(|h| h.up_ratio == ratio) {
            assert_eq!(h.score.shape(), h.logits.shape());
            let expect = match &running {
                None => h.logits.clone(),
                Some(prev) => {
                    let mut e = h.logits.clone();
                    e.add_assign(prev);
                    e
                }
            };
            assert!(
                h.score.max_abs_diff(&expect) == 0.0,
                "unit {} ratio {ratio}",
                h.unit
            );
            running = Some(h.score.clone());
        }
    }
}

#[test]
fn without_fusion_each_head_is_its_own_score() {
    let cfg = SdnConfig {
        score_fusion: false,
        ..SdnConfig::mini(2, 3)
    };
    let mut model: SdnModel<f64> = SdnModel::new(cfg, 1).unwrap();
    let (heads, _) = model
        .forward_train(&image(1, 32, 32, 1), &labels(1, 32, 32, 3, 1), 0)
        .unwrap();
    for h in &heads {
        assert_eq!(h.score, h.logits);
    }
    assert!(model.graph().find("unit2.head4.fuse").is_none());
}

#[test]
fn total_loss_is_weighted_sum_of_heads() {
    let mut cfg = SdnConfig::mini(2, 3);
    cfg.loss_weights.insert(16, 0.25);
    cfg.loss_weights.insert(8, 2.0);
    let mut model: SdnModel<f64> = SdnModel::new(cfg, 3).unwrap();
    let l = model
        .forward_losses(
            &image(2, 32, 32, 2),
            &labels(2, 32, 32, 3, 2),
            Mode::Train,
            7,
        )
        .unwrap();
    let weights = model.head_weights();
    let expect: f64 = l.heads.iter().zip(&weights).map(|(a, w)| a * w).sum();
    assert!((l.total - expect).abs() < 1e-12);
    assert!(l.heads.iter().all(|v| v.is_finite()));
}

/// Zero weight on every head but the prediction head gives the gradient of
/// single-head supervision; per-head gradients add up to the total.
#[test]
fn gradient_is_linear_in_head_weights() {
    let x = image(1, 32, 32, 4);
    let y = labels(1, 32, 32, 3, 4);
    let grads = |weights: &dyn Fn(&SdnModel<f64>) -> Vec<f64>| -> Vec<Vec<f64>> {
        let mut m: SdnModel<f64> = SdnModel::new(SdnConfig::mini(2, 3), 9).unwrap();
        m.net.zero_grad();
        m.forward_losses(&x, &y, Mode::Train, 3).unwrap();
        let ids: Vec<_> = m.layout().heads.iter().map(|h| h.loss).collect();
        let w = weights(&m);
        m.net.backward(&ids, &w).unwrap();
        m.net
            .params
            .iter()
            .map(|p| p.grad.data().to_vec())
            .collect()
    };

    let mut only_last = SdnConfig::mini(2, 3);
    only_last.loss_weights.insert(16, 0.0);
    only_last.loss_weights.insert(8, 0.0);
    let via_config = {
        let mut m: SdnModel<f64> = SdnModel::new(only_last, 9).unwrap();
        m.net.zero_grad();
        m.forward_losses(&x, &y, Mode::Train, 3).unwrap();
        m.backward().unwrap();
        m.net
            .params
            .iter()
            .map(|p| p.grad.data().to_vec())
            .collect::<Vec<_>>()
    };
    let via_weights = grads(&|m| {
        m.layout()
            .heads
            .iter()
            .map(|h| f64::from(u8::from(h.up_ratio == 4)))
            .collect()
    });
    assert_eq!(via_config, via_weights);

    let all = grads(&|m| vec![1.0; m.layout().heads.len()]);
    let n = SdnModel::<f64>::new(SdnConfig::mini(2, 3), 9)
        .unwrap()
        .layout()
        .heads
        .len();
    let mut sum: Vec<Vec<f64>> = all.iter().map(|g| vec![0.0; g.len()]).collect();
    for k in 0..n {
        let gk = grads(&|m| {
            (0..m.layout().heads.len())
                .map(|i| f64::from(u8::from(i == k)))
                .collect()
        });
        for (s, g) in sum.iter_mut().zip(&gk) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (s, g) in sum.iter().zip(&all) {
        for (a, b) in s.iter().zip(g) {
            worst = worst.max((a - b).abs() / (1e-8 + b.abs()));
        }
    }
    assert!(worst < 1e-6, "sum of per-head gradients differs by {worst}");
}

/// With near-uniform initial logits each head costs about ln C.
#[test]
fn initial_loss_near_uniform() {
    for seed in 0..10 {
        let cfg = SdnConfig::mini(2, 2);
        let mut model: SdnModel<f32> = SdnModel::new(cfg, seed).unwrap();
        let x = image(2, 32, 32, 100 + seed).cast::<f32>();
        let y = labels(2, 32, 32, 2, 200 + seed);
        let l = model.forward_losses(&x, &y, Mode::Train, seed).unwrap();
        let expect = l.heads.len() as f64 * 2f64.ln();
        assert!(
            (l.total - expect).abs() <= 0.2 * expect,
            "seed {seed}: {} vs {expect}",
            l.total
        );
    }
}

#[test]
fn argmax_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Tensor4::<f64>::from_fn(Shape4::new(1, 4, 5, 5), |_| rng.random_range(-1.0..1.0));
    let base = argmax_labels(&s);
    for y in 0..5 {
        for x in 0..5 {
            let shift = rng.random_range(-10.0..10.0);
            for c in 0..4 {
                s.set(0, c, y, x, s.at(0, c, y, x) + shift);
            }
        }
    }
    assert_eq!(argmax_labels(&s), base);

    let dominant =
        Tensor4::<f64>::from_fn(Shape4::new(1, 3, 4, 4), |i| if i < 16 { 5.0 } else { 1.0 });
    assert_eq!(argmax_labels(&dominant).data, vec![0; 16]);
    let tied = Tensor4::<f64>::full(Shape4::new(1, 3, 2, 2), 0.5);
    assert_eq!(argmax_labels(&tied).data, vec![0; 4]);
}

#[test]
fn predict_matches_input_resolution_after_padding() {
    let mut model: SdnModel<f32> = SdnModel::new(SdnConfig::mini(2, 3), 2).unwrap();
    let x = image(1, 37, 21, 3).cast::<f32>();
    let (padded, (h, w)) = sdn_core::data::pad_to_16(&x, &[0.5, 0.5, 0.5]).unwrap();
    assert_eq!(padded.shape(), Shape4::new(1, 3, 48, 32));
    let pred = model.predict(&padded).unwrap().crop(h, w);
    assert_eq!((pred.n, pred.h, pred.w), (1, 37, 21));
    assert!(pred.data.iter().all(|&c| c < 3));
}

#[test]
fn single_scale_ms_flip_is_predict() {
    let mut model: SdnModel<f32> = SdnModel::new(SdnConfig::mini(2, 3), 5).unwrap();
    for seed in 0..3 {
        let x = image(1, 48, 32, seed).cast::<f32>();
        let p = model.probabilities(&x).unwrap();
        let q = model
            .ms_flip_probabilities(&x, &[1.0], false, &[0.5; 3])
            .unwrap();
        assert_eq!(p, q);
        assert_eq!(
            model.predict(&x).unwrap(),
            model.ms_flip_predict(&x, &[1.0], false, &[0.5; 3]).unwrap()
        );
    }
}

#[test]
fn ms_flip_probabilities_sum_to_one() {
    let mut model: SdnModel<f32> = SdnModel::new(SdnConfig::mini(2, 3), 5).unwrap();
    let x = image(1, 32, 48, 9).cast::<f32>();
    let p = model
        .ms_flip_probabilities(&x, &[0.5, 0.8, 1.0, 1.2, 1.4], true, &[0.5; 3])
        .unwrap();
    assert_eq!(p.shape(), Shape4::new(1, 3, 32, 48));
    for y in 0..32 {
        for xx in 0..48 {
            let s: f64 = (0..3).map(|c| f64::from(p.at(0, c, y, xx))).sum();
            assert!((s - 1.0).abs() < 1e-6, "pixel ({y},{xx}) sums to {s}");
        }
    }
}

#[test]
fn ms_flip_skips_tiny_scales_and_rejects_bad_lists() {
    let mut model: SdnModel<f32> = SdnModel::new(SdnConfig::mini(1, 3), 5).unwrap();
    let x = image(1, 32, 32, 0).cast::<f32>();
    // 0.25 gives 8 px and is skipped, so the result is the 1.0 term alone.
    let a = model
        .ms_flip_probabilities(&x, &[0.25, 1.0], false, &[0.5; 3])
        .unwrap();
    assert_eq!(a, model.probabilities(&x).unwrap());
    assert!(matches!(
        model.ms_flip_probabilities(&x, &[0.25], false, &[0.5; 3]),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        model.ms_flip_probabilities(&x, &[], false, &[0.5; 3]),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        model.ms_flip_probabilities(&x, &[0.0], false, &[0.5; 3]),
        Err(Error::Usage(_))
    ));
}

/// For a mirror-symmetric image the mirror-averaged probability map is
/// itself mirror symmetric.
#[test]
fn mirror_average_of_symmetric_image_is_symmetric() {
    let mut model: SdnModel<f32> = SdnModel::new(SdnConfig::mini(2, 3), 6).unwrap();
    let half = image(1, 32, 16, 4).cast::<f32>();
    let x = Tensor4::from_fn(Shape4::new(1, 3, 32, 32), |i| {
        let (c, y, xx) = (i / 1024, (i / 32) % 32, i % 32);
        half.at(0, c, y, if xx < 16 { xx } else { 31 - xx })
    });
    assert_eq!(x, x.flip_horizontal());
    let p = model
        .ms_flip_probabilities(&x, &[1.0], true, &[0.5; 3])
        .unwrap();
    assert!(p.max_abs_diff(&p.flip_horizontal()) < 1e-6);
}
