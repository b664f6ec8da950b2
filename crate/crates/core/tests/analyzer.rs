use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdn_core::analyzer::{
    analyze, count_depth, count_params, encoder_rf_window, graph_params_by_module,
    params_by_module, receptive_field,
};
use sdn_core::builder::{Gain, GraphBuilder};
use sdn_core::layers::{encoder, EncoderConfig, SkipTap};
use sdn_core::ops::ConvAttrs;
use sdn_core::sdn::build_sdn;
use sdn_core::{ComputeGraph, Feed, Mode, Network, SdnConfig, Shape4, Tensor4};

fn graph_depth(g: &ComputeGraph) -> usize {
    g.weighted_depths().into_iter().max().unwrap()
}

#[test]
fn full_size_unit_deltas_are_exact() {
    let p: Vec<u64> = (1..=3)
        .map(|m| count_params(&SdnConfig::paper(m)).unwrap())
        .collect();
    let d: Vec<usize> = (1..=3)
        .map(|m| count_depth(&SdnConfig::paper(m)).unwrap())
        .collect();
    assert_eq!(p[1] - p[0], p[2] - p[1]);
    assert_eq!(d, vec![169, 185, 201]);
    let rel = (p[0] as f64 - 84.9e6).abs() / 84.9e6;
    assert!(
        rel <= 0.05,
        "SDN_M1 has {} parameters, {:.1}% from 84.9 M",
        p[0],
        100.0 * rel
    );
}

#[test]
fn mini_unit_deltas_are_exact() {
    for supervision in [&[16, 8, 4][..], &[4]] {
        let cfgs: Vec<SdnConfig> = (1..=4)
            .map(|m| SdnConfig::mini(m, 3).with_supervision(supervision))
            .collect();
        let p: Vec<u64> = cfgs.iter().map(|c| count_params(c).unwrap()).collect();
        let d: Vec<usize> = cfgs.iter().map(|c| count_depth(c).unwrap()).collect();
        for k in 1..3 {
            assert_eq!(p[k + 1] - p[k], p[k] - p[k - 1]);
            assert_eq!(d[k + 1] - d[k], d[k] - d[k - 1]);
        }
    }
}

#[test]
fn analytic_counts_match_built_graphs() {
    let mut cfgs = Vec::new();
    for m in 1..=3 {
        cfgs.push(SdnConfig::paper(m));
        cfgs.push(SdnConfig::mini(m, 3));
        cfgs.push(SdnConfig::mini(m, 5).with_supervision(&[8, 4]));
        cfgs.push(SdnConfig {
            skip_tap: SkipTap::TransitionOutput,
            ..SdnConfig::mini(m, 3)
        });
        cfgs.push(SdnConfig {
            unit1_ratio16_from_encoder: false,
            ..SdnConfig::mini(m, 2)
        });
    }
    for cfg in &cfgs {
        let (g, _) = build_sdn(cfg).unwrap();
        assert_eq!(
            params_by_module(cfg).unwrap(),
            graph_params_by_module(&g),
            "M={}",
            cfg.num_units
        );
        assert_eq!(count_params(cfg).unwrap(), g.param_count());
        assert_eq!(count_depth(cfg).unwrap(), graph_depth(&g));
    }
}

#[test]
fn single_conv_parameter_count() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", 3).unwrap();
    b.conv(x, "conv", 48, 3, ConvAttrs::same(3, 1), true, Gain::Relu)
        .unwrap();
    assert_eq!(b.finish().param_count(), 3 * 3 * 3 * 48 + 48);
    assert_eq!(3 * 3 * 3 * 48 + 48, 1344);
}

/// Mini M=2 longest path, counted by hand:
/// encoder 16 (stem 1, six dense layers x 2, two transitions, bridge 1),
/// unit 1 decoder 8 (deconv + 2 + comp, twice), unit 2 down blocks 8
/// (2 + comp, 4 + comp), unit 2 decoder 7 (final block has no compression),
/// classifier 1.
#[test]
fn mini_depth_golden() {
    assert_eq!(count_depth(&SdnConfig::mini(2, 3)).unwrap(), 40);
    assert_eq!(count_depth(&SdnConfig::mini(1, 3)).unwrap(), 16 + 7 + 1);
}

/// Block configs are shared by every unit, so each block kind is grown in
/// a network where it occurs once: down blocks at M=2, up blocks at M=1.
#[test]
fn one_more_layer_adds_one_to_depth() {
    for which in 0..4 {
        let mut cfg = SdnConfig::mini(if which < 2 { 2 } else { 1 }, 3);
        let d0 = count_depth(&cfg).unwrap();
        let block = match which {
            0 => &mut cfg.down_blocks[0],
            1 => &mut cfg.down_blocks[1],
            2 => &mut cfg.up_blocks[0],
            _ => &mut cfg.up_blocks[1],
        };
        block.num_conv_layers += 1;
        assert_eq!(count_depth(&cfg).unwrap(), d0 + 1, "block {which}");
        assert_eq!(
            graph_depth(&build_sdn(&cfg).unwrap().0),
            d0 + 1,
            "block {which}"
        );
    }
}

#[test]
fn report_is_consistent() {
    let r = analyze(&SdnConfig::mini(2, 3), (64, 64)).unwrap();
    assert_eq!(r.params_total, r.params_by_module.values().sum::<u64>());
    assert!(r.depth >= 1);
    assert_eq!(
        r.receptive_field,
        receptive_field(&SdnConfig::mini(2, 3)).unwrap()
    );
    assert!(r.activation_bytes_estimate > 0);
    let kv = r.key_values();
    assert!(kv.contains(&format!("params_total={}\n", r.params_total)));
    assert!(kv.contains("depth=40\n"));
    let full = analyze(&SdnConfig::paper(1), (320, 320)).unwrap();
    assert_eq!(
        full.params_millions(),
        format!("{:.1}", full.params_total as f64 / 1e6)
    );
}

fn mini_encoder() -> (ComputeGraph, usize) {
    let mut b = GraphBuilder::new();
    let x = b.input("image", 3).unwrap();
    let taps = encoder(&mut b, x, &EncoderConfig::mini(), SkipTap::BlockOutput).unwrap();
    (b.finish(), taps.deepest)
}

const PROBE: usize = 256;

/// Nonzero input-gradient region of one deepest-feature position lies inside
/// the predicted window, for random weights and a random image.
#[test]
fn gradient_footprint_within_predicted_window() {
    let (g, deepest) = mini_encoder();
    let win = encoder_rf_window(&EncoderConfig::mini());
    let mut net: Network<f64> = Network::new(g, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor4::from_fn(Shape4::new(1, 3, PROBE, PROBE), |_| {
        rng.random_range(0.0..1.0)
    });
    net.forward(&Feed::infer(vec![&x]), &[deepest]).unwrap();
    let out = net.value(deepest).unwrap().shape();
    let o = out.h / 2;
    let (lo, hi) = win.span(o);
    let mut seed = Tensor4::zeros(out);
    for c in 0..out.c {
        seed.set(0, c, o, o, 1.0);
    }
    let grads = net.backward_from(vec![(deepest, seed)], true).unwrap();
    let gx = grads[0].as_ref().unwrap();
    let (mut min, mut max) = (isize::MAX, isize::MIN);
    for c in 0..3 {
        for y in 0..PROBE {
            for xx in 0..PROBE {
                if gx.at(0, c, y, xx) != 0.0 {
                    assert!(
                        (lo..=hi).contains(&(y as isize)) && (lo..=hi).contains(&(xx as isize))
                    );
                    min = min.min(y as isize);
                    max = max.max(y as isize);
                }
            }
        }
    }
    assert!(max > min, "empty footprint");
}

/// With non-negative weights, zero biases and a zero image, a unit impulse
/// reaches a deepest-feature position exactly when it lies in the window.
#[test]
fn impulse_probe_matches_window_edges() {
    let (g, deepest) = mini_encoder();
    let win = encoder_rf_window(&EncoderConfig::mini());
    assert_eq!(win.size, 193);
    let mut net: Network<f64> = Network::new(g, 3);
    for p in &mut net.params {
        let positive = !(p.name.ends_with(".beta") || p.name.ends_with(".bias"));
        for v in p.value.data_mut() {
            *v = if positive { v.abs() + 1e-3 } else { 0.0 };
        }
    }
    let o = PROBE / 16 / 2;
    let (lo, hi) = win.span(o);
    assert!(
        lo > 0 && (hi as usize) < PROBE - 1,
        "window {lo}..={hi} must sit inside the probe image"
    );
    let centre = (lo + hi) as usize / 2;
    let reaches = |net: &mut Network<f64>, y: usize, x: usize| -> bool {
        let mut img = Tensor4::zeros(Shape4::new(1, 3, PROBE, PROBE));
        img.set(0, 1, y, x, 1.0);
        net.forward(
            &Feed {
                inputs: vec![&img],
                labels: vec![],
                mode: Mode::Infer,
                seed: 0,
            },
            &[deepest],
        )
        .unwrap();
        let v = net.value(deepest).unwrap();
        (0..v.shape().c).any(|c| v.at(0, c, o, o) > 0.0)
    };
    for (pos, inside) in [(lo - 1, false), (lo, true), (hi, true), (hi + 1, false)] {
        let p = pos as usize;
        assert_eq!(reaches(&mut net, p, centre), inside, "row {p}");
        assert_eq!(reaches(&mut net, centre, p), inside, "column {p}");
    }
}
