use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdn_core::builder::GraphBuilder;
use sdn_core::layers::{
    classifier, compression, downsampling_block, encoder, trans_stack, upsampling_block,
    BlockConfig, EncoderConfig, SkipTap,
};
use sdn_core::{ComputeGraph, Error, Feed, Network, NodeId, SdnConfig, SdnModel, Shape4, Tensor4};

fn shape_of(g: &ComputeGraph, inputs: &[Shape4], id: NodeId) -> Shape4 {
    g.infer_shapes(inputs).unwrap()[id]
}

#[test]
fn trans_stack_channel_growth() {
    for layers in [1, 2, 4] {
        for growth in [4, 48] {
            for input in [3, 100] {
                let mut b = GraphBuilder::new();
                let x = b.input("x", input).unwrap();
                let cfg = BlockConfig::new(layers, growth, 8);
                let y = trans_stack(&mut b, x, &cfg).unwrap();
                let g = b.finish();
                let s = shape_of(&g, &[Shape4::new(1, input, 6, 6)], y);
                assert_eq!(s, Shape4::new(1, input + layers * growth, 6, 6));
                assert_eq!(cfg.stack_output_channels(input), s.c);
            }
        }
    }
}

#[test]
fn trans_stack_examples() {
    for (input, layers, out) in [(100, 2, 196), (200, 4, 392)] {
        let mut b = GraphBuilder::new();
        let x = b.input("x", input).unwrap();
        let y = trans_stack(&mut b, x, &BlockConfig::new(layers, 48, 8)).unwrap();
        assert_eq!(b.channels(y), out);
    }
}

#[test]
fn plain_chain_without_dense_concat() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", 100).unwrap();
    let cfg = BlockConfig {
        dense: false,
        ..BlockConfig::new(3, 48, 8)
    };
    let y = trans_stack(&mut b, x, &cfg).unwrap();
    assert_eq!(b.channels(y), 48);
}

#[test]
fn compression_widths() {
    for (input, hw, filters) in [(392, 20, 768), (196, 80, 576), (64, 8, 64)] {
        let mut b = GraphBuilder::new();
        let x = b.input("x", input).unwrap();
        let y = compression(&mut b, x, filters, 3).unwrap();
        let g = b.finish();
        assert_eq!(
            shape_of(&g, &[Shape4::new(1, input, hw, hw)], y),
            Shape4::new(1, filters, hw, hw)
        );
    }
}

#[test]
fn down_then_up_restores_resolution() {
    for size in [4, 6, 8, 10, 40] {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 16).unwrap();
        let skip_half = b.input("skip", 12).unwrap();
        let d =
            downsampling_block(&mut b, x, Some(skip_half), &BlockConfig::new(2, 4, 10)).unwrap();
        let u = upsampling_block(&mut b, d, x, &BlockConfig::new(2, 4, 14), false).unwrap();
        let g = b.finish();
        let shapes = g
            .infer_shapes(&[
                Shape4::new(1, 16, size, size),
                Shape4::new(1, 12, size / 2, size / 2),
            ])
            .unwrap();
        assert_eq!(shapes[d], Shape4::new(1, 10, size / 2, size / 2));
        assert_eq!(shapes[u], Shape4::new(1, 14, size, size));
    }
}

#[test]
fn skip_channels_add_up() {
    let mut b = GraphBuilder::new();
    let prev = b.input("prev", 576).unwrap();
    let skip = b.input("skip", 768).unwrap();
    let d = downsampling_block(&mut b, prev, Some(skip), &BlockConfig::new(2, 48, 768)).unwrap();
    let g = b.graph();
    let trans_in = g.find("concat_skip").expect("concat node");
    assert_eq!(g.node(trans_in).channels, 1344);
    assert_eq!(b.channels(d), 768);
}

#[test]
fn final_upsampling_block_skips_compression() {
    let mut b = GraphBuilder::new();
    let prev = b.input("prev", 40).unwrap();
    let h = b.input("h", 32).unwrap();
    let y = upsampling_block(&mut b, prev, h, &BlockConfig::new(2, 48, 576), true).unwrap();
    assert_eq!(b.channels(y), 40 + 32 + 2 * 48);
}

#[test]
fn skip_mismatch_is_config_error_naming_the_block() {
    let mut b = GraphBuilder::new();
    let prev = b.input("prev", 8).unwrap();
    let skip = b.input("skip", 8).unwrap();
    b.scoped("unit2", |b| {
        b.scoped("down1", |b| {
            downsampling_block(b, prev, Some(skip), &BlockConfig::new(1, 4, 8))
        })
    })
    .unwrap();
    let g = b.finish();
    let err = g
        .infer_shapes(&[Shape4::new(1, 8, 16, 16), Shape4::new(1, 8, 16, 16)])
        .unwrap_err();
    match err {
        Error::Config(msg) => assert!(msg.contains("unit2.down1"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn classifier_output_channels() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", 576).unwrap();
    let y = classifier(&mut b, x, 21, 1.0).unwrap();
    assert_eq!(b.channels(y), 21);
    let mut b = GraphBuilder::new();
    let x = b.input("x", 8).unwrap();
    assert!(matches!(
        classifier(&mut b, x, 1, 1.0),
        Err(Error::Config(_))
    ));
}

fn encoder_graph(cfg: &EncoderConfig, tap: SkipTap) -> (ComputeGraph, [NodeId; 3]) {
    let mut b = GraphBuilder::new();
    let x = b.input("image", 3).unwrap();
    let t = encoder(&mut b, x, cfg, tap).unwrap();
    (b.finish(), [t.quarter, t.eighth, t.deepest])
}

#[test]
fn mini_encoder_resolutions() {
    for tap in [SkipTap::BlockOutput, SkipTap::TransitionOutput] {
        let (g, [q, e, d]) = encoder_graph(&EncoderConfig::mini(), tap);
        let shapes = g.infer_shapes(&[Shape4::new(1, 3, 64, 64)]).unwrap();
        assert_eq!((shapes[q].h, shapes[q].w), (16, 16));
        assert_eq!((shapes[e].h, shapes[e].w), (8, 8));
        assert_eq!((shapes[d].h, shapes[d].w), (4, 4));
    }
}

#[test]
fn full_encoder_channels_and_resolutions() {
    let (g, [q, e, d]) = encoder_graph(&EncoderConfig::densenet161(), SkipTap::BlockOutput);
    let shapes = g.infer_shapes(&[Shape4::new(1, 3, 320, 320)]).unwrap();
    assert_eq!(shapes[q], Shape4::new(1, 96 + 6 * 48, 80, 80));
    assert_eq!(shapes[e], Shape4::new(1, 192 + 12 * 48, 40, 40));
    assert_eq!(shapes[d], Shape4::new(1, 2208, 20, 20));
    // The canonical DenseNet-161 feature extractor has 26,472,000 parameters
    // (classifier excluded).
    assert_eq!(g.param_count(), 26_472_000);
}

#[test]
fn encoder_needs_three_stages() {
    let cfg = EncoderConfig {
        block_layer_counts: vec![2, 2],
        ..EncoderConfig::mini()
    };
    let mut b = GraphBuilder::new();
    let x = b.input("image", 3).unwrap();
    assert!(matches!(
        encoder(&mut b, x, &cfg, SkipTap::BlockOutput),
        Err(Error::Config(_))
    ));
}

#[test]
fn constant_image_gives_finite_features() {
    let (g, [_, _, d]) = encoder_graph(&EncoderConfig::mini(), SkipTap::BlockOutput);
    let mut net: Network<f32> = Network::new(g, 4);
    let x = Tensor4::full(Shape4::new(2, 3, 32, 32), 0.5);
    for mode in [sdn_core::Mode::Train, sdn_core::Mode::Infer] {
        net.forward(
            &Feed {
                inputs: vec![&x],
                labels: vec![],
                mode,
                seed: 0,
            },
            &[d],
        )
        .unwrap();
        assert!(net.value(d).unwrap().all_finite());
    }
}

#[test]
fn infer_mode_is_deterministic() {
    let mut model: SdnModel<f32> = SdnModel::new(SdnConfig::mini(2, 3), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor4::from_fn(Shape4::new(1, 3, 32, 32), |_| rng.random_range(0.0..1.0));
    let a = model.probabilities(&x).unwrap();
    let b = model.probabilities(&x).unwrap();
    assert_eq!(a, b);
}

/// Every scalar weight of the mini network gets a nonzero gradient from
/// some random image/label pair. At 64 px the dilated stage runs at 4x4, so
/// every tap of its kernels lands inside the feature map.
#[test]
fn no_dead_parameters() {
    let mut model: SdnModel<f64> = SdnModel::new(SdnConfig::mini(2, 3), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut touched: Vec<Vec<bool>> = model
        .net
        .params
        .iter()
        .map(|p| vec![false; p.value.len()])
        .collect();
    for round in 0..3 {
        let x = Tensor4::from_fn(Shape4::new(2, 3, 64, 64), |_| rng.random_range(0.0..1.0));
        let labels: Vec<u8> = (0..2 * 64 * 64).map(|_| rng.random_range(0..3)).collect();
        let y = sdn_core::LabelMap::new(2, 64, 64, labels).unwrap();
        model.net.zero_grad();
        model
            .forward_losses(&x, &y, sdn_core::Mode::Train, round)
            .unwrap();
        model.backward().unwrap();
        for (p, seen) in model.net.params.iter().zip(&mut touched) {
            for (s, g) in seen.iter_mut().zip(p.grad.data()) {
                *s |= *g != 0.0;
            }
        }
    }
    for (p, seen) in model.net.params.iter().zip(&touched) {
        let dead = seen.iter().filter(|s| !**s).count();
        assert_eq!(
            dead,
            0,
            "{}: {dead} of {} entries never received a gradient",
            p.name,
            seen.len()
        );
    }
}
