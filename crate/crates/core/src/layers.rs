//! Composite blocks: densely connected conv stacks, compression,
//! downsampling / upsampling blocks, classifiers and the DenseNet-style
//! encoder. Every function appends nodes to a [`GraphBuilder`] and returns
//! the id of the block output.

use crate::builder::{Gain, GraphBuilder};
use crate::error::{config_err, Result};
use crate::graph::NodeId;
use crate::ops::{BnAttrs, ConvAttrs, PoolAttrs};

/// One densely connected block followed (optionally) by compression.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub num_conv_layers: usize,
    pub growth_filters: usize,
    pub compression_filters: usize,
    pub kernel: usize,
    pub keep_prob: f64,
    /// Concatenate each layer's output onto its input. Disabling this turns
    /// the stack into a plain chain; only used to probe the topology.
    pub dense: bool,
    pub bn: BnAttrs,
}

impl BlockConfig {
    pub fn new(num_conv_layers: usize, growth_filters: usize, compression_filters: usize) -> Self {
        Self {
            num_conv_layers,
            growth_filters,
            compression_filters,
            kernel: 3,
            keep_prob: 0.8,
            dense: true,
            bn: BnAttrs::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_conv_layers == 0 || self.growth_filters == 0 || self.compression_filters == 0 {
            return Err(config_err!(
                "block needs >= 1 layer, growth and compression filters: {self:?}"
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(config_err!("block kernel must be odd, got {}", self.kernel));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(config_err!("keep_prob {} outside (0, 1]", self.keep_prob));
        }
        Ok(())
    }

    /// Channels leaving the dense stack for `input` channels entering it.
    pub fn stack_output_channels(&self, input: usize) -> usize {
        if self.dense {
            input + self.num_conv_layers * self.growth_filters
        } else {
            self.growth_filters
        }
    }
}

/// `num_conv_layers` x (BN, ReLU, conv, dropout), each output concatenated
/// onto the running feature map.
pub fn trans_stack(b: &mut GraphBuilder, x: NodeId, cfg: &BlockConfig) -> Result<NodeId> {
    cfg.validate()?;
    b.scoped("trans", |b| {
        let mut features = x;
        for j in 0..cfg.num_conv_layers {
            let fresh = b.scoped(format!("layer{j}"), |b| -> Result<NodeId> {
                let h = b.batch_norm(features, "bn", cfg.bn)?;
                let h = b.relu(h, "relu")?;
                let h = b.conv(
                    h,
                    "conv",
                    cfg.growth_filters,
                    cfg.kernel,
                    ConvAttrs::same(cfg.kernel, 1),
                    true,
                    Gain::Relu,
                )?;
                if cfg.keep_prob < 1.0 {
                    b.dropout(h, "dropout", cfg.keep_prob)
                } else {
                    Ok(h)
                }
            })?;
            features = if cfg.dense {
                b.concat(&[features, fresh], &format!("concat{j}"))?
            } else {
                fresh
            };
        }
        Ok(features)
    })
}

/// Single same-size `kernel x kernel` convolution to `filters` channels.
pub fn compression(
    b: &mut GraphBuilder,
    x: NodeId,
    filters: usize,
    kernel: usize,
) -> Result<NodeId> {
    b.conv(
        x,
        "comp",
        filters,
        kernel,
        ConvAttrs::same(kernel, 1),
        true,
        Gain::Linear,
    )
}

/// Max-pool by 2, concatenate the optional same-resolution skip, dense
/// stack, compress.
pub fn downsampling_block(
    b: &mut GraphBuilder,
    prev: NodeId,
    skip: Option<NodeId>,
    cfg: &BlockConfig,
) -> Result<NodeId> {
    let pooled = b.maxpool(prev, "pool", PoolAttrs::HALVE)?;
    let joined = match skip {
        Some(s) => b.concat(&[pooled, s], "concat_skip")?,
        None => pooled,
    };
    let q = trans_stack(b, joined, cfg)?;
    compression(b, q, cfg.compression_filters, cfg.kernel)
}

/// 4x4 stride-2 deconvolution (channel preserving), concatenate the
/// first-encoder skip `h`, dense stack, and compress unless `final_block`.
pub fn upsampling_block(
    b: &mut GraphBuilder,
    prev: NodeId,
    h: NodeId,
    cfg: &BlockConfig,
    final_block: bool,
) -> Result<NodeId> {
    let c = b.channels(prev);
    let o = b.deconv(
        prev,
        "deconv",
        c,
        4,
        ConvAttrs::new(2, 1, 1),
        true,
        Gain::Linear,
    )?;
    let joined = b.concat(&[o, h], "concat_skip")?;
    let q = trans_stack(b, joined, cfg)?;
    if final_block {
        Ok(q)
    } else {
        compression(b, q, cfg.compression_filters, cfg.kernel)
    }
}

/// 3x3 convolution to `num_classes` score channels.
pub fn classifier(
    b: &mut GraphBuilder,
    x: NodeId,
    num_classes: usize,
    gain: f64,
) -> Result<NodeId> {
    if num_classes < 2 {
        return Err(config_err!(
            "classifier needs >= 2 classes, got {num_classes}"
        ));
    }
    b.conv(
        x,
        "classify",
        num_classes,
        3,
        ConvAttrs::same(3, 1),
        true,
        Gain::Custom(gain),
    )
}

/// BN, ReLU, 3x3 convolution: the adapter that turns first-encoder features
/// into the skip maps consumed by every decoder.
pub fn skip_conv(b: &mut GraphBuilder, x: NodeId, filters: usize, bn: BnAttrs) -> Result<NodeId> {
    let h = b.batch_norm(x, "bn", bn)?;
    let h = b.relu(h, "relu")?;
    b.conv(
        h,
        "conv",
        filters,
        3,
        ConvAttrs::same(3, 1),
        true,
        Gain::Relu,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    DenseNet161,
    Mini,
}

/// Which tensor of a dense stage seeds the first-encoder skip at its
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkipTap {
    /// The dense block output, before its transition.
    #[default]
    BlockOutput,
    /// The transition convolution output, before pooling.
    TransitionOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub block_layer_counts: Vec<usize>,
    pub growth: usize,
    pub init_features: usize,
    /// Bottleneck width multiplier of the 1x1 conv inside each dense layer.
    pub bn_size: usize,
    /// Channel reduction of transition layers.
    pub transition_compression: f64,
    pub dilation_in_last_stage: usize,
    pub stem_kernel: usize,
    pub stem_pool: PoolAttrs,
    pub bn: BnAttrs,
}

impl EncoderConfig {
    /// DenseNet-161 made fully convolutional: blocks (6, 12, 36, 24), growth
    /// 48, 96 stem features; the last transition keeps resolution and the
    /// last block uses dilation 2.
    pub fn densenet161() -> Self {
        Self {
            kind: EncoderKind::DenseNet161,
            block_layer_counts: vec![6, 12, 36, 24],
            growth: 48,
            init_features: 96,
            bn_size: 4,
            transition_compression: 0.5,
            dilation_in_last_stage: 2,
            stem_kernel: 7,
            stem_pool: PoolAttrs::new(3, 2, 1),
            bn: BnAttrs::default(),
        }
    }

    /// Desk-scale encoder: stride-4 stem, two dense stages and one dilated
    /// stage of two layers each with growth 8.
    pub fn mini() -> Self {
        Self {
            kind: EncoderKind::Mini,
            block_layer_counts: vec![2, 2, 2],
            growth: 8,
            init_features: 16,
            bn_size: 4,
            transition_compression: 0.5,
            dilation_in_last_stage: 2,
            stem_kernel: 3,
            stem_pool: PoolAttrs::HALVE,
            bn: BnAttrs::default(),
        }
    }

    /// Index of the first block that runs at 1/16 resolution; transitions
    /// before it pool, the rest keep resolution.
    pub fn pooled_transitions(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.block_layer_counts.len();
        if blocks < self.pooled_transitions() + 1 {
            return Err(config_err!(
                "encoder needs at least {} dense stages to reach 1/16 resolution, got {blocks}",
                self.pooled_transitions() + 1
            ));
        }
        if self.block_layer_counts.contains(&0) || self.growth == 0 || self.init_features == 0 {
            return Err(config_err!(
                "encoder stages need >= 1 layer and positive widths"
            ));
        }
        if self.stem_pool.stride != 2 || self.stem_kernel % 2 == 0 {
            return Err(config_err!(
                "stem must be an odd kernel with a stride-2 pool"
            ));
        }
        if self.dilation_in_last_stage == 0 {
            return Err(config_err!("dilation must be >= 1"));
        }
        Ok(())
    }

    pub fn transition_channels(&self, input: usize) -> usize {
        ((input as f64 * self.transition_compression).floor() as usize).max(1)
    }
}

/// Feature maps exposed by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderTaps {
    /// 1/4 resolution skip source.
    pub quarter: NodeId,
    /// 1/8 resolution skip source.
    pub eighth: NodeId,
    /// Final features at 1/16 resolution (after the closing BN + ReLU).
    pub deepest: NodeId,
}

fn dense_layer(
    b: &mut GraphBuilder,
    x: NodeId,
    cfg: &EncoderConfig,
    dilation: usize,
) -> Result<NodeId> {
    let h = b.batch_norm(x, "bn1", cfg.bn)?;
    let h = b.relu(h, "relu1")?;
    let h = b.conv(
        h,
        "conv1",
        cfg.bn_size * cfg.growth,
        1,
        ConvAttrs::default(),
        false,
        Gain::Relu,
    )?;
    let h = b.batch_norm(h, "bn2", cfg.bn)?;
    let h = b.relu(h, "relu2")?;
    b.conv(
        h,
        "conv2",
        cfg.growth,
        3,
        ConvAttrs::same(3, dilation),
        false,
        Gain::Relu,
    )
}

/// DenseNet-style encoder: stem to 1/4, dense stages separated by
/// transitions that pool until 1/16, later stages unpooled with the last
/// one dilated.
pub fn encoder(
    b: &mut GraphBuilder,
    image: NodeId,
    cfg: &EncoderConfig,
    tap: SkipTap,
) -> Result<EncoderTaps> {
    cfg.validate()?;
    b.scoped("encoder", |b| {
        let x = b.conv(
            image,
            "stem_conv",
            cfg.init_features,
            cfg.stem_kernel,
            ConvAttrs::new(2, cfg.stem_kernel / 2, 1),
            false,
            Gain::Relu,
        )?;
        let x = b.batch_norm(x, "stem_bn", cfg.bn)?;
        let x = b.relu(x, "stem_relu")?;
        let mut features = b.maxpool(x, "stem_pool", cfg.stem_pool)?;

        let blocks = cfg.block_layer_counts.len();
        let mut taps: Vec<NodeId> = Vec::new();
        for (i, &layers) in cfg.block_layer_counts.iter().enumerate() {
            let last = i + 1 == blocks;
            let dilation = if last { cfg.dilation_in_last_stage } else { 1 };
            features = b.scoped(format!("block{}", i + 1), |b| -> Result<NodeId> {
                let mut f = features;
                for j in 0..layers {
                    let fresh =
                        b.scoped(format!("layer{j}"), |b| dense_layer(b, f, cfg, dilation))?;
                    f = b.concat(&[f, fresh], &format!("concat{j}"))?;
                }
                Ok(f)
            })?;
            let pools = i < cfg.pooled_transitions();
            if pools && tap == SkipTap::BlockOutput {
                taps.push(features);
            }
            if !last {
                features = b.scoped(format!("transition{}", i + 1), |b| -> Result<NodeId> {
                    let c = cfg.transition_channels(b.channels(features));
                    let t = b.batch_norm(features, "bn", cfg.bn)?;
                    let t = b.relu(t, "relu")?;
                    let t = b.conv(t, "conv", c, 1, ConvAttrs::default(), false, Gain::Relu)?;
                    if pools && tap == SkipTap::TransitionOutput {
                        taps.push(t);
                    }
                    if pools {
                        b.avgpool(t, "pool", PoolAttrs::HALVE)
                    } else {
                        Ok(t)
                    }
                })?;
            }
        }
        let x = b.batch_norm(features, "final_bn", cfg.bn)?;
        let deepest = b.relu(x, "final_relu")?;
        Ok(EncoderTaps {
            quarter: taps[0],
            eighth: taps[1],
            deepest,
        })
    })
}
