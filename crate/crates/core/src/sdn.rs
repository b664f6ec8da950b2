//! The stacked deconvolutional network: configuration, graph assembly with
//! inter-unit skips, hierarchical supervision with score fusion, and the
//! inference paths.

use std::collections::BTreeMap;

use log::warn;

use crate::builder::Gain;
use crate::builder::GraphBuilder;
use crate::data::pad_to_16;
use crate::error::{config_err, data_err, Error, Result};
use crate::graph::{ComputeGraph, Feed, Network, NodeId};
use crate::layers::{
    classifier, downsampling_block, encoder, skip_conv, upsampling_block, BlockConfig,
    EncoderConfig, EncoderTaps, SkipTap,
};
use crate::ops::{self, ConvAttrs, Mode};
use crate::tensor::{LabelMap, Scalar, Tensor4};

/// Supervision ratios an SDN unit can expose, coarse to fine.
pub const UP_RATIOS: [u32; 3] = [16, 8, 4];

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct SdnConfig {
    pub num_units: usize,
    pub encoder: EncoderConfig,
    /// Downsampling blocks of units 2..M (1/4 -> 1/8, 1/8 -> 1/16).
    pub down_blocks: Vec<BlockConfig>,
    /// Upsampling blocks of every unit (1/16 -> 1/8, 1/8 -> 1/4).
    pub up_blocks: Vec<BlockConfig>,
    /// Width of the first-encoder skip convolutions feeding every decoder.
    pub skip_filters: usize,
    pub skip_tap: SkipTap,
    pub num_classes: usize,
    pub supervision_ratios: Vec<u32>,
    pub score_fusion: bool,
    /// Per-ratio loss weight; ratios not listed weigh 1.
    pub loss_weights: BTreeMap<u32, f64>,
    /// Supervise unit 1 at ratio 16 on the features entering its decoder.
    pub unit1_ratio16_from_encoder: bool,
    /// Initializer gain of classifier weights.
    pub classifier_gain: f64,
    pub ignore_index: u8,
}

impl SdnConfig {
    /// Full-size network: DenseNet-161 encoder, growth 48 everywhere,
    /// compression 768/1024 down and 768/576 up, keep probability 0.8,
    /// 21 classes, supervision at every ratio.
    pub fn paper(num_units: usize) -> Self {
        Self {
            num_units,
            encoder: EncoderConfig::densenet161(),
            down_blocks: vec![BlockConfig::new(2, 48, 768), BlockConfig::new(4, 48, 1024)],
            up_blocks: vec![BlockConfig::new(2, 48, 768), BlockConfig::new(2, 48, 576)],
            skip_filters: 4 * 48,
            skip_tap: SkipTap::default(),
            num_classes: 21,
            supervision_ratios: UP_RATIOS.to_vec(),
            score_fusion: true,
            loss_weights: BTreeMap::new(),
            unit1_ratio16_from_encoder: true,
            classifier_gain: 0.1,
            ignore_index: IGNORE_INDEX,
        }
    }

    /// Desk-scale network on the mini encoder, growth 8.
    pub fn mini(num_units: usize, num_classes: usize) -> Self {
        Self {
            num_units,
            encoder: EncoderConfig::mini(),
            down_blocks: vec![BlockConfig::new(2, 8, 24), BlockConfig::new(4, 8, 32)],
            up_blocks: vec![BlockConfig::new(2, 8, 24), BlockConfig::new(2, 8, 16)],
            skip_filters: 4 * 8,
            skip_tap: SkipTap::default(),
            num_classes,
            supervision_ratios: UP_RATIOS.to_vec(),
            score_fusion: true,
            loss_weights: BTreeMap::new(),
            unit1_ratio16_from_encoder: true,
            classifier_gain: 0.1,
            ignore_index: IGNORE_INDEX,
        }
    }

    pub fn with_supervision(mut self, ratios: &[u32]) -> Self {
        self.supervision_ratios = ratios.to_vec();
        self
    }

    pub fn loss_weight(&self, ratio: u32) -> f64 {
        self.loss_weights.get(&ratio).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_units == 0 {
            return Err(config_err!("num_units must be >= 1"));
        }
        if self.down_blocks.len() != 2 || self.up_blocks.len() != 2 {
            return Err(config_err!(
                "expected 2 downsampling and 2 upsampling block configs, got {} and {}",
                self.down_blocks.len(),
                self.up_blocks.len()
            ));
        }
        for b in self.down_blocks.iter().chain(&self.up_blocks) {
            b.validate()?;
        }
        self.encoder.validate()?;
        if self.num_classes < 2 || self.num_classes > usize::from(self.ignore_index) {
            return Err(config_err!(
                "num_classes {} must lie in 2..={}",
                self.num_classes,
                self.ignore_index
            ));
        }
        if self.skip_filters == 0 {
            return Err(config_err!("skip_filters must be >= 1"));
        }
        if let Some(r) = self
            .supervision_ratios
            .iter()
            .find(|r| !UP_RATIOS.contains(r))
        {
            return Err(config_err!("supervision ratio {r} not in {{16, 8, 4}}"));
        }
        if !self.supervision_ratios.contains(&4) {
            return Err(config_err!(
                "supervision ratios must include 4, the prediction head"
            ));
        }
        if let Some((r, w)) = self
            .loss_weights
            .iter()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(config_err!(
                "loss weight {w} for ratio {r} must be finite and >= 0"
            ));
        }
        Ok(())
    }
}

/// Node ids of one supervision head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadNodes {
    /// 1-based unit index.
    pub unit: usize,
    pub up_ratio: u32,
    pub logits: NodeId,
    /// Fused score map; equals `logits` without fusion or in unit 1.
    pub score: NodeId,
    /// Score map resized to the image.
    pub resized: NodeId,
    pub loss: NodeId,
}

/// Node ids of one unit's main path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitNodes {
    /// Features at 1/16 entering the decoder.
    pub f16: NodeId,
    /// First upsampling block output (1/8).
    pub f8: NodeId,
    /// Second upsampling block output (1/4).
    pub f4: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdnLayout {
    pub image: NodeId,
    pub label_slot: usize,
    pub encoder: EncoderTaps,
    pub skip4: NodeId,
    pub skip8: NodeId,
    pub units: Vec<UnitNodes>,
    pub heads: Vec<HeadNodes>,
    /// Index into `heads` of the last unit's ratio-4 head.
    pub prediction: usize,
}

/// Assemble the full stacked network described by `cfg`.
pub fn build_sdn(cfg: &SdnConfig) -> Result<(ComputeGraph, SdnLayout)> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let image = b.input("image", 3)?;
    let label_slot = b.label_slot();
    let taps = encoder(&mut b, image, &cfg.encoder, cfg.skip_tap)?;
    let bn = cfg.encoder.bn;
    let (skip4, skip8) = b.scoped("skip", |b| -> Result<(NodeId, NodeId)> {
        let h4 = b.scoped("h4", |b| skip_conv(b, taps.quarter, cfg.skip_filters, bn))?;
        let h8 = b.scoped("h8", |b| skip_conv(b, taps.eighth, cfg.skip_filters, bn))?;
        Ok((h4, h8))
    })?;
    // Brings the encoder's deepest features to the width every later unit
    // produces at 1/16, so units 2..M are structurally identical.
    let bridge = b.scoped("encoder", |b| {
        b.conv(
            taps.deepest,
            "bridge",
            cfg.down_blocks[1].compression_filters,
            3,
            ConvAttrs::same(3, 1),
            true,
            Gain::Linear,
        )
    })?;

    let mut units: Vec<UnitNodes> = Vec::with_capacity(cfg.num_units);
    let mut heads: Vec<HeadNodes> = Vec::new();
    let mut scores: BTreeMap<u32, NodeId> = BTreeMap::new();
    for n in 1..=cfg.num_units {
        let last = n == cfg.num_units;
        let unit = b.scoped(format!("unit{n}"), |b| -> Result<UnitNodes> {
            let f16 = match units.last() {
                None => bridge,
                Some(prev) => {
                    let d1 = b.scoped("down1", |b| {
                        downsampling_block(b, prev.f4, Some(prev.f8), &cfg.down_blocks[0])
                    })?;
                    b.scoped("down2", |b| {
                        downsampling_block(b, d1, Some(prev.f16), &cfg.down_blocks[1])
                    })?
                }
            };
            let f8 = b.scoped("up1", |b| {
                upsampling_block(b, f16, skip8, &cfg.up_blocks[0], false)
            })?;
            let f4 = b.scoped("up2", |b| {
                upsampling_block(b, f8, skip4, &cfg.up_blocks[1], last)
            })?;

            for (ratio, feat) in [(16, f16), (8, f8), (4, f4)] {
                if !cfg.supervision_ratios.contains(&ratio)
                    || (n == 1 && ratio == 16 && !cfg.unit1_ratio16_from_encoder)
                {
                    continue;
                }
                let head = b.scoped(format!("head{ratio}"), |b| -> Result<HeadNodes> {
                    let logits = classifier(b, feat, cfg.num_classes, cfg.classifier_gain)?;
                    let score = match scores.get(&ratio) {
                        Some(&prev) if cfg.score_fusion => b.add(logits, prev, "fuse")?,
                        _ => logits,
                    };
                    let resized = b.resize_like(score, image, "resize")?;
                    let loss = b.softmax_ce(resized, label_slot, cfg.ignore_index, "loss")?;
                    Ok(HeadNodes {
                        unit: n,
                        up_ratio: ratio,
                        logits,
                        score,
                        resized,
                        loss,
                    })
                })?;
                scores.insert(ratio, head.score);
                heads.push(head);
            }
            Ok(UnitNodes { f16, f8, f4 })
        })?;
        units.push(unit);
    }
    let prediction = heads
        .iter()
        .position(|h| h.unit == cfg.num_units && h.up_ratio == 4)
        .expect("ratio 4 is always supervised");
    let layout = SdnLayout {
        image,
        label_slot,
        encoder: taps,
        skip4,
        skip8,
        units,
        heads,
        prediction,
    };
    Ok((b.finish(), layout))
}

/// One supervision head's outputs from a training forward pass.
#[derive(Debug, Clone)]
pub struct SupervisionHead<T: Scalar = f32> {
    pub unit: usize,
    pub up_ratio: u32,
    /// Classifier output E at the block's native resolution.
    pub logits: Tensor4<T>,
    /// Fused score map S.
    pub score: Tensor4<T>,
    pub loss: f64,
}

/// Per-head losses of one forward pass, in head order.
#[derive(Debug, Clone, PartialEq)]
pub struct Losses {
    pub heads: Vec<f64>,
    pub total: f64,
}

/// Built network plus its layout, ready for training and inference.
#[derive(Debug, Clone)]
pub struct SdnModel<T: Scalar = f32> {
    config: SdnConfig,
    layout: SdnLayout,
    pub net: Network<T>,
}

impl<T: Scalar> SdnModel<T> {
    pub fn new(config: SdnConfig, seed: u64) -> Result<Self> {
        let (graph, layout) = build_sdn(&config)?;
        Ok(Self {
            config,
            layout,
            net: Network::new(graph, seed),
        })
    }

    pub fn config(&self) -> &SdnConfig {
        &self.config
    }

    pub fn layout(&self) -> &SdnLayout {
        &self.layout
    }

    pub fn graph(&self) -> &ComputeGraph {
        self.net.graph()
    }

    /// Human-readable head names, e.g. `unit2/ratio8`.
    pub fn head_names(&self) -> Vec<String> {
        self.layout
            .heads
            .iter()
            .map(|h| format!("unit{}/ratio{}", h.unit, h.up_ratio))
            .collect()
    }

    pub fn head_weights(&self) -> Vec<f64> {
        self.layout
            .heads
            .iter()
            .map(|h| self.config.loss_weight(h.up_ratio))
            .collect()
    }

    fn check_image(&self, image: &Tensor4<T>) -> Result<()> {
        let s = image.shape();
        if s.c != 3 {
            return Err(data_err!("expected a 3-channel image, got shape {s}"));
        }
        if s.n == 0 || s.h == 0 || s.w == 0 || s.h % 16 != 0 || s.w % 16 != 0 {
            return Err(Error::Usage(format!(
                "image of {}x{} is not divisible by 16; pad it with pad_to_16 first",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Forward pass evaluating every head's loss. Labels must align with
    /// the image.
    pub fn forward_losses(
        &mut self,
        image: &Tensor4<T>,
        labels: &LabelMap,
        mode: Mode,
        seed: u64,
    ) -> Result<Losses> {
        self.check_image(image)?;
        let s = image.shape();
        if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
            return Err(data_err!(
                "labels of {}x{}x{} do not match image {s}",
                labels.n,
                labels.h,
                labels.w
            ));
        }
        let outputs: Vec<NodeId> = self.layout.heads.iter().map(|h| h.loss).collect();
        let feed = Feed {
            inputs: vec![image],
            labels: vec![labels],
            mode,
            seed,
        };
        self.net.forward(&feed, &outputs)?;
        let heads: Vec<f64> = outputs
            .iter()
            .map(|&id| self.net.loss(id).expect("loss evaluated"))
            .collect();
        let total = heads
            .iter()
            .zip(self.head_weights())
            .map(|(l, w)| l * w)
            .sum();
        Ok(Losses { heads, total })
    }

    /// Training-mode forward pass returning every head's maps and losses.
    pub fn forward_train(
        &mut self,
        image: &Tensor4<T>,
        labels: &LabelMap,
        seed: u64,
    ) -> Result<(Vec<SupervisionHead<T>>, f64)> {
        let losses = self.forward_losses(image, labels, Mode::Train, seed)?;
        let heads = self
            .layout
            .heads
            .iter()
            .zip(&losses.heads)
            .map(|(h, &loss)| SupervisionHead {
                unit: h.unit,
                up_ratio: h.up_ratio,
                logits: self.net.value(h.logits).expect("evaluated").clone(),
                score: self.net.value(h.score).expect("evaluated").clone(),
                loss,
            })
            .collect();
        Ok((heads, losses.total))
    }

    /// Accumulate gradients of the weighted total loss of the last forward
    /// pass.
    pub fn backward(&mut self) -> Result<()> {
        let ids: Vec<NodeId> = self.layout.heads.iter().map(|h| h.loss).collect();
        let weights = self.head_weights();
        self.net.backward(&ids, &weights)
    }

    /// Softmax of the final score map resized to the image, in infer mode.
    pub fn probabilities(&mut self, image: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_image(image)?;
        let out = self.layout.heads[self.layout.prediction].resized;
        self.net.forward(&Feed::infer(vec![image]), &[out])?;
        Ok(ops::softmax_channels(
            self.net.value(out).expect("evaluated"),
        ))
    }

    pub fn predict(&mut self, image: &Tensor4<T>) -> Result<LabelMap> {
        Ok(argmax_labels(&self.probabilities(image)?))
    }

    /// Average of probability maps over rescaled (and optionally mirrored)
    /// copies of `image`, each padded to a multiple of 16 with `mean`.
    pub fn ms_flip_probabilities(
        &mut self,
        image: &Tensor4<T>,
        scales: &[f64],
        mirror: bool,
        mean: &[f64],
    ) -> Result<Tensor4<T>> {
        if scales.is_empty() || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Usage(format!(
                "scales must be non-empty and positive, got {scales:?}"
            )));
        }
        let s = image.shape();
        let mut acc = Tensor4::zeros(crate::tensor::Shape4::new(
            s.n,
            self.config.num_classes,
            s.h,
            s.w,
        ));
        let mut terms = 0usize;
        for &scale in scales {
            let sh = (s.h as f64 * scale).round() as usize;
            let sw = (s.w as f64 * scale).round() as usize;
            if sh < 16 || sw < 16 {
                warn!("skipping scale {scale}: {sh}x{sw} is below the 16 px minimum");
                continue;
            }
            let scaled = if (sh, sw) == (s.h, s.w) {
                image.clone()
            } else {
                ops::bilinear_resize(image, sh, sw)
            };
            let flips: &[bool] = if mirror { &[false, true] } else { &[false] };
            for &flip in flips {
                let x = if flip {
                    scaled.flip_horizontal()
                } else {
                    scaled.clone()
                };
                let (padded, _) = pad_to_16(&x, mean)?;
                let mut p = self.probabilities(&padded)?.crop(sh, sw);
                if flip {
                    p = p.flip_horizontal();
                }
                if (sh, sw) != (s.h, s.w) {
                    p = ops::bilinear_resize(&p, s.h, s.w);
                }
                acc.add_assign(&p);
                terms += 1;
            }
        }
        if terms == 0 {
            return Err(Error::Usage(format!(
                "no usable scale in {scales:?} for a {}x{} image",
                s.h, s.w
            )));
        }
        if terms > 1 {
            acc.scale(T::of(1.0 / terms as f64));
        }
        Ok(acc)
    }

    pub fn ms_flip_predict(
        &mut self,
        image: &Tensor4<T>,
        scales: &[f64],
        mirror: bool,
        mean: &[f64],
    ) -> Result<LabelMap> {
        Ok(argmax_labels(
            &self.ms_flip_probabilities(image, scales, mirror, mean)?,
        ))
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels<T: Scalar>(scores: &Tensor4<T>) -> LabelMap {
    let s = scores.shape();
    let plane = s.h * s.w;
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let sample = scores.sample(n);
        for i in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if sample[c * plane + i] > sample[best * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap {
        n: s.n,
        h: s.h,
        w: s.w,
        data: out,
    }
}
