//! Static accounting of an [`SdnConfig`]: parameter counts, weighted
//! depth, receptive field and activation memory.
//!
//! Parameter and depth counts are computed in closed form from the
//! configuration alone; the test suite checks them against the graph the
//! builder actually produces. Conventions: every weight, bias and BN
//! scale/shift counts as a parameter, BN running statistics do not; depth
//! counts convolutions and deconvolutions (classifier included) on the
//! longest input-to-output path.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::Result;
use crate::graph::{ComputeGraph, Op};
use crate::layers::{BlockConfig, EncoderConfig, SkipTap};
use crate::sdn::{build_sdn, SdnConfig};
use crate::tensor::Shape4;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchReport {
    pub units: usize,
    pub depth: usize,
    pub params_total: u64,
    pub params_by_module: BTreeMap<String, u64>,
    pub receptive_field: (usize, usize),
    /// Bytes of `f32` activations for one sample at `reference_size`.
    pub activation_bytes_estimate: u64,
    pub reference_size: (usize, usize),
}

impl ArchReport {
    pub fn params_millions(&self) -> String {
        format!("{:.1}", self.params_total as f64 / 1e6)
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut s = format!(
            "units={}\ndepth={}\nparams_total={}\nparams_millions={}\nreceptive_field={}x{}\nactivation_bytes={}\nreference_size={}x{}\n",
            self.units,
            self.depth,
            self.params_total,
            self.params_millions(),
            self.receptive_field.0,
            self.receptive_field.1,
            self.activation_bytes_estimate,
            self.reference_size.0,
            self.reference_size.1,
        );
        for (k, v) in &self.params_by_module {
            s.push_str(&format!("params.{k}={v}\n"));
        }
        s
    }
}

impl fmt::Display for ArchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "units            {}", self.units)?;
        writeln!(f, "depth            {}", self.depth)?;
        writeln!(
            f,
            "parameters       {} ({} M)",
            self.params_total,
            self.params_millions()
        )?;
        writeln!(
            f,
            "receptive field  {} x {}",
            self.receptive_field.0, self.receptive_field.1
        )?;
        writeln!(
            f,
            "activations      {:.1} MiB per sample at {}x{}",
            self.activation_bytes_estimate as f64 / (1 << 20) as f64,
            self.reference_size.0,
            self.reference_size.1
        )?;
        for (k, v) in &self.params_by_module {
            writeln!(f, "  {k:<14} {v}")?;
        }
        Ok(())
    }
}

fn conv(ci: usize, co: usize, k: usize, bias: bool) -> u64 {
    (co * ci * k * k + if bias { co } else { 0 }) as u64
}

fn bn(c: usize) -> u64 {
    2 * c as u64
}

/// Parameters and output channels of a dense conv stack.
fn trans(c: usize, b: &BlockConfig) -> (u64, usize) {
    let mut p = 0;
    let mut ch = c;
    for _ in 0..b.num_conv_layers {
        p += bn(ch) + conv(ch, b.growth_filters, b.kernel, true);
        ch = if b.dense {
            ch + b.growth_filters
        } else {
            b.growth_filters
        };
    }
    (p, ch)
}

struct EncoderCount {
    params: u64,
    quarter: usize,
    eighth: usize,
    deepest: usize,
}

fn encoder_count(e: &EncoderConfig, tap: SkipTap) -> EncoderCount {
    let mut p = conv(3, e.init_features, e.stem_kernel, false) + bn(e.init_features);
    let mut c = e.init_features;
    let mut taps = Vec::new();
    let blocks = e.block_layer_counts.len();
    for (i, &layers) in e.block_layer_counts.iter().enumerate() {
        let bottleneck = e.bn_size * e.growth;
        for _ in 0..layers {
            p += bn(c)
                + conv(c, bottleneck, 1, false)
                + bn(bottleneck)
                + conv(bottleneck, e.growth, 3, false);
            c += e.growth;
        }
        let pools = i < e.pooled_transitions();
        if pools && tap == SkipTap::BlockOutput {
            taps.push(c);
        }
        if i + 1 < blocks {
            let t = e.transition_channels(c);
            p += bn(c) + conv(c, t, 1, false);
            c = t;
            if pools && tap == SkipTap::TransitionOutput {
                taps.push(c);
            }
        }
    }
    p += bn(c);
    EncoderCount {
        params: p,
        quarter: taps[0],
        eighth: taps[1],
        deepest: c,
    }
}

/// Closed-form parameter count per module: `encoder`, `skip`, and
/// `unit<n>.{down1,down2,up1,up2,heads}`.
pub fn params_by_module(cfg: &SdnConfig) -> Result<BTreeMap<String, u64>> {
    cfg.validate()?;
    let enc = encoder_count(&cfg.encoder, cfg.skip_tap);
    let sf = cfg.skip_filters;
    let f16_width = cfg.down_blocks[1].compression_filters;
    let mut m = BTreeMap::new();
    m.insert(
        "encoder".to_string(),
        enc.params + conv(enc.deepest, f16_width, 3, true),
    );
    m.insert(
        "skip".to_string(),
        bn(enc.quarter)
            + conv(enc.quarter, sf, 3, true)
            + bn(enc.eighth)
            + conv(enc.eighth, sf, 3, true),
    );

    let (d1, d2) = (&cfg.down_blocks[0], &cfg.down_blocks[1]);
    let (u1, u2) = (&cfg.up_blocks[0], &cfg.up_blocks[1]);
    let mut prev: Option<(usize, usize, usize)> = None;
    for n in 1..=cfg.num_units {
        let last = n == cfg.num_units;
        let unit = format!("unit{n}");
        let c16 = match prev {
            None => f16_width,
            Some((p16, p8, p4)) => {
                let (t, ch) = trans(p4 + p8, d1);
                m.insert(
                    format!("{unit}.down1"),
                    t + conv(ch, d1.compression_filters, d1.kernel, true),
                );
                let (t, ch) = trans(d1.compression_filters + p16, d2);
                m.insert(
                    format!("{unit}.down2"),
                    t + conv(ch, d2.compression_filters, d2.kernel, true),
                );
                d2.compression_filters
            }
        };
        let deconv = |c: usize| (c * c * 16 + c) as u64;
        let (t, ch) = trans(c16 + sf, u1);
        m.insert(
            format!("{unit}.up1"),
            deconv(c16) + t + conv(ch, u1.compression_filters, u1.kernel, true),
        );
        let c8 = u1.compression_filters;
        let (t, ch) = trans(c8 + sf, u2);
        let c4 = if last { ch } else { u2.compression_filters };
        let comp = if last {
            0
        } else {
            conv(ch, c4, u2.kernel, true)
        };
        m.insert(format!("{unit}.up2"), deconv(c8) + t + comp);

        let mut heads = 0;
        for (ratio, c) in [(16, c16), (8, c8), (4, c4)] {
            let skipped = n == 1 && ratio == 16 && !cfg.unit1_ratio16_from_encoder;
            if cfg.supervision_ratios.contains(&ratio) && !skipped {
                heads += conv(c, cfg.num_classes, 3, true);
            }
        }
        m.insert(format!("{unit}.heads"), heads);
        prev = Some((c16, c8, c4));
    }
    Ok(m)
}

pub fn count_params(cfg: &SdnConfig) -> Result<u64> {
    Ok(params_by_module(cfg)?.values().sum())
}

/// Module key of a parameter name, matching [`params_by_module`].
pub fn module_of(param_name: &str) -> String {
    let mut parts = param_name.split('.');
    let first = parts.next().unwrap_or_default();
    if !first.starts_with("unit") {
        return first.to_string();
    }
    match parts.next() {
        Some(p) if p.starts_with("head") => format!("{first}.heads"),
        Some(p) => format!("{first}.{p}"),
        None => first.to_string(),
    }
}

/// Parameter count per module of a built graph, from its parameter specs.
pub fn graph_params_by_module(graph: &ComputeGraph) -> BTreeMap<String, u64> {
    let mut m: BTreeMap<String, u64> = BTreeMap::new();
    for spec in graph.param_specs() {
        *m.entry(module_of(&spec.name)).or_default() += spec.shape.numel() as u64;
    }
    m
}

/// Weighted depth along the longest path: encoder, bridge, then each
/// unit's blocks, ending in the last unit's ratio-4 classifier.
pub fn count_depth(cfg: &SdnConfig) -> Result<usize> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let blocks = e.block_layer_counts.len();
    let encoder = 1 + 2 * e.block_layer_counts.iter().sum::<usize>() + (blocks - 1) + 1;
    let block = |b: &BlockConfig, comp: bool| b.num_conv_layers + usize::from(comp);
    let mut depth = encoder;
    for n in 1..=cfg.num_units {
        if n > 1 {
            depth += block(&cfg.down_blocks[0], true) + block(&cfg.down_blocks[1], true);
        }
        depth += 1 + block(&cfg.up_blocks[0], true);
        depth += 1 + block(&cfg.up_blocks[1], n < cfg.num_units);
    }
    Ok(depth + 1)
}

/// Receptive field of one axis: window size, total stride and the offset
/// of output 0's first input pixel. Output `o` sees input pixels
/// `o * jump + offset ..= o * jump + offset + size - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfWindow {
    pub size: usize,
    pub jump: usize,
    pub offset: isize,
}

impl RfWindow {
    pub const IDENTITY: Self = Self {
        size: 1,
        jump: 1,
        offset: 0,
    };

    /// Compose with a layer of kernel `k`, stride `s`, padding `p`,
    /// dilation `d`: `rf += (k - 1) d jump`, `jump *= s`.
    pub fn then(self, k: usize, s: usize, p: usize, d: usize) -> Self {
        Self {
            size: self.size + (k - 1) * d * self.jump,
            jump: self.jump * s,
            offset: self.offset - (p * self.jump) as isize,
        }
    }

    /// Input pixel range seen by output `o`.
    pub fn span(&self, o: usize) -> (isize, isize) {
        let lo = (o * self.jump) as isize + self.offset;
        (lo, lo + self.size as isize - 1)
    }
}

/// Window of the deepest encoder feature along either axis.
pub fn encoder_rf_window(e: &EncoderConfig) -> RfWindow {
    let mut rf = RfWindow::IDENTITY
        .then(e.stem_kernel, 2, e.stem_kernel / 2, 1)
        .then(e.stem_pool.kernel, e.stem_pool.stride, e.stem_pool.pad, 1);
    let blocks = e.block_layer_counts.len();
    for (i, &layers) in e.block_layer_counts.iter().enumerate() {
        let d = if i + 1 == blocks {
            e.dilation_in_last_stage
        } else {
            1
        };
        for _ in 0..layers {
            rf = rf.then(1, 1, 0, 1).then(3, 1, d, d);
        }
        if i + 1 < blocks {
            rf = rf.then(1, 1, 0, 1);
            if i < e.pooled_transitions() {
                rf = rf.then(2, 2, 0, 1);
            }
        }
    }
    rf
}

/// `(rf_h, rf_w)` of the deepest encoder feature.
pub fn receptive_field(cfg: &SdnConfig) -> Result<(usize, usize)> {
    cfg.encoder.validate()?;
    let rf = encoder_rf_window(&cfg.encoder).size;
    Ok((rf, rf))
}

/// Bytes of every non-parameter node output for one `(h, w)` sample.
pub fn activation_bytes(graph: &ComputeGraph, h: usize, w: usize) -> Result<u64> {
    let shapes = graph.infer_shapes(&[Shape4::new(1, 3, h, w)])?;
    Ok(graph
        .nodes()
        .iter()
        .zip(&shapes)
        .filter(|(n, _)| !matches!(n.op, Op::Param(_) | Op::SoftmaxCe { .. }))
        .map(|(_, s)| 4 * s.numel() as u64)
        .sum())
}

/// Full report; activations are estimated at `reference` (`h`, `w`).
pub fn analyze(cfg: &SdnConfig, reference: (usize, usize)) -> Result<ArchReport> {
    let params_by_module = params_by_module(cfg)?;
    let (graph, _) = build_sdn(cfg)?;
    Ok(ArchReport {
        units: cfg.num_units,
        depth: count_depth(cfg)?,
        params_total: params_by_module.values().sum(),
        params_by_module,
        receptive_field: receptive_field(cfg)?,
        activation_bytes_estimate: activation_bytes(&graph, reference.0, reference.1)?,
        reference_size: reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_keys() {
        assert_eq!(module_of("encoder.block1.layer0.conv1.weight"), "encoder");
        assert_eq!(
            module_of("unit2.down1.trans.layer0.conv.bias"),
            "unit2.down1"
        );
        assert_eq!(module_of("unit3.head16.classify.weight"), "unit3.heads");
        assert_eq!(module_of("skip.h4.conv.weight"), "skip");
    }

    #[test]
    fn window_composition() {
        let one = RfWindow::IDENTITY.then(3, 1, 1, 1);
        assert_eq!((one.size, one.span(0)), (3, (-1, 1)));
        assert_eq!(one.then(3, 1, 1, 1).size, 5);
        let pooled_dilated = RfWindow::IDENTITY.then(2, 2, 0, 1).then(3, 1, 2, 2);
        assert_eq!(
            pooled_dilated.size - RfWindow::IDENTITY.then(2, 2, 0, 1).size,
            8
        );
    }
}
