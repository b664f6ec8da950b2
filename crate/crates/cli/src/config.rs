//! `key = value` run files shared by `train`, `infer` and `eval`.
//!
//! Model keys: `units`, `encoder`, `classes`, `supervision`, `score_fusion`,
//! `skip_tap`, `loss_weight.<ratio>`. Every other key goes to
//! [`TrainConfig::apply`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sdn_core::{EncoderKind, SdnConfig, SkipTap, TrainConfig};

pub const MODEL_FILE: &str = "model.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub units: usize,
    pub encoder: EncoderKind,
    pub classes: Option<usize>,
    pub supervision: Vec<u32>,
    pub score_fusion: bool,
    pub skip_tap: SkipTap,
    pub loss_weights: Vec<(u32, f64)>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            units: 2,
            encoder: EncoderKind::Mini,
            classes: None,
            supervision: vec![16, 8, 4],
            score_fusion: true,
            skip_tap: SkipTap::BlockOutput,
            loss_weights: Vec::new(),
        }
    }
}

pub fn parse_encoder(s: &str) -> Result<EncoderKind> {
    match s {
        "mini" => Ok(EncoderKind::Mini),
        "densenet161" => Ok(EncoderKind::DenseNet161),
        other => bail!("unknown encoder '{other}' (expected mini or densenet161)"),
    }
}

fn encoder_name(e: EncoderKind) -> &'static str {
    match e {
        EncoderKind::Mini => "mini",
        EncoderKind::DenseNet161 => "densenet161",
    }
}

impl ModelSpec {
    /// Returns `false` when `key` is not a model key.
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "units" => self.units = value.parse().context("units")?,
            "encoder" => self.encoder = parse_encoder(value)?,
            "classes" => self.classes = Some(value.parse().context("classes")?),
            "supervision" => {
                self.supervision = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_, _>>()
                    .context("supervision")?
            }
            "score_fusion" => self.score_fusion = value.parse().context("score_fusion")?,
            "skip_tap" => {
                self.skip_tap = match value {
                    "block" => SkipTap::BlockOutput,
                    "transition" => SkipTap::TransitionOutput,
                    other => bail!("skip_tap must be block or transition, got '{other}'"),
                }
            }
            _ => match key.strip_prefix("loss_weight.") {
                Some(r) => {
                    let ratio = r.parse().with_context(|| format!("bad ratio in '{key}'"))?;
                    self.loss_weights
                        .push((ratio, value.parse().with_context(|| key.to_string())?));
                }
                None => return Ok(false),
            },
        }
        Ok(true)
    }

    pub fn build(&self, classes: usize) -> Result<SdnConfig> {
        let mut cfg = match self.encoder {
            EncoderKind::Mini => SdnConfig::mini(self.units, classes),
            EncoderKind::DenseNet161 => SdnConfig {
                num_classes: classes,
                ..SdnConfig::paper(self.units)
            },
        }
        .with_supervision(&self.supervision);
        cfg.score_fusion = self.score_fusion;
        cfg.skip_tap = self.skip_tap;
        cfg.loss_weights.extend(self.loss_weights.iter().copied());
        cfg.validate()?;
        Ok(cfg)
    }

    /// The file `train` leaves next to its weights.
    pub fn render(&self, classes: usize) -> String {
        let mut s = String::new();
        let sup: Vec<String> = self.supervision.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "units = {}", self.units);
        let _ = writeln!(s, "encoder = {}", encoder_name(self.encoder));
        let _ = writeln!(s, "classes = {classes}");
        let _ = writeln!(s, "supervision = {}", sup.join(","));
        let _ = writeln!(s, "score_fusion = {}", self.score_fusion);
        let tap = if self.skip_tap == SkipTap::BlockOutput {
            "block"
        } else {
            "transition"
        };
        let _ = writeln!(s, "skip_tap = {tap}");
        for (r, w) in &self.loss_weights {
            let _ = writeln!(s, "loss_weight.{r} = {w}");
        }
        s
    }
}

/// Parse a run file into model and training settings.
pub fn parse(text: &str, model: &mut ModelSpec, train: &mut TrainConfig) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected 'key = value', got '{line}'", n + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        let known = model
            .apply(k, v)
            .with_context(|| format!("line {}", n + 1))?
            || train
                .apply(k, v)
                .with_context(|| format!("line {}", n + 1))?;
        if !known {
            bail!("line {}: unknown key '{k}'", n + 1);
        }
    }
    Ok(())
}

pub fn read(path: &Path, model: &mut ModelSpec, train: &mut TrainConfig) -> Result<()> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse(&text, model, train).with_context(|| path.display().to_string())
}
