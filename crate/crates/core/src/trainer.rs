//! SGD with momentum under a poly learning-rate schedule, training-time
//! augmentation and the training loop.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::graph::{mix_seed, Param};
use crate::ops::{bilinear_resize, Mode};
use crate::sdn::SdnModel;
use crate::tensor::{LabelMap, Scalar, Shape4, Tensor4};
use crate::weights;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iter: usize,
    pub crop: usize,
    pub hflip: bool,
    pub scale_set: Vec<f64>,
    pub aspect_set: Vec<f64>,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Schedule and augmentation of the full-size setting: lr 2.5e-4,
    /// batch 10, 320 crops, five scales and five aspect ratios.
    pub fn paper_profile(max_iter: usize) -> Self {
        Self {
            base_lr: 2.5e-4,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 10,
            max_iter,
            crop: 320,
            hflip: true,
            scale_set: vec![0.6, 0.8, 1.0, 1.2, 1.4],
            aspect_set: vec![0.7, 0.85, 1.0, 1.15, 1.3],
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// CPU-sized runs on 64 px synthetic images with a from-scratch
    /// encoder, hence the larger learning rate.
    pub fn desk_profile(max_iter: usize) -> Self {
        Self {
            base_lr: 0.01,
            batch_size: 4,
            crop: 64,
            scale_set: vec![0.8, 1.0, 1.2],
            aspect_set: vec![0.85, 1.0, 1.15],
            ..Self::paper_profile(max_iter)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!(
                "base_lr must be positive, got {}",
                self.base_lr
            ));
        }
        if !(self.power >= 0.0) {
            return Err(config_err!("power must be >= 0, got {}", self.power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be >= 1"));
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(config_err!(
                "crop must be a positive multiple of 16, got {}",
                self.crop
            ));
        }
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.scale_set) || !positive(&self.aspect_set) {
            return Err(config_err!(
                "scale and aspect sets must be non-empty and positive"
            ));
        }
        Ok(())
    }

    /// Set one `key = value` field. Returns `false` for keys this config
    /// does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse().map_err(|e| config_err!("{key}: {e}"))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "power" => self.power = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_iter" => self.max_iter = num(key, value)?,
            "crop" => self.crop = num(key, value)?,
            "hflip" => self.hflip = num(key, value)?,
            "scales" => self.scale_set = list(key, value)?,
            "aspects" => self.aspect_set = list(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `base_lr * (1 - iter / max_iter)^power`, and 0 from `max_iter` on.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter >= cfg.max_iter {
        return 0.0;
    }
    cfg.base_lr * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.power)
}

/// Heavy-ball update `v = momentum v + grad + wd value`, `value -= lr v`,
/// with decay skipped on exempt parameters; gradients are zeroed after.
pub fn sgd_step<T: Scalar>(params: &mut [Param<T>], lr: f64, cfg: &TrainConfig) {
    let lr = T::of(lr);
    let m = T::of(cfg.momentum);
    for p in params {
        let wd = T::of(if p.decay_exempt {
            0.0
        } else {
            cfg.weight_decay
        });
        let (value, grad, buf) = (p.value.data_mut(), p.grad.data(), p.momentum_buf.data_mut());
        for i in 0..value.len() {
            buf[i] = m * buf[i] + grad[i] + wd * value[i];
            value[i] = value[i] - lr * buf[i];
        }
        p.zero_grad();
    }
}

/// Nearest-neighbour resize of every label map (pixel centers map to
/// source pixel centers).
pub fn resize_labels_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let src = |o: usize, out: usize, inp: usize| {
        (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1)
    };
    let mut data = Vec::with_capacity(labels.n * out_h * out_w);
    for n in 0..labels.n {
        for y in 0..out_h {
            let sy = src(y, out_h, labels.h);
            for x in 0..out_w {
                data.push(labels.at(n, sy, src(x, out_w, labels.w)));
            }
        }
    }
    LabelMap {
        n: labels.n,
        h: out_h,
        w: out_w,
        data,
    }
}

/// Random scale and aspect change, crop of `cfg.crop` (padding with the
/// mean pixel and `ignore` where the image is smaller) and optional
/// horizontal flip, applied consistently to one image and its labels.
pub fn augment<R: Rng>(
    image: &Tensor4<f32>,
    labels: &LabelMap,
    cfg: &TrainConfig,
    mean: &[f64; 3],
    ignore: u8,
    rng: &mut R,
) -> (Tensor4<f32>, LabelMap) {
    let s = image.shape();
    let scale = *cfg.scale_set.choose(rng).expect("non-empty scale set");
    let aspect: f64 = *cfg.aspect_set.choose(rng).expect("non-empty aspect set");
    let nh = ((s.h as f64 * scale / aspect.sqrt()).round() as usize).max(1);
    let nw = ((s.w as f64 * scale * aspect.sqrt()).round() as usize).max(1);
    let (img, lbl) = if (nh, nw) == (s.h, s.w) {
        (image.clone(), labels.clone())
    } else {
        (
            bilinear_resize(image, nh, nw),
            resize_labels_nearest(labels, nh, nw),
        )
    };

    let crop = cfg.crop;
    let oy = rng.random_range(0..=nh.saturating_sub(crop));
    let ox = rng.random_range(0..=nw.saturating_sub(crop));
    let mut out_img = Tensor4::zeros(Shape4::new(s.n, s.c, crop, crop));
    let mut out_lbl = LabelMap::filled(s.n, crop, crop, ignore);
    for n in 0..s.n {
        for y in 0..crop {
            let sy = oy + y;
            for x in 0..crop {
                let sx = ox + x;
                let inside = sy < nh && sx < nw;
                for c in 0..s.c {
                    let v = if inside {
                        img.at(n, c, sy, sx)
                    } else {
                        mean[c % 3] as f32
                    };
                    out_img.set(n, c, y, x, v);
                }
                if inside {
                    out_lbl.data[(n * crop + y) * crop + x] = lbl.at(n, sy, sx);
                }
            }
        }
    }
    if cfg.hflip && rng.random_bool(0.5) {
        (out_img.flip_horizontal(), out_lbl.flip_horizontal())
    } else {
        (out_img, out_lbl)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub heads: Vec<f64>,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let heads: Vec<String> = self.heads.iter().map(|h| format!("{h}")).collect();
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.iter,
            self.lr,
            self.total,
            heads.join(",")
        )
    }
}

impl LogRow {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed log row '{line}'"));
        let mut it = line.split('\t');
        let mut field = || it.next().ok_or_else(bad);
        let iter = field()?.parse().map_err(|_| bad())?;
        let lr = field()?.parse().map_err(|_| bad())?;
        let total = field()?.parse().map_err(|_| bad())?;
        let heads = field()?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Ok(Self {
            iter,
            lr,
            total,
            heads,
        })
    }
}

pub const LOG_NAME: &str = "train.log";

/// Where the loop writes its log and checkpoints.
struct Outputs {
    dir: PathBuf,
    log: File,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(LOG_NAME))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }
}

pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("ckpt_{iter:06}.sdnw"))
}

/// Run `cfg.max_iter` iterations of augment, forward, backward and SGD on
/// `data`. With `out_dir`, rows are appended to `train.log` there and
/// checkpoints plus `final.sdnw` are written.
pub fn train_loop(
    model: &mut SdnModel<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut outputs = out_dir.map(Outputs::open).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let names = model.head_names();
    let ignore = model.config().ignore_index;
    let mut rows = Vec::with_capacity(cfg.max_iter);

    for iter in 0..cfg.max_iter {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let s = &data.samples[order.pop().expect("refilled")];
            let (img, lbl) = augment(&s.image, &s.labels, cfg, &data.mean, ignore, &mut rng);
            images.push(img);
            labels.push(lbl);
        }
        let images = Tensor4::stack(&images)?;
        let labels = LabelMap::stack(&labels)?;

        let lr = poly_lr(iter, cfg);
        let losses = model.forward_losses(
            &images,
            &labels,
            Mode::Train,
            mix_seed(cfg.seed, iter as u64),
        )?;
        if let Some(k) = losses.heads.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                iter,
                head: names[k].clone(),
            });
        }
        model.backward()?;
        sgd_step(&mut model.net.params, lr, cfg);

        let row = LogRow {
            iter,
            lr,
            total: losses.total,
            heads: losses.heads,
        };
        if iter % 50 == 0 || iter + 1 == cfg.max_iter {
            info!("iter {iter} lr {lr:.3e} loss {:.4}", row.total);
        }
        if let Some(out) = outputs.as_mut() {
            writeln!(out.log, "{row}")?;
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                weights::save(&checkpoint_path(&out.dir, iter + 1), &model.net)?;
            }
        }
        rows.push(row);
    }
    if let Some(out) = outputs.as_mut() {
        out.log.flush()?;
        weights::save(&out.dir.join("final.sdnw"), &model.net)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_row_round_trip() {
        let row = LogRow {
            iter: 3,
            lr: 1.25e-4,
            total: 2.5,
            heads: vec![1.0, 1.5],
        };
        assert_eq!(LogRow::parse(&row.to_string()).unwrap(), row);
    }

    #[test]
    fn nearest_resize_keeps_values() {
        let m = LabelMap::new(1, 2, 2, vec![0, 1, 2, 255]).unwrap();
        let up = resize_labels_nearest(&m, 4, 4);
        assert_eq!(&up.data[..4], &[0, 0, 1, 1]);
        assert_eq!(up.at(0, 3, 3), 255);
    }
}
