//! Batch normalization over `(n, h, w)` per channel.

use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

use super::Mode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnAttrs {
    pub eps: f64,
    /// Weight of the previous running value in the running-stat update.
    pub momentum: f64,
}

impl Default for BnAttrs {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Running mean / variance used in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    mode: Mode,
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
}

fn per_channel<T: Scalar>(x: &Tensor4<T>, mut f: impl FnMut(usize, &[T])) {
    let s = x.shape();
    let plane = s.plane();
    for n in 0..s.n {
        let sample = x.sample(n);
        for c in 0..s.c {
            f(c, &sample[c * plane..(c + 1) * plane]);
        }
    }
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
    attrs: &BnAttrs,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c || stats.channels() != s.c {
        return Err(config_err!(
            "batch norm over {} channels got gamma {}, beta {}, stats {}",
            s.c,
            gamma.len(),
            beta.len(),
            stats.channels()
        ));
    }
    let count = s.n * s.plane();
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; s.c];
            per_channel(x, |c, xs| sum[c] += xs.iter().map(|v| v.f64()).sum::<f64>());
            let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            let mut sq = vec![0.0f64; s.c];
            per_channel(x, |c, xs| {
                sq[c] += xs.iter().map(|v| (v.f64() - mean[c]).powi(2)).sum::<f64>()
            });
            let var: Vec<f64> = sq.iter().map(|v| v / count as f64).collect();
            let m = attrs.momentum;
            for c in 0..s.c {
                let unbiased = if count > 1 {
                    sq[c] / (count - 1) as f64
                } else {
                    var[c]
                };
                stats.mean[c] = T::of(m * stats.mean[c].f64() + (1.0 - m) * mean[c]);
                stats.var[c] = T::of(m * stats.var[c].f64() + (1.0 - m) * unbiased);
            }
            (mean, var)
        }
        Mode::Infer => (
            stats.mean.iter().map(|v| v.f64()).collect(),
            stats.var.iter().map(|v| v.f64()).collect(),
        ),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::of(1.0 / (v + attrs.eps).sqrt()))
        .collect();
    let mean: Vec<T> = mean.into_iter().map(T::of).collect();
    let mut xhat = Tensor4::zeros(s);
    let mut y = Tensor4::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let range = n * s.c * plane + c * plane..n * s.c * plane + (c + 1) * plane;
            for i in range {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
    }
    Ok((
        y,
        BnCache {
            mode,
            xhat,
            inv_std,
        },
    ))
}

pub struct BnGrads<T> {
    pub x: Tensor4<T>,
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    gy: &Tensor4<T>,
    gamma: &Tensor4<T>,
    cache: &BnCache<T>,
) -> BnGrads<T> {
    let s = gy.shape();
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut sum_g = vec![0.0f64; s.c];
    let mut sum_gx = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = n * s.c * plane + c * plane;
            for i in base..base + plane {
                let g = gy.data()[i].f64();
                sum_g[c] += g;
                sum_gx[c] += g * cache.xhat.data()[i].f64();
            }
        }
    }
    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let base = n * s.c * plane + c * plane;
            let scale = gamma.data()[c] * cache.inv_std[c];
            let (mg, mgx) = (T::of(sum_g[c] / count), T::of(sum_gx[c] / count));
            for i in base..base + plane {
                gx.data_mut()[i] = match cache.mode {
                    Mode::Train => scale * (gy.data()[i] - mg - cache.xhat.data()[i] * mgx),
                    Mode::Infer => scale * gy.data()[i],
                };
            }
        }
    }
    let channel = Shape4::new(1, s.c, 1, 1);
    BnGrads {
        x: gx,
        gamma: Tensor4::from_fn(channel, |c| T::of(sum_gx[c])),
        beta: Tensor4::from_fn(channel, |c| T::of(sum_g[c])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(v: f64, c: usize) -> Tensor4<f64> {
        Tensor4::full(Shape4::new(1, c, 1, 1), v)
    }

    #[test]
    fn train_mode_standardizes() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(3, 2, 4, 4), |i| {
            ((i * 37) % 11) as f64 * 0.7 - 2.0
        });
        let mut stats = RunningStats::new(2);
        let (y, _) = batch_norm(
            &x,
            &channel(1.0, 2),
            &channel(0.0, 2),
            &mut stats,
            Mode::Train,
            &BnAttrs::default(),
        )
        .unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..16).map(move |p| (n, p)))
                .map(|(n, p)| y.at(n, c, p / 4, p % 4))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn infer_before_training_uses_identity_stats() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(1, 1, 2, 2), |i| i as f64);
        let mut stats = RunningStats::new(1);
        let (y, _) = batch_norm(
            &x,
            &channel(1.0, 1),
            &channel(0.0, 1),
            &mut stats,
            Mode::Infer,
            &BnAttrs::default(),
        )
        .unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let x = Tensor4::<f64>::full(Shape4::new(2, 1, 2, 2), 5.0);
        let mut stats = RunningStats::new(1);
        batch_norm(
            &x,
            &channel(1.0, 1),
            &channel(0.0, 1),
            &mut stats,
            Mode::Train,
            &BnAttrs::default(),
        )
        .unwrap();
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.var[0] - 0.9).abs() < 1e-12);
    }
}
