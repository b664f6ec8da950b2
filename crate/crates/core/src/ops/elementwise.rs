use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

use super::Mode;

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, gy: &Tensor4<T>) -> Tensor4<T> {
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    gx
}

/// Inverted dropout. In train mode each unit survives with `keep_prob` and
/// is scaled by `1 / keep_prob`; the returned mask holds the per-unit factor.
/// Infer mode is the identity with no mask.
pub fn dropout<T: Scalar>(
    x: &Tensor4<T>,
    keep_prob: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor4<T>, Option<Vec<T>>)> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(config_err!("keep_prob must lie in (0, 1], got {keep_prob}"));
    }
    if mode == Mode::Infer || keep_prob == 1.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = T::of(1.0 / keep_prob);
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < keep_prob {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(gy: &Tensor4<T>, mask: Option<&[T]>) -> Tensor4<T> {
    let mut gx = gy.clone();
    if let Some(mask) = mask {
        for (g, &m) in gx.data_mut().iter_mut().zip(mask) {
            *g *= m;
        }
    }
    gx
}

/// Concatenate along the channel axis, preserving input order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = xs
        .first()
        .ok_or_else(|| config_err!("concat of zero tensors"))?
        .shape();
    for x in xs {
        let s = x.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(config_err!(
                "concat inputs disagree: {} vs {} (batch and spatial dims must match)",
                s,
                first
            ));
        }
    }
    let c: usize = xs.iter().map(|x| x.shape().c).sum();
    let shape = Shape4::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for x in xs {
            data.extend_from_slice(x.sample(n));
        }
    }
    Tensor4::from_vec(shape, data)
}

/// Split a concat gradient back into per-input pieces of `channels[i]`.
pub fn concat_backward<T: Scalar>(gy: &Tensor4<T>, channels: &[usize]) -> Vec<Tensor4<T>> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let part = gy.slice_channels(start, start + c);
            start += c;
            part
        })
        .collect()
}

pub fn eltwise_add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(config_err!("cannot add {} and {}", a.shape(), b.shape()));
    }
    let mut y = a.clone();
    y.add_assign(b);
    Ok(y)
}
