use crate::error::{config_err, data_err, Result};
use crate::tensor::{LabelMap, Scalar, Tensor4};

/// Channel-wise softmax at every pixel.
pub fn softmax_channels<T: Scalar>(logits: &Tensor4<T>) -> Tensor4<T> {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        let src = logits.sample(n);
        let dst = out.sample_mut(n);
        for p in 0..plane {
            let max = (0..s.c)
                .map(|c| src[c * plane + p])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (src[c * plane + p] - max).exp();
                dst[c * plane + p] = e;
                total += e;
            }
            for c in 0..s.c {
                dst[c * plane + p] = dst[c * plane + p] / total;
            }
        }
    }
    out
}

/// Mean pixel-wise cross-entropy over non-ignored pixels and its gradient
/// with respect to the logits. When every pixel is ignored the loss is 0
/// with a zero gradient.
pub fn softmax_ce_loss<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &LabelMap,
    ignore_index: u8,
) -> Result<(f64, Tensor4<T>)> {
    let s = logits.shape();
    if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
        return Err(config_err!(
            "labels ({}, {}, {}) do not match logits {}",
            labels.n,
            labels.h,
            labels.w,
            s
        ));
    }
    if let Some(&bad) = labels
        .data
        .iter()
        .find(|&&l| l != ignore_index && l as usize >= s.c)
    {
        return Err(data_err!(
            "label {bad} outside [0, {}) and not ignore_index {ignore_index}",
            s.c
        ));
    }
    let plane = s.plane();
    let count = labels.data.iter().filter(|&&l| l != ignore_index).count();
    let mut grad = Tensor4::zeros(s);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0f64;
    for n in 0..s.n {
        let src = logits.sample(n);
        let lab = labels.sample(n);
        let dst = grad.sample_mut(n);
        for p in 0..plane {
            let label = lab[p];
            if label == ignore_index {
                continue;
            }
            let max = (0..s.c)
                .map(|c| src[c * plane + p].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = (0..s.c)
                .map(|c| (src[c * plane + p].f64() - max).exp())
                .sum();
            let log_z = max + sum_exp.ln();
            total += log_z - src[label as usize * plane + p].f64();
            for c in 0..s.c {
                let prob = (src[c * plane + p].f64() - log_z).exp();
                let onehot = if c == label as usize { 1.0 } else { 0.0 };
                dst[c * plane + p] = T::of((prob - onehot) * inv);
            }
        }
    }
    Ok((total * inv, grad))
}
