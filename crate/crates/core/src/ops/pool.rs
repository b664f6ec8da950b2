use super::conv::conv_out_len;
use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolAttrs {
    /// 2x2 window, stride 2.
    pub const HALVE: Self = Self {
        kernel: 2,
        stride: 2,
        pad: 0,
    };

    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_shape(&self, x: Shape4) -> Result<Shape4> {
        if self.kernel == 0 || self.stride == 0 || self.pad >= self.kernel {
            return Err(config_err!("invalid pooling attrs {self:?}"));
        }
        let oh = conv_out_len(x.h, self.kernel, self.stride, self.pad, 1);
        let ow = conv_out_len(x.w, self.kernel, self.stride, self.pad, 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Shape4::new(x.n, x.c, oh, ow)),
            _ => Err(config_err!(
                "pooling window {} does not fit input {}x{}",
                self.kernel,
                x.h,
                x.w
            )),
        }
    }

    fn window(&self, out: usize, len: usize) -> std::ops::Range<usize> {
        let start = (out * self.stride) as isize - self.pad as isize;
        let end = (start + self.kernel as isize).min(len as isize);
        start.max(0) as usize..end as usize
    }
}

/// Max pooling. Returns the pooled tensor and, per output entry, the flat
/// input index of the winning element (first maximum in scan order).
pub fn maxpool2d<T: Scalar>(x: &Tensor4<T>, attrs: &PoolAttrs) -> Result<(Tensor4<T>, Vec<usize>)> {
    let xs = x.shape();
    let ys = attrs.output_shape(xs)?;
    let mut y = Tensor4::zeros(ys);
    let mut argmax = Vec::with_capacity(ys.numel());
    for n in 0..ys.n {
        for c in 0..ys.c {
            for oy in 0..ys.h {
                let rows = attrs.window(oy, xs.h);
                for ox in 0..ys.w {
                    let cols = attrs.window(ox, xs.w);
                    let mut best = x.offset(n, c, rows.start, cols.start);
                    for iy in rows.clone() {
                        for ix in cols.clone() {
                            let i = x.offset(n, c, iy, ix);
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                    }
                    y.set(n, c, oy, ox, x.data()[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Routes each output gradient to the input position recorded in `argmax`.
pub fn maxpool2d_backward<T: Scalar>(
    input: Shape4,
    argmax: &[usize],
    gy: &Tensor4<T>,
) -> Tensor4<T> {
    let mut gx = Tensor4::zeros(input);
    for (&src, &g) in argmax.iter().zip(gy.data()) {
        gx.data_mut()[src] += g;
    }
    gx
}

/// Average pooling without padding.
pub fn avgpool2d<T: Scalar>(x: &Tensor4<T>, attrs: &PoolAttrs) -> Result<Tensor4<T>> {
    if attrs.pad != 0 {
        return Err(config_err!("average pooling does not support padding"));
    }
    let xs = x.shape();
    let ys = attrs.output_shape(xs)?;
    let norm = T::one() / T::of((attrs.kernel * attrs.kernel) as f64);
    let mut y = Tensor4::zeros(ys);
    for n in 0..ys.n {
        for c in 0..ys.c {
            for oy in 0..ys.h {
                for ox in 0..ys.w {
                    let mut acc = T::zero();
                    for iy in attrs.window(oy, xs.h) {
                        for ix in attrs.window(ox, xs.w) {
                            acc += x.at(n, c, iy, ix);
                        }
                    }
                    y.set(n, c, oy, ox, acc * norm);
                }
            }
        }
    }
    Ok(y)
}

pub fn avgpool2d_backward<T: Scalar>(
    input: Shape4,
    attrs: &PoolAttrs,
    gy: &Tensor4<T>,
) -> Tensor4<T> {
    let ys = gy.shape();
    let norm = T::one() / T::of((attrs.kernel * attrs.kernel) as f64);
    let mut gx = Tensor4::zeros(input);
    for n in 0..ys.n {
        for c in 0..ys.c {
            for oy in 0..ys.h {
                for ox in 0..ys.w {
                    let g = gy.at(n, c, oy, ox) * norm;
                    for iy in attrs.window(oy, input.h) {
                        for ix in attrs.window(ox, input.w) {
                            let i = gx.offset(n, c, iy, ix);
                            gx.data_mut()[i] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}
