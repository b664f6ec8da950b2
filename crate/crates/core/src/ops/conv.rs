//! 2-D convolution and transposed convolution.
//!
//! The production path lowers each sample to a patch matrix (`im2col`) and
//! runs one GEMM; `conv2d_direct` / `deconv2d_direct` are plain loop nests
//! kept as reference implementations.

use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvAttrs {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for ConvAttrs {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            pad: (0, 0),
            dilation: (1, 1),
        }
    }
}

impl ConvAttrs {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            stride: (stride, stride),
            pad: (pad, pad),
            dilation: (dilation, dilation),
        }
    }

    /// Stride-1 attrs that preserve spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0
        {
            return Err(config_err!(
                "stride and dilation must be >= 1, got {self:?}"
            ));
        }
        Ok(())
    }
}

/// Output length of a convolution along one axis, `None` if the dilated
/// kernel does not fit in the padded input.
pub fn conv_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Option<usize> {
    let extent = (kernel.checked_sub(1)?) * dilation + 1;
    let padded = len + 2 * pad;
    if kernel == 0 || extent > padded {
        return None;
    }
    Some((padded - extent) / stride + 1)
}

/// Output length of a transposed convolution, `None` if it would be <= 0.
pub fn deconv_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Option<usize> {
    if len == 0 || kernel == 0 {
        return None;
    }
    let full = (len - 1) * stride + (kernel - 1) * dilation + 1;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

pub fn conv2d_output_shape(x: Shape4, w: Shape4, attrs: &ConvAttrs) -> Result<Shape4> {
    attrs.validate()?;
    if x.c != w.c {
        return Err(config_err!(
            "conv2d input has {} channels but weight {} expects {}",
            x.c,
            w,
            w.c
        ));
    }
    let oh = conv_out_len(x.h, w.h, attrs.stride.0, attrs.pad.0, attrs.dilation.0);
    let ow = conv_out_len(x.w, w.w, attrs.stride.1, attrs.pad.1, attrs.dilation.1);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape4::new(x.n, w.n, oh, ow)),
        _ => Err(config_err!(
            "conv2d kernel {}x{} (dilation {:?}) does not fit input {}x{} with padding {:?}",
            w.h,
            w.w,
            attrs.dilation,
            x.h,
            x.w,
            attrs.pad
        )),
    }
}

/// Weight layout is `(in_channels, out_channels, kh, kw)`, the transpose of
/// the matching convolution's `(out, in, kh, kw)`.
pub fn deconv2d_output_shape(x: Shape4, w: Shape4, attrs: &ConvAttrs) -> Result<Shape4> {
    attrs.validate()?;
    if x.c != w.n {
        return Err(config_err!(
            "deconv2d input has {} channels but weight {} expects {}",
            x.c,
            w,
            w.n
        ));
    }
    let oh = deconv_out_len(x.h, w.h, attrs.stride.0, attrs.pad.0, attrs.dilation.0);
    let ow = deconv_out_len(x.w, w.w, attrs.stride.1, attrs.pad.1, attrs.dilation.1);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape4::new(x.n, w.c, oh, ow)),
        _ => Err(config_err!(
            "deconv2d output size would be <= 0 for input {}x{}, kernel {}x{}, padding {:?}",
            x.h,
            x.w,
            w.h,
            w.w,
            attrs.pad
        )),
    }
}

fn check_bias<T: Scalar>(b: Option<&Tensor4<T>>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.len() != channels => Err(config_err!(
            "bias has {} entries, layer has {channels} output channels",
            b.len()
        )),
        _ => Ok(()),
    }
}

/// Geometry of one patch-matrix lowering: an image of `c x h x w` seen
/// through a `kh x kw` window producing `oh x ow` positions.
#[derive(Debug, Clone, Copy)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    attrs: ConvAttrs,
}

impl Patches {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the patch matrix is the image itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.attrs.stride == (1, 1)
            && self.attrs.pad == (0, 0)
            && self.oh == self.h
            && self.ow == self.w
    }

    #[inline]
    fn source(&self, out: usize, k: usize, axis: usize) -> Option<usize> {
        let (stride, pad, dil, len) = if axis == 0 {
            (
                self.attrs.stride.0,
                self.attrs.pad.0,
                self.attrs.dilation.0,
                self.h,
            )
        } else {
            (
                self.attrs.stride.1,
                self.attrs.pad.1,
                self.attrs.dilation.1,
                self.w,
            )
        };
        let pos = (out * stride + k * dil) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.source(oy, ky, 0) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx, 1) {
                                        Some(ix) => plane[iy * self.w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-add patch entries back into the image.
    fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, 0) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.source(ox, kx, 1) {
                                plane[iy * self.w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut Tensor4<T>, b: &Tensor4<T>) {
    let s = y.shape();
    let plane = s.plane();
    for n in 0..s.n {
        let sample = y.sample_mut(n);
        for (c, &bias) in b.data().iter().enumerate() {
            sample[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bias);
        }
    }
}

fn bias_grad<T: Scalar>(gy: &Tensor4<T>) -> Tensor4<T> {
    let s = gy.shape();
    let plane = s.plane();
    let mut gb = Tensor4::zeros(Shape4::new(1, s.c, 1, 1));
    for n in 0..s.n {
        let sample = gy.sample(n);
        for c in 0..s.c {
            gb.data_mut()[c] += sample[c * plane..(c + 1) * plane]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    gb
}

/// Cross-correlation of `x (n, ci, h, w)` with `w (co, ci, kh, kw)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    attrs: &ConvAttrs,
) -> Result<Tensor4<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let ys = conv2d_output_shape(xs, ws, attrs)?;
    check_bias(b, ws.n)?;
    let p = Patches {
        c: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        oh: ys.h,
        ow: ys.w,
        attrs: *attrs,
    };
    let (k, cols) = (p.rows(), p.cols());
    let mut y = Tensor4::zeros(ys);
    let mut col = if p.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * cols]
    };
    for n in 0..xs.n {
        let patches: &[T] = if p.is_pointwise() {
            x.sample(n)
        } else {
            p.im2col(x.sample(n), &mut col);
            &col
        };
        T::gemm(
            ws.n,
            k,
            cols,
            T::one(),
            w.data(),
            (k as isize, 1),
            patches,
            (cols as isize, 1),
            T::zero(),
            y.sample_mut(n),
        );
    }
    if let Some(b) = b {
        add_bias(&mut y, b);
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor4<T>>,
    pub w: Tensor4<T>,
    pub b: Option<Tensor4<T>>,
}

/// Gradients of `conv2d` given the upstream gradient `gy`. Weight gradients
/// are summed over the batch in sample order.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    with_bias: bool,
    gy: &Tensor4<T>,
    attrs: &ConvAttrs,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let ys = conv2d_output_shape(xs, ws, attrs)?;
    if gy.shape() != ys {
        return Err(config_err!(
            "conv2d gradient has shape {} but output is {}",
            gy.shape(),
            ys
        ));
    }
    let p = Patches {
        c: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        oh: ys.h,
        ow: ys.w,
        attrs: *attrs,
    };
    let (k, cols) = (p.rows(), p.cols());
    let mut gw = Tensor4::zeros(ws);
    let mut gx = need_x.then(|| Tensor4::zeros(xs));
    let mut col = vec![T::zero(); if p.is_pointwise() { 0 } else { k * cols }];
    let mut gcol = vec![T::zero(); if need_x { k * cols } else { 0 }];
    for n in 0..xs.n {
        let patches: &[T] = if p.is_pointwise() {
            x.sample(n)
        } else {
            p.im2col(x.sample(n), &mut col);
            &col
        };
        // gw += gy_n (co x P) * patches^T (P x K)
        T::gemm(
            ws.n,
            cols,
            k,
            T::one(),
            gy.sample(n),
            (cols as isize, 1),
            patches,
            (1, cols as isize),
            T::one(),
            gw.data_mut(),
        );
        if let Some(gx) = gx.as_mut() {
            // gcol = w^T (K x co) * gy_n (co x P)
            let target: &mut [T] = if p.is_pointwise() {
                gx.sample_mut(n)
            } else {
                &mut gcol
            };
            T::gemm(
                k,
                ws.n,
                cols,
                T::one(),
                w.data(),
                (1, k as isize),
                gy.sample(n),
                (cols as isize, 1),
                T::zero(),
                target,
            );
            if !p.is_pointwise() {
                p.col2im(&gcol, gx.sample_mut(n));
            }
        }
    }
    Ok(ConvGrads {
        x: gx,
        w: gw,
        b: with_bias.then(|| bias_grad(gy)),
    })
}

/// Transposed convolution of `x (n, ci, h, w)` with `w (ci, co, kh, kw)`;
/// the exact adjoint of [`conv2d`] with the same weight tensor.
pub fn deconv2d<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    attrs: &ConvAttrs,
) -> Result<Tensor4<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let ys = deconv2d_output_shape(xs, ws, attrs)?;
    check_bias(b, ws.c)?;
    // Patches of the *output* image that the matching convolution would read.
    let p = Patches {
        c: ys.c,
        h: ys.h,
        w: ys.w,
        kh: ws.h,
        kw: ws.w,
        oh: xs.h,
        ow: xs.w,
        attrs: *attrs,
    };
    let (k, cols) = (p.rows(), p.cols());
    let mut y = Tensor4::zeros(ys);
    let mut col = vec![T::zero(); k * cols];
    for n in 0..xs.n {
        // col = w^T (co*kh*kw x ci) * x_n (ci x hw)
        T::gemm(
            k,
            ws.n,
            cols,
            T::one(),
            w.data(),
            (1, k as isize),
            x.sample(n),
            (cols as isize, 1),
            T::zero(),
            &mut col,
        );
        p.col2im(&col, y.sample_mut(n));
    }
    if let Some(b) = b {
        add_bias(&mut y, b);
    }
    Ok(y)
}

pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    with_bias: bool,
    gy: &Tensor4<T>,
    attrs: &ConvAttrs,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let ys = deconv2d_output_shape(xs, ws, attrs)?;
    if gy.shape() != ys {
        return Err(config_err!(
            "deconv2d gradient has shape {} but output is {}",
            gy.shape(),
            ys
        ));
    }
    let p = Patches {
        c: ys.c,
        h: ys.h,
        w: ys.w,
        kh: ws.h,
        kw: ws.w,
        oh: xs.h,
        ow: xs.w,
        attrs: *attrs,
    };
    let (k, cols) = (p.rows(), p.cols());
    let mut gw = Tensor4::zeros(ws);
    let mut gx = need_x.then(|| Tensor4::zeros(xs));
    let mut gcol = vec![T::zero(); k * cols];
    for n in 0..xs.n {
        p.im2col(gy.sample(n), &mut gcol);
        // gw += x_n (ci x hw) * gcol^T (hw x K)
        T::gemm(
            ws.n,
            cols,
            k,
            T::one(),
            x.sample(n),
            (cols as isize, 1),
            &gcol,
            (1, cols as isize),
            T::one(),
            gw.data_mut(),
        );
        if let Some(gx) = gx.as_mut() {
            T::gemm(
                ws.n,
                k,
                cols,
                T::one(),
                w.data(),
                (k as isize, 1),
                &gcol,
                (cols as isize, 1),
                T::zero(),
                gx.sample_mut(n),
            );
        }
    }
    Ok(ConvGrads {
        x: gx,
        w: gw,
        b: with_bias.then(|| bias_grad(gy)),
    })
}

/// Loop-nest reference for [`conv2d`].
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    attrs: &ConvAttrs,
) -> Result<Tensor4<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let ys = conv2d_output_shape(xs, ws, attrs)?;
    check_bias(b, ws.n)?;
    let mut y = Tensor4::zeros(ys);
    for n in 0..ys.n {
        for co in 0..ys.c {
            for oy in 0..ys.h {
                for ox in 0..ys.w {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[co]);
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            let iy = (oy * attrs.stride.0 + ky * attrs.dilation.0) as isize
                                - attrs.pad.0 as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..ws.w {
                                let ix = (ox * attrs.stride.1 + kx * attrs.dilation.1) as isize
                                    - attrs.pad.1 as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                    y.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Scatter-form reference for [`deconv2d`].
pub fn deconv2d_direct<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    attrs: &ConvAttrs,
) -> Result<Tensor4<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let ys = deconv2d_output_shape(xs, ws, attrs)?;
    check_bias(b, ws.c)?;
    let mut y = Tensor4::zeros(ys);
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    let v = x.at(n, ci, iy, ix);
                    for co in 0..ws.c {
                        for ky in 0..ws.h {
                            let oy = (iy * attrs.stride.0 + ky * attrs.dilation.0) as isize
                                - attrs.pad.0 as isize;
                            if oy < 0 || oy >= ys.h as isize {
                                continue;
                            }
                            for kx in 0..ws.w {
                                let ox = (ix * attrs.stride.1 + kx * attrs.dilation.1) as isize
                                    - attrs.pad.1 as isize;
                                if ox < 0 || ox >= ys.w as isize {
                                    continue;
                                }
                                let i = y.offset(n, co, oy as usize, ox as usize);
                                y.data_mut()[i] += v * w.at(ci, co, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        add_bias(&mut y, b);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(s: Shape4) -> Tensor4<f64> {
        Tensor4::full(s, 1.0)
    }

    #[test]
    fn all_ones_center_and_corner() {
        let x = ones(Shape4::new(1, 1, 3, 3));
        let w = ones(Shape4::new(1, 1, 3, 3));
        let y = conv2d(&x, &w, None, &ConvAttrs::new(1, 1, 1)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn output_length_formulas() {
        assert_eq!(conv_out_len(320, 3, 1, 1, 1), Some(320));
        assert_eq!(conv_out_len(320, 3, 1, 2, 2), Some(320));
        assert_eq!(conv_out_len(2, 3, 1, 0, 1), None);
        assert_eq!(deconv_out_len(10, 4, 2, 1, 1), Some(20));
        assert_eq!(deconv_out_len(1, 1, 1, 1, 1), None);
    }

    #[test]
    fn channel_mismatch_names_dimensions() {
        let x = ones(Shape4::new(1, 2, 4, 4));
        let w = ones(Shape4::new(1, 3, 3, 3));
        let err = conv2d(&x, &w, None, &ConvAttrs::new(1, 1, 1))
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("2 channels") && err.contains("expects 3"),
            "{err}"
        );
    }

    #[test]
    fn deconv_rejects_empty_output() {
        let x = ones(Shape4::new(1, 1, 1, 1));
        let w = ones(Shape4::new(1, 1, 1, 1));
        assert!(deconv2d(&x, &w, None, &ConvAttrs::new(1, 1, 1)).is_err());
    }

    #[test]
    fn stride_two_deconv_doubles() {
        let x = ones(Shape4::new(1, 2, 5, 7));
        let w = ones(Shape4::new(2, 3, 4, 4));
        let y = deconv2d(&x, &w, None, &ConvAttrs::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 3, 10, 14));
    }
}
