//! Bilinear resampling with half-pixel centers (align-corners off).

use crate::tensor::{Scalar, Shape4, Tensor4};

/// Per-axis interpolation table: each output coordinate blends source
/// positions `lo` and `hi` with weight `frac` on `hi`.
#[derive(Debug, Clone)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTable {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut t = AxisTable {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(if lo == in_len - 1 {
                0.0
            } else {
                src - lo as f64
            });
        }
        t
    }
}

/// Resize the spatial dims of `x` to `out_h x out_w`.
pub fn bilinear_resize<T: Scalar>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Tensor4<T> {
    let xs = x.shape();
    assert!(
        out_h >= 1 && out_w >= 1 && xs.h >= 1 && xs.w >= 1,
        "resize to empty size"
    );
    let ys = Shape4::new(xs.n, xs.c, out_h, out_w);
    if (out_h, out_w) == (xs.h, xs.w) {
        return x.clone();
    }
    let (ty, tx) = (AxisTable::new(xs.h, out_h), AxisTable::new(xs.w, out_w));
    let mut y = Tensor4::zeros(ys);
    let (src_plane, dst_plane) = (xs.plane(), ys.plane());
    for (src, dst) in x
        .data()
        .chunks(src_plane)
        .zip(y.data_mut().chunks_mut(dst_plane))
    {
        for oy in 0..out_h {
            let fy = T::of(ty.frac[oy]);
            let (r0, r1) = (ty.lo[oy] * xs.w, ty.hi[oy] * xs.w);
            for ox in 0..out_w {
                let fx = T::of(tx.frac[ox]);
                let (c0, c1) = (tx.lo[ox], tx.hi[ox]);
                let top = src[r0 + c0] * (T::one() - fx) + src[r0 + c1] * fx;
                let bottom = src[r1 + c0] * (T::one() - fx) + src[r1 + c1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bottom * fy;
            }
        }
    }
    y
}

/// Transpose of [`bilinear_resize`] applied to an output gradient.
pub fn bilinear_resize_backward<T: Scalar>(input: Shape4, gy: &Tensor4<T>) -> Tensor4<T> {
    let ys = gy.shape();
    if (ys.h, ys.w) == (input.h, input.w) {
        return gy.clone();
    }
    let (ty, tx) = (AxisTable::new(input.h, ys.h), AxisTable::new(input.w, ys.w));
    let mut gx = Tensor4::zeros(input);
    let (src_plane, dst_plane) = (input.plane(), ys.plane());
    for (gsrc, gdst) in gx
        .data_mut()
        .chunks_mut(src_plane)
        .zip(gy.data().chunks(dst_plane))
    {
        for oy in 0..ys.h {
            let fy = T::of(ty.frac[oy]);
            let (r0, r1) = (ty.lo[oy] * input.w, ty.hi[oy] * input.w);
            for ox in 0..ys.w {
                let fx = T::of(tx.frac[ox]);
                let (c0, c1) = (tx.lo[ox], tx.hi[ox]);
                let g = gdst[oy * ys.w + ox];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                gsrc[r0 + c0] += gt * (T::one() - fx);
                gsrc[r0 + c1] += gt * fx;
                gsrc[r1 + c0] += gb * (T::one() - fx);
                gsrc[r1 + c1] += gb * fx;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor4::<f32>::full(Shape4::new(1, 2, 8, 8), 7.0);
        let y = bilinear_resize(&x, 32, 32);
        assert_eq!(y.shape(), Shape4::new(1, 2, 32, 32));
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn upsample_interpolates_between_centers() {
        let x = Tensor4::<f64>::from_vec(Shape4::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }
}
