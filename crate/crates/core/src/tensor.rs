//! Dense rank-4 tensors in `(batch, channel, height, width)` layout.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{config_err, Result};

/// Floating point element type of tensors. Implemented for `f32` (training
/// and inference) and `f64` (gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` on row-major strided matrices where
    /// `a` is `m x k`, `b` is `k x n` and `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 fits every scalar type")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand of {len} elements too short for {rows}x{cols} with strides {strides:?}"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                assert!(c.len() >= m * n, "gemm output too short");
                // SAFETY: every operand extent was bounds-checked above and
                // `c` is a distinct exclusive borrow.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `(n, c, h, w)` array.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(config_err!(
                "tensor of shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `(c, h, w)` slab of one batch element.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.f64() * b.f64())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Copy of channels `start..end`.
    pub fn slice_channels(&self, start: usize, end: usize) -> Self {
        let s = self.shape;
        assert!(
            start <= end && end <= s.c,
            "channel range {start}..{end} out of {}",
            s.c
        );
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.n * (end - start) * plane);
        for n in 0..s.n {
            let base = n * s.c * plane;
            out.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Self {
            shape: Shape4::new(s.n, end - start, s.h, s.w),
            data: out,
        }
    }

    /// Copy of batch elements `start..end`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let s = self.shape;
        let len = s.c * s.plane();
        Self {
            shape: Shape4::new(end - start, s.c, s.h, s.w),
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    /// Stack tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| config_err!("cannot stack zero tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(items.len() * s.numel());
        for t in items {
            let ts = t.shape;
            if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
                return Err(config_err!("cannot stack {} with {}", ts, s));
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape.n).sum();
        Ok(Self {
            shape: Shape4::new(n, s.c, s.h, s.w),
            data,
        })
    }

    /// Reverse the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        let mut out = self.clone();
        for row in 0..s.n * s.c * s.h {
            let r = row * s.w;
            out.data[r..r + s.w].reverse();
        }
        out
    }

    /// Top-left `h x w` window.
    pub fn crop(&self, h: usize, w: usize) -> Self {
        let s = self.shape;
        assert!(h <= s.h && w <= s.w);
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for nc in 0..s.n * s.c {
            for y in 0..h {
                let base = (nc * s.h + y) * s.w;
                data.extend_from_slice(&self.data[base..base + w]);
            }
        }
        Self {
            shape: Shape4::new(s.n, s.c, h, w),
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }
}

/// Integer class map of shape `(n, h, w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(config_err!(
                "label map ({n}, {h}, {w}) needs {} entries, got {}",
                n * h * w,
                data.len()
            ));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn sample(&self, n: usize) -> &[u8] {
        let len = self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| config_err!("cannot stack zero label maps"))?;
        let mut data = Vec::new();
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(config_err!(
                    "label maps {}x{} and {}x{} differ",
                    m.h,
                    m.w,
                    first.h,
                    first.w
                ));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Self {
            n: items.iter().map(|m| m.n).sum(),
            h: first.h,
            w: first.w,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.w) {
            row.reverse();
        }
        out
    }

    pub fn crop(&self, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(self.n * h * w);
        for n in 0..self.n {
            for y in 0..h {
                let base = (n * self.h + y) * self.w;
                data.extend_from_slice(&self.data[base..base + w]);
            }
        }
        Self {
            n: self.n,
            h,
            w,
            data,
        }
    }
}
