//! Dense row-major arrays and the scalar types they can hold.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Training runs in `f32`; gradient checks run
/// the same code in `f64`.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a @ b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing matrices of
    /// the given dimensions (see `matrixmultiply::sgemm`).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Branch-free scan of the exponent bits.
    fn all_finite(xs: &[Self]) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn all_finite(xs: &[f32]) -> bool {
        const EXP: u32 = 0x7f80_0000;
        xs.iter().fold(0u32, |bad, x| bad | u32::from(x.to_bits() & EXP == EXP)) == 0
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn all_finite(xs: &[f64]) -> bool {
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        xs.iter().fold(0u64, |bad, x| bad | u64::from(x.to_bits() & EXP == EXP)) == 0
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides of a contiguous array with the given shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[derive(Clone, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for NdArray<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("NdArray")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> NdArray<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "from_vec",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(NdArray { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "dimensions must be positive, got {shape:?}"
        );
        let n = numel(&shape);
        NdArray {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        NdArray {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Self::zeros([n, n]);
        for i in 0..n {
            a.data[i * n + i] = T::one();
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        T::all_finite(&self.data)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Argmax along `axis`, dropping that axis. Ties resolve to the lowest index.
    pub fn argmax(&self, axis: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if axis >= self.ndim() {
            return Err(Error::shape(
                "argmax",
                format!("axis {axis} out of range for {:?}", self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut best_val = self.data[base];
                for c in 1..len {
                    let v = self.data[base + c * inner];
                    if v > best_val {
                        best = c;
                        best_val = v;
                    }
                }
                out.push(best);
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        Ok((shape, out))
    }

    /// Stack equally shaped arrays along a new leading axis.
    pub fn stack(items: &[&NdArray<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no arrays to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for a in items {
            if a.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", a.shape, first.shape),
                ));
            }
            data.extend_from_slice(&a.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(NdArray { shape, data })
    }

    /// The `i`-th slice along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.ndim() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        NdArray {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }
}

/// One-hot encode class indices into `[len, classes]`.
pub fn one_hot<T: Scalar>(indices: &[usize], classes: usize) -> Result<NdArray<T>> {
    let mut out = NdArray::zeros([indices.len().max(1), classes]);
    for (row, &c) in indices.iter().enumerate() {
        if c >= classes {
            return Err(Error::LabelOutOfRange { label: c, classes });
        }
        out.data[row * classes + c] = T::one();
    }
    Ok(out)
}

/// Forward-only bilinear resize of `[.., H, W]` (align-corners = false).
pub fn resize_bilinear<T: Scalar>(x: &NdArray<T>, out_h: usize, out_w: usize) -> Result<NdArray<T>> {
    let taps = BilinearTaps::new(x.shape(), out_h, out_w)?;
    let mut out = vec![T::zero(); taps.planes * out_h * out_w];
    taps.forward(x.data(), &mut out);
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = out_h;
    shape[n - 1] = out_w;
    NdArray::from_vec(shape, out)
}

/// Source coordinate taps for align-corners = false bilinear interpolation.
#[derive(Clone, Debug)]
pub(crate) struct BilinearTaps {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

impl BilinearTaps {
    pub fn new(shape: &[usize], out_h: usize, out_w: usize) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::shape("bilinear_resize", format!("need [.., H, W], got {shape:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "output dimensions must be positive"));
        }
        let n = shape.len();
        let (in_h, in_w) = (shape[n - 2], shape[n - 1]);
        Ok(BilinearTaps {
            planes: shape[..n - 2].iter().product(),
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        })
    }

    pub fn forward<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        if ih == oh && iw == ow {
            out.copy_from_slice(x);
            return;
        }
        for p in 0..self.planes {
            let src = &x[p * ih * iw..(p + 1) * ih * iw];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                let fy = T::from_f64(fy);
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let top = src[y0 * iw + x0] * (T::one() - fx) + src[y0 * iw + x1] * fx;
                    let bot = src[y1 * iw + x0] * (T::one() - fx) + src[y1 * iw + x1] * fx;
                    dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }

    /// Scatter output gradients back onto the input grid (transpose of `forward`).
    pub fn backward<T: Scalar>(&self, dout: &[T], dx: &mut [T]) {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        if ih == oh && iw == ow {
            for (d, &g) in dx.iter_mut().zip(dout) {
                *d = *d + g;
            }
            return;
        }
        for p in 0..self.planes {
            let src = &dout[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut dx[p * ih * iw..(p + 1) * ih * iw];
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                let fy = T::from_f64(fy);
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let g = src[oy * ow + ox];
                    let gt = g * (T::one() - fy);
                    let gb = g * fy;
                    dst[y0 * iw + x0] = dst[y0 * iw + x0] + gt * (T::one() - fx);
                    dst[y0 * iw + x1] = dst[y0 * iw + x1] + gt * fx;
                    dst[y1 * iw + x0] = dst[y1 * iw + x0] + gb * (T::one() - fx);
                    dst[y1 * iw + x1] = dst[y1 * iw + x1] + gb * fx;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(NdArray::<f32>::from_vec([2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::<f32>::from_vec([0, 3], vec![]).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let a = NdArray::<f64>::from_vec([3, 2], vec![1.0, 5.0, 1.0, 5.0, 0.0, 5.0]).unwrap();
        let (shape, idx) = a.argmax(0).unwrap();
        assert_eq!(shape, vec![2]);
        assert_eq!(idx, vec![0, 0]);
    }

    #[test]
    fn one_hot_rows() {
        let m = one_hot::<f32>(&[2, 0], 3).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(one_hot::<f32>(&[3], 3).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = NdArray::<f64>::from_vec([1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(resize_bilinear(&x, 2, 3).unwrap(), x);
        let c = NdArray::<f64>::full([2, 3, 3], 0.25);
        let r = resize_bilinear(&c, 5, 7).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(resize_bilinear(&c, 0, 7).is_err());
    }

    #[test]
    fn resize_matches_hand_evaluated_interpolation() {
        // Columns map to source x = (o + 0.5) * 0.5 - 0.5, clamped at 0:
        // o=0 -> 0 (clamped), o=1 -> 0.25, o=2 -> 0.75, o=3 -> 1.25 (clamped to col 1).
        let x = NdArray::<f64>::from_vec([1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_bilinear(&x, 2, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }
}
