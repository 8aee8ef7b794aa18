//! Dense row-major tensors.
//!
//! Image-like tensors are channel-last: a single image is `[h, w, c]` and a
//! batch is `[n, h, w, c]`. There is no broadcasting and no strided view; every
//! tensor owns a contiguous buffer whose length equals its element count.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point width a tensor is stored in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    /// 32-bit, used for training and inference.
    Standard,
    /// 64-bit, used when checking gradients against finite differences.
    Verify,
}

/// Element type of a [`Tensor`]. Implemented for `f32` and `f64` only.
pub trait Scalar: Float + NumAssign + Default + Send + Sync + fmt::Debug + fmt::Display + Sum + 'static {
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Standard;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Verify;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dimensions of a tensor. Every dimension is at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape must have at least one dimension"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("dimension {pos} of {dims:?} is zero")));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// This shape with a leading batch dimension.
    pub fn with_batch(&self, n: usize) -> Result<Shape> {
        let mut dims = Vec::with_capacity(self.0.len() + 1);
        dims.push(n);
        dims.extend_from_slice(&self.0);
        Shape::new(dims)
    }

    /// This shape with its leading dimension removed.
    pub fn without_batch(&self) -> Result<Shape> {
        if self.0.len() < 2 {
            return Err(Error::shape(format!("shape {self} has no per-sample dimensions")));
        }
        Shape::new(self.0[1..].to_vec())
    }

    /// Renders as `(None, d0, d1, ...)` with the batch slot left open.
    pub fn batch_notation(&self) -> String {
        let mut s = String::from("(None");
        for d in &self.0 {
            s.push_str(", ");
            s.push_str(&d.to_string());
        }
        s.push(')');
        s
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, fill: T) -> Self {
        let data = vec![fill; shape.numel()];
        Tensor { shape, data }
    }

    pub fn full(dims: &[usize], fill: T) -> Result<Self> {
        Ok(Self::new(Shape::new(dims.to_vec())?, fill))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        Self::from_shape_vec(Shape::new(dims.to_vec())?, data)
    }

    pub fn from_shape_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
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

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_shape_vec(shape, self.data)
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("{op} produced a non-finite value")))
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .ensure_finite("map")
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {} and {} differ",
                self.shape, other.shape
            )));
        }
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
        .ensure_finite(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign: shapes {} and {} differ",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    fn reduce_axis(&self, axis: usize, init: T, f: impl Fn(T, T) -> T) -> Result<Self> {
        let dims = self.shape.dims();
        if axis >= dims.len() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {}",
                self.shape
            )));
        }
        let outer: usize = dims[..axis].iter().product();
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            let block = &self.data[o * len * inner..(o + 1) * len * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for row in block.chunks_exact(inner) {
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = f(*d, v);
                }
            }
        }
        let mut out_dims: Vec<usize> = dims[..axis].to_vec();
        out_dims.extend_from_slice(&dims[axis + 1..]);
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        Tensor::from_vec(&out_dims, out)?.ensure_finite("reduce")
    }

    /// Sums along `axis`, dropping it from the shape.
    pub fn reduce_sum(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, T::zero(), |a, b| a + b)
    }

    /// Maximum along `axis`, dropping it from the shape.
    pub fn reduce_max(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.dims() {
            &[r, c] => Ok((r, c)),
            d => Err(Error::shape(format!("{what} must be rank 2, got {d:?}"))),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.data, &other.data, &mut out, k, n);
        Tensor::from_vec(&[m, n], out)?.ensure_finite("matmul")
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.as_matrix("transpose input")?;
        let mut out = vec![T::zero(); r * c];
        transpose_into(&self.data, &mut out, r, c);
        Tensor::from_vec(&[c, r], out)
    }
}

/// Output extent of a valid (unpadded) sliding window.
pub fn window_output_len(input: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || input < window {
        None
    } else {
        Some((input - window) / stride + 1)
    }
}

/// Unfolds every receptive field of a `[h, w, c]` image into one matrix row.
///
/// The result is `[out_h * out_w, kh * kw * c]`; row `r` is output pixel `r`
/// in row-major order, and its columns run over `(kh, kw, c)`.
pub fn im2col<T: Scalar>(input: &Tensor<T>, window: [usize; 2], stride: usize) -> Result<Tensor<T>> {
    let &[h, w, c] = input.dims() else {
        return Err(Error::shape(format!("im2col expects [h, w, c], got {}", input.shape())));
    };
    let geom = ConvGeometry::new(h, w, c, window, stride)?;
    let mut out = vec![T::zero(); geom.patches() * geom.patch_len()];
    geom.im2col(input.data(), &mut out);
    Tensor::from_vec(&[geom.patches(), geom.patch_len()], out)
}

/// Sizes of one image passing through a valid sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, c: usize, window: [usize; 2], stride: usize) -> Result<Self> {
        let [kh, kw] = window;
        match (window_output_len(h, kh, stride), window_output_len(w, kw, stride)) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeometry {
                h,
                w,
                c,
                kh,
                kw,
                stride,
                out_h,
                out_w,
            }),
            _ => Err(Error::shape(format!(
                "window {kh}x{kw} (stride {stride}) does not fit input {h}x{w}"
            ))),
        }
    }

    pub fn patches(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let row_span = self.kw * self.c;
        let mut rows = cols.chunks_exact_mut(self.patch_len());
        for oi in 0..self.out_h {
            for oj in 0..self.out_w {
                let row = rows.next().expect("cols sized by geometry");
                for di in 0..self.kh {
                    let src = ((oi * self.stride + di) * self.w + oj * self.stride) * self.c;
                    row[di * row_span..(di + 1) * row_span].copy_from_slice(&x[src..src + row_span]);
                }
            }
        }
    }

    /// Scatter-adds patch rows back onto the image they were unfolded from.
    pub fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let row_span = self.kw * self.c;
        let mut rows = cols.chunks_exact(self.patch_len());
        for oi in 0..self.out_h {
            for oj in 0..self.out_w {
                let row = rows.next().expect("cols sized by geometry");
                for di in 0..self.kh {
                    let dst = ((oi * self.stride + di) * self.w + oj * self.stride) * self.c;
                    for (d, &s) in x[dst..dst + row_span]
                        .iter_mut()
                        .zip(&row[di * row_span..(di + 1) * row_span])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k,n] += a[p,k]^T * b[p,n]`, all row-major.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_into<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}
