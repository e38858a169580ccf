//! Dense rank-1..4 arrays and the handful of kernels the network needs.
//!
//! Storage is generic over [`Real`] so the same layer code runs in `f32` for
//! training and in `f64` for finite-difference checks. Every reduction is
//! accumulated in `f64` and rounded once on store.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use crate::kernels::{gemm, transpose};
use crate::error::{shape_err, Error, Result};

/// Floating-point storage type of a [`Tensor`].
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Tensor of `shape` with every element set to `value`.
    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::default())
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            acc * e + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Spatial extents and channel count of a rank-3 `(h, w, c)` tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => shape_err(format!("expected rank-3 (h, w, c), got {:?}", self.shape)),
        }
    }
}

/// `acc += alpha * x`.
#[inline]
pub(crate) fn axpy<T: Real>(acc: &mut [f64], alpha: f64, x: &[T]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v.to_f64();
    }
}

pub(crate) fn round_vec<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match a.shape[..] {
        [m, k] => (m, k),
        _ => return shape_err(format!("matmul lhs must be rank 2, got {:?}", a.shape)),
    };
    let (k2, n) = match b.shape[..] {
        [k2, n] => (k2, n),
        _ => return shape_err(format!("matmul rhs must be rank 2, got {:?}", b.shape)),
    };
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a.data[i * k + p].to_f64(), &b.data[p * n..(p + 1) * n]);
        }
    }
    Tensor::new(&[m, n], round_vec(&out))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Clip01,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

pub fn unary<T: Real>(t: &Tensor<T>, op: UnaryOp) -> Tensor<T> {
    let f = |v: f64| match op {
        UnaryOp::Sigmoid => sigmoid(v),
        UnaryOp::Tanh => v.tanh(),
        UnaryOp::Clip01 => clip01(v),
        UnaryOp::Scale(s) => s * v,
    };
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|v| T::from_f64(f(v.to_f64()))).collect(),
    }
}

pub fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return shape_err(format!("{op:?} of {:?} and {:?}", a.shape, b.shape));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            T::from_f64(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            })
        })
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Direction in which a square feature tensor is cut into planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Rows `X[t, :, :]`, swept top to bottom.
    Horizontal,
    /// Columns `X[:, t, :]`, swept left to right.
    Vertical,
}

fn square_hwc<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    let (h, w, c) = t.hwc()?;
    if h != w {
        return shape_err(format!("plane split needs square extent, got {h}x{w}"));
    }
    Ok((h, c))
}

/// Flattened plane `t` of a square `(n, n, c)` tensor, laid out as `(n, c)`.
pub(crate) fn plane_into<T: Real>(src: &[T], n: usize, c: usize, axis: Axis, t: usize, out: &mut [T]) {
    match axis {
        Axis::Horizontal => out.copy_from_slice(&src[t * n * c..(t + 1) * n * c]),
        Axis::Vertical => {
            for y in 0..n {
                let s = (y * n + t) * c;
                out[y * c..(y + 1) * c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
}

/// Writes an `(n, c)` plane back into position `t` of an `(n, n, c)` buffer.
pub(crate) fn scatter_plane<T: Copy>(dst: &mut [T], n: usize, c: usize, axis: Axis, t: usize, plane: &[T]) {
    match axis {
        Axis::Horizontal => dst[t * n * c..(t + 1) * n * c].copy_from_slice(plane),
        Axis::Vertical => {
            for y in 0..n {
                let d = (y * n + t) * c;
                dst[d..d + c].copy_from_slice(&plane[y * c..(y + 1) * c]);
            }
        }
    }
}

pub fn split_planes<T: Real>(t: &Tensor<T>, axis: Axis) -> Result<Vec<Tensor<T>>> {
    let (n, c) = square_hwc(t)?;
    let mut buf = vec![T::default(); n * c];
    (0..n)
        .map(|i| {
            plane_into(&t.data, n, c, axis, i, &mut buf);
            Tensor::new(&[n, c], buf.clone())
        })
        .collect()
}

pub fn concat_planes<T: Real>(planes: &[Tensor<T>], axis: Axis) -> Result<Tensor<T>> {
    let n = planes.len();
    if n == 0 {
        return shape_err("cannot concatenate zero planes");
    }
    let c = match planes[0].shape[..] {
        [m, c] if m == n => c,
        _ => return shape_err(format!("plane shape {:?} for {n} planes", planes[0].shape)),
    };
    let mut data = vec![T::default(); n * n * c];
    for (i, p) in planes.iter().enumerate() {
        if p.shape != [n, c] {
            return shape_err(format!("plane {i} has shape {:?}", p.shape));
        }
        scatter_plane(&mut data, n, c, axis, i, &p.data);
    }
    Tensor::new(&[n, n, c], data)
}

/// Channel-wise concatenation of two `(h, w, ·)` tensors.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, ca) = a.hwc()?;
    let (h2, w2, cb) = b.hwc()?;
    if (h, w) != (h2, w2) {
        return shape_err(format!("channel concat of {:?} and {:?}", a.shape, b.shape));
    }
    let mut data = Vec::with_capacity(h * w * (ca + cb));
    for p in 0..h * w {
        data.extend_from_slice(&a.data[p * ca..(p + 1) * ca]);
        data.extend_from_slice(&b.data[p * cb..(p + 1) * cb]);
    }
    Tensor::new(&[h, w, ca + cb], data)
}

/// Inverse of [`concat_channels`]: first `ca` channels, then the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = t.hwc()?;
    if ca == 0 || ca >= c {
        return shape_err(format!("cannot split {c} channels at {ca}"));
    }
    let cb = c - ca;
    let mut a = Vec::with_capacity(h * w * ca);
    let mut b = Vec::with_capacity(h * w * cb);
    for p in 0..h * w {
        a.extend_from_slice(&t.data[p * c..p * c + ca]);
        b.extend_from_slice(&t.data[p * c + ca..(p + 1) * c]);
    }
    Ok((Tensor::new(&[h, w, ca], a)?, Tensor::new(&[h, w, cb], b)?))
}

/// Geometry of a 2-D cross-correlation over `(h, w, c)` tensors.
///
/// Weights are `(out_channels, kernel_h, kernel_w, in_channels)`; bias is
/// `(out_channels)`. Padding is zero padding on all four sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Square kernel `k` with "same" padding `k / 2`.
    pub fn same(k: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: k / 2,
            in_channels,
            out_channels,
        }
    }

    pub fn strided(k: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            stride,
            ..Self::same(k, in_channels, out_channels)
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.kernel_h, self.kernel_w, self.in_channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Usage(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return shape_err(format!(
                "kernel {kernel} larger than padded input {padded}"
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_extent(h, self.kernel_h)?, self.out_extent(w, self.kernel_w)?))
    }

    /// Output extent of the transposed (adjoint) convolution.
    pub fn transposed_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ext = |i: usize, k: usize| {
            ((i - 1) * self.stride + k)
                .checked_sub(2 * self.padding)
                .filter(|&e| e >= 1)
                .ok_or_else(|| Error::Shape(format!("transposed conv collapses {i} with {self:?}")))
        };
        Ok((ext(h, self.kernel_h)?, ext(w, self.kernel_w)?))
    }
}

fn check_conv_operands<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    spec.validate()?;
    let (h, w, c) = input.hwc()?;
    if c != spec.in_channels {
        return shape_err(format!("conv input has {c} channels, spec wants {}", spec.in_channels));
    }
    if weights.shape != spec.weight_shape() {
        return shape_err(format!(
            "conv weights {:?}, spec wants {:?}",
            weights.shape,
            spec.weight_shape()
        ));
    }
    Ok((h, w))
}

/// Iterates the valid `(input_offset, kernel_y, kernel_x)` taps of one output pixel.
#[inline]
fn for_each_tap(
    spec: &ConvSpec,
    (h, w): (usize, usize),
    oy: usize,
    ox: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let base_y = (oy * spec.stride) as isize - spec.padding as isize;
    let base_x = (ox * spec.stride) as isize - spec.padding as isize;
    for ky in 0..spec.kernel_h {
        let iy = base_y + ky as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..spec.kernel_w {
            let ix = base_x + kx as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            f(iy as usize * w + ix as usize, ky, kx);
        }
    }
}

/// Patch matrix `(oh * ow, kh * kw * cin)`; padded taps stay zero.
fn im2col<T: Real>(input: &[T], in_hw: (usize, usize), spec: &ConvSpec, out_hw: (usize, usize)) -> Vec<T> {
    let ci = spec.in_channels;
    let k = spec.kernel_h * spec.kernel_w * ci;
    let mut cols = vec![T::default(); out_hw.0 * out_hw.1 * k];
    for oy in 0..out_hw.0 {
        for ox in 0..out_hw.1 {
            let row = &mut cols[(oy * out_hw.1 + ox) * k..][..k];
            for_each_tap(spec, in_hw, oy, ox, |ip, ky, kx| {
                let dst = &mut row[(ky * spec.kernel_w + kx) * ci..][..ci];
                dst.copy_from_slice(&input[ip * ci..(ip + 1) * ci]);
            });
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the `(h, w, cin)` input.
fn col2im<T: Real>(cols: &[T], in_hw: (usize, usize), spec: &ConvSpec, out_hw: (usize, usize)) -> Vec<f64> {
    let ci = spec.in_channels;
    let k = spec.kernel_h * spec.kernel_w * ci;
    let mut out = vec![0.0f64; in_hw.0 * in_hw.1 * ci];
    for oy in 0..out_hw.0 {
        for ox in 0..out_hw.1 {
            let row = &cols[(oy * out_hw.1 + ox) * k..][..k];
            for_each_tap(spec, in_hw, oy, ox, |ip, ky, kx| {
                axpy(&mut out[ip * ci..(ip + 1) * ci], 1.0, &row[(ky * spec.kernel_w + kx) * ci..][..ci]);
            });
        }
    }
    out
}

/// Plain correlation sums (no bias) of `input` into an `(oh, ow, cout)` f64 buffer.
fn correlate<T: Real>(
    input: &[T],
    in_hw: (usize, usize),
    weights: &[T],
    spec: &ConvSpec,
    out_hw: (usize, usize),
) -> Vec<f64> {
    let co = spec.out_channels;
    let k = spec.kernel_h * spec.kernel_w * spec.in_channels;
    let pixels = out_hw.0 * out_hw.1;
    let cols = im2col(input, in_hw, spec, out_hw);
    let wt = transpose(weights, co, k);
    let mut out = vec![T::default(); pixels * co];
    gemm(pixels, co, k, &cols, &wt, &mut out);
    out.into_iter().map(|v| v.to_f64()).collect()
}

/// Adjoint of [`correlate`]: spreads `(oh, ow, cout)` values back onto `(h, w, cin)`.
fn correlate_adjoint<T: Real>(
    grad: &[T],
    out_hw: (usize, usize),
    weights: &[T],
    spec: &ConvSpec,
    in_hw: (usize, usize),
) -> Vec<f64> {
    let co = spec.out_channels;
    let k = spec.kernel_h * spec.kernel_w * spec.in_channels;
    let pixels = out_hw.0 * out_hw.1;
    let mut cols = vec![T::default(); pixels * k];
    gemm(pixels, k, co, grad, weights, &mut cols);
    col2im(&cols, in_hw, spec, out_hw)
}

/// Weight gradient of [`correlate`] given the input and the output-side gradient.
fn correlate_weight_grad<T: Real>(
    input: &[T],
    in_hw: (usize, usize),
    grad: &[T],
    spec: &ConvSpec,
    out_hw: (usize, usize),
) -> Vec<f64> {
    let co = spec.out_channels;
    let k = spec.kernel_h * spec.kernel_w * spec.in_channels;
    let pixels = out_hw.0 * out_hw.1;
    let cols = im2col(input, in_hw, spec, out_hw);
    let gt = transpose(grad, pixels, co);
    let mut gw = vec![T::default(); co * k];
    gemm(co, k, pixels, &gt, &cols, &mut gw);
    gw.into_iter().map(|v| v.to_f64()).collect()
}

fn check_bias<T: Real>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape != [channels] {
        return shape_err(format!("bias {:?}, expected [{channels}]", bias.shape));
    }
    Ok(())
}

fn channel_sums<T: Real>(grad: &[T], c: usize) -> Vec<f64> {
    let mut sums = vec![0.0; c];
    for px in grad.chunks_exact(c) {
        axpy(&mut sums, 1.0, px);
    }
    sums
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let in_hw = check_conv_operands(input, weights, spec)?;
    check_bias(bias, spec.out_channels)?;
    let out_hw = spec.output_hw(in_hw.0, in_hw.1)?;
    let mut acc = correlate(&input.data, in_hw, &weights.data, spec, out_hw);
    for px in acc.chunks_exact_mut(spec.out_channels) {
        for (a, b) in px.iter_mut().zip(&bias.data) {
            *a += b.to_f64();
        }
    }
    Tensor::new(&[out_hw.0, out_hw.1, spec.out_channels], round_vec(&acc))
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<f64>,
    pub bias: Tensor<f64>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let in_hw = check_conv_operands(input, weights, spec)?;
    let out_hw = spec.output_hw(in_hw.0, in_hw.1)?;
    if grad_out.shape != [out_hw.0, out_hw.1, spec.out_channels] {
        return shape_err(format!(
            "grad_out {:?}, forward output is {:?}",
            grad_out.shape,
            [out_hw.0, out_hw.1, spec.out_channels]
        ));
    }
    let gi = correlate_adjoint(&grad_out.data, out_hw, &weights.data, spec, in_hw);
    let gw = correlate_weight_grad(&input.data, in_hw, &grad_out.data, spec, out_hw);
    let gb = channel_sums(&grad_out.data, spec.out_channels);
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), round_vec(&gi))?,
        weights: Tensor::new(&spec.weight_shape(), gw)?,
        bias: Tensor::new(&[spec.out_channels], gb)?,
    })
}

/// Transposed convolution: the adjoint of [`conv2d_forward`] plus a bias.
///
/// `spec` describes the adjoint direction, so the layer maps
/// `(h, w, spec.out_channels)` to `(h', w', spec.in_channels)` and the weights
/// keep the `(spec.out_channels, kh, kw, spec.in_channels)` layout.
pub fn conv_transpose2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (h, w, c) = input.hwc()?;
    if c != spec.out_channels || weights.shape != spec.weight_shape() {
        return shape_err(format!(
            "transposed conv input {:?} / weights {:?} vs {spec:?}",
            input.shape, weights.shape
        ));
    }
    check_bias(bias, spec.in_channels)?;
    let out_hw = spec.transposed_output_hw(h, w)?;
    if spec.output_hw(out_hw.0, out_hw.1)? != (h, w) {
        return shape_err(format!("transposed conv {spec:?} is not invertible at {h}x{w}"));
    }
    let mut acc = correlate_adjoint(&input.data, (h, w), &weights.data, spec, out_hw);
    for px in acc.chunks_exact_mut(spec.in_channels) {
        for (a, b) in px.iter_mut().zip(&bias.data) {
            *a += b.to_f64();
        }
    }
    Tensor::new(&[out_hw.0, out_hw.1, spec.in_channels], round_vec(&acc))
}

pub fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (h, w, _) = input.hwc()?;
    let out_hw = spec.transposed_output_hw(h, w)?;
    if grad_out.shape != [out_hw.0, out_hw.1, spec.in_channels] {
        return shape_err(format!("transposed conv grad_out {:?}", grad_out.shape));
    }
    let gi = correlate(&grad_out.data, out_hw, &weights.data, spec, (h, w));
    let gw = correlate_weight_grad(&grad_out.data, out_hw, &input.data, spec, (h, w));
    let gb = channel_sums(&grad_out.data, spec.in_channels);
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), round_vec(&gi))?,
        weights: Tensor::new(&spec.weight_shape(), gw)?,
        bias: Tensor::new(&[spec.in_channels], gb)?,
    })
}
