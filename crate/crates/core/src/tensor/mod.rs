//! Dense NCHW tensors and the primitive differentiable operators.
//!
//! Every operator comes as a forward function plus an explicit
//! vector-Jacobian product. There is no tape: composite blocks chain the
//! backward functions by hand.

mod conv;
mod ops;
mod pool;

pub use conv::{
    conv2d, conv2d_backward, conv2d_backward_acc, conv_transpose2d, conv_transpose2d_backward,
    conv_transpose2d_backward_acc, ConvParams, ConvSpec,
};
pub use ops::{
    add, add_backward, concat_channels, mul, mul_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, split_channels,
};
pub use pool::{adaptive_avg_pool2d, adaptive_avg_pool2d_backward, pool_window};

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::Scalar;

/// Extents of a 4-D tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    /// Panics if any extent is zero; use [`Shape4::try_new`] for untrusted input.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::try_new(n, c, h, w).expect("invalid shape")
    }

    pub fn try_new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "shape",
                format!("all extents must be >= 1, got {n}x{c}x{h}x{w}"),
            ));
        }
        n.checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::invalid("shape", "element count overflows usize"))?;
        Ok(Self { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one (h, w) plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous row-major NCHW tensor.
pub struct Tensor<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Shape4, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        instrument::alloc(data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::from_parts(shape, vec![T::zero(); shape.numel()])
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Builds a tensor from a function of (n, c, h, w).
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self::from_parts(shape, data)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Self::from_parts(shape, data)
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

    pub fn into_vec(mut self) -> Vec<T> {
        instrument::free(self.data.len());
        std::mem::take(&mut self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = &self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape("zip_map", self.shape, other.shape)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape, data))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        same_shape("axpy", self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Converts element type, e.g. to run an f32 model through f64 checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape,
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    /// Fails with [`Error::NonFinite`] naming `what` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Selects batch items `[start, start + len)`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.n {
            return Err(Error::invalid(
                "batch_slice",
                format!("range {start}..{} outside batch {}", start + len, self.shape.n),
            ));
        }
        let per = self.shape.numel() / self.shape.n;
        Ok(Self::from_parts(
            Shape4 {
                n: len,
                ..self.shape
            },
            self.data[start * per..(start + len) * per].to_vec(),
        ))
    }

    /// Stacks single- or multi-item tensors along the batch axis.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no tensors"))?
            .shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            expect_same_chw("stack_batch", first, t.shape)?;
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts(Shape4 { n, ..first }, data))
    }
}

/// Validates finiteness at operator boundaries in checked (debug-assertion) builds.
#[inline]
pub(crate) fn check_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if cfg!(debug_assertions) {
        t.ensure_finite(op)
    } else {
        Ok(())
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape, self.data.clone())
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    fn drop(&mut self) {
        instrument::free(self.data.len());
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

pub(crate) fn same_shape(op: &'static str, a: Shape4, b: Shape4) -> Result<()> {
    crate::error::expect_dim(op, "n", a.n, b.n)?;
    expect_same_chw(op, a, b)
}

pub(crate) fn expect_dim_nc(op: &'static str, a: Shape4, b: Shape4) -> Result<()> {
    crate::error::expect_dim(op, "n", a.n, b.n)?;
    crate::error::expect_dim(op, "c", a.c, b.c)
}

pub(crate) fn expect_same_chw(op: &'static str, a: Shape4, b: Shape4) -> Result<()> {
    crate::error::expect_dim(op, "c", a.c, b.c)?;
    crate::error::expect_dim(op, "h", a.h, b.h)?;
    crate::error::expect_dim(op, "w", a.w, b.w)
}

/// Runs `f(index, chunk)` over consecutive chunks, in parallel unless strict
/// mode is on. Each chunk is written by exactly one call, so results do not
/// depend on scheduling.
pub(crate) fn for_each_chunk<T: Scalar>(
    data: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if instrument::is_strict() || data.len() < 4096 {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
