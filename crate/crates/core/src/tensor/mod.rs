//! Dense NCHW tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value: a [`Shape`] and a row-major `Vec<f64>`.
//! Differentiation happens on a [`Tape`]; values enter it as [`Var`]s,
//! either as tracked leaves or as constants. Every op on a tracked `Var`
//! records a backward rule; ops on constants (or on a tape created with
//! [`Tape::no_grad`]) record nothing, so inference holds no graph.

mod conv;
pub mod fixture;
mod gradcheck;
mod norm;
mod ops;
mod tape;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

pub use conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use norm::{BatchNormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::{concat_channels, pixel_shuffle_tensor, pixel_unshuffle_tensor};
pub use tape::{BackwardFn, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Tensor extents in `(batch, channels, rows, cols)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `h x w` channel plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::scalar()
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|&d| d == 0) {
            return Err(Error::ZeroDim(*self));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
                expected: shape.numel(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels that already sized `data`.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor { shape, data }
    }

    pub fn full(shape: Shape, value: f64) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Result<Self> {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Shape::scalar(), vec![value])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Ok(Tensor { shape, data })
    }

    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `h*w` plane of one channel.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                left: self.shape,
                right: other.shape,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape, data))
    }

    pub fn reshape(self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Samples `[start, start+len)` along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.shape.n {
            return Err(Error::invalid(format!(
                "batch slice {start}..{} out of range for {}",
                start + len,
                self.shape
            )));
        }
        let per = self.shape.c * self.shape.plane();
        let data = self.data[start * per..(start + len) * per].to_vec();
        Ok(Tensor::from_parts(Shape { n: len, ..self.shape }, data))
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch of zero tensors"))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    left: first,
                    right: t.shape,
                });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(Shape { n, ..first }, data))
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if h == 0 || w == 0 || y0 + h > s.h || x0 + w > s.w {
            return Err(Error::invalid(format!("crop {h}x{w} at ({y0},{x0}) does not fit {s}")));
        }
        let out = Shape::new(s.n, s.c, h, w);
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                for y in y0..y0 + h {
                    let row = self.offset(n, c, y, x0);
                    data.extend_from_slice(&self.data[row..row + w]);
                }
            }
        }
        Ok(Tensor::from_parts(out, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(matches!(Tensor::zeros(Shape::new(1, 0, 2, 2)), Err(Error::ZeroDim(_))));
        assert!(matches!(
            Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]),
            Err(Error::DataLength { expected: 4, .. })
        ));
    }

    #[test]
    fn offsets_are_row_major_nchw() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        })
        .unwrap();
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.offset(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.plane(1, 1)[0], 1100.0);
    }

    #[test]
    fn crop_and_batch_slice() {
        let t = Tensor::from_fn(Shape::new(2, 1, 4, 4), |n, _, y, x| (n * 16 + y * 4 + x) as f64).unwrap();
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]);
        let b = t.batch_slice(1, 1).unwrap();
        assert_eq!(b.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(b.at(0, 0, 0, 0), 16.0);
        assert!(t.crop(3, 3, 2, 2).is_err());
        let s = Tensor::stack_batch(&[&b, &b]).unwrap();
        assert_eq!(s.shape().n, 2);
    }
}
