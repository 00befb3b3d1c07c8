//! Dense rank-4 tensors in NCHW layout.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Batch, channel, height and width extents of a [`Tensor4`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
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

    pub const fn is_valid(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Same shape with a different channel count.
    pub const fn with_channels(&self, c: usize) -> Self {
        Shape::new(self.n, c, self.h, self.w)
    }

    pub const fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::Height => self.h,
            Axis::Width => self.w,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Spatial axis of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Axis {
    Height,
    Width,
}

/// Dense `f64` tensor of shape `(n, c, h, w)`, row-major, with an optional
/// gradient buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::InvalidShape(shape));
        }
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    pub fn full(shape: Shape, value: f64) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::InvalidShape(shape));
        }
        Ok(Tensor4 {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor4 {
            shape: Shape::scalar(),
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::InvalidShape(shape));
        }
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
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor4 {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor4::from_parts(self.shape, vec![0.0; self.data.len()])
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

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = value;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::DataLength {
                shape: self.shape,
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Cyclic shift along a spatial axis: `out[.., i] = in[.., (i - shift) mod len]`.
    pub fn roll(&self, shift: isize, axis: Axis) -> Tensor4 {
        Tensor4::from_parts(self.shape, crate::kernels::roll(self.shape, &self.data, shift, axis))
    }

    /// Largest absolute elementwise difference to `other`; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor4) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0_f64, |m, (a, b)| m.max(libm::fabs(a - b))),
        )
    }
}
