//! Dense NCHW tensors and the forward/backward kernels used by the detector.
//!
//! Storage is `f32`; reductions that feed normalization or probabilities
//! (batch-norm statistics, softmax denominators) accumulate in `f64`.

mod batchnorm;
mod conv;
mod element;
mod ops;
mod pool;
#[cfg(test)]
pub(crate) mod testutil;

pub use batchnorm::{batchnorm, batchnorm_backward, batchnorm_infer, BatchNormCache, BatchNormParams, BnMode};
pub use batchnorm::{BN_EPSILON, BN_MOMENTUM};
pub(crate) use conv::conv2d_backward_impl;
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvLayerParams, Padding};
pub use element::Element;
pub use ops::{
    concat_channels, relu, relu_backward, softmax_channels, split_channels, upsample_nearest, upsample_nearest_backward,
};
pub use pool::{maxpool2x2, maxpool2x2_backward, PoolIndices};

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a 4-D tensor in (batch, channels, rows, cols) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of values in one (h, w) plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Flat offset of element (n, c, y, x).
    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        check_dims(shape)?;
        Ok(Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "Tensor4::from_vec",
                format!("{} values supplied for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Tensor of the same shape as `self` with every value zero.
    pub fn zeros_like(&self) -> Self {
        Tensor4 {
            shape: self.shape,
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> Shape {
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

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = value;
    }

    /// The (h, w) plane of channel `c` in batch item `n`.
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

    /// All channels of batch item `n`, contiguous.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copy of batch item `n` as a single-item tensor.
    pub fn slice_item(&self, n: usize) -> Tensor4<T> {
        Tensor4 {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.item(n).to_vec(),
        }
    }

    /// Stacks equally shaped single-or-multi item tensors along the batch axis.
    pub fn stack(items: &[Tensor4<T>]) -> Result<Tensor4<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::param("cannot stack an empty tensor list"))?
            .shape;
        let mut n = 0;
        let mut data = Vec::new();
        for (i, t) in items.iter().enumerate() {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::shape(
                    "Tensor4::stack",
                    format!("item {i} has shape {s}, expected ?x{}x{}x{}", first.c, first.h, first.w),
                ));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Tensor4::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor4::add_assign",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}

fn check_dims(shape: Shape) -> Result<()> {
    if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
        return Err(Error::shape(
            "Tensor4",
            format!("all dimensions must be >= 1, got {shape}"),
        ));
    }
    Ok(())
}
