//! Dense 4-D tensors and the differentiable operations the network needs.
//!
//! Values are stored row-major in `(batch, channels, height, width)` order.
//! The pure kernels in [`ops`] work on plain [`Tensor`] values; [`Graph`]
//! records the same kernels on a tape so that gradients can be propagated
//! in reverse.

mod gradcheck;
mod graph;
pub mod ops;
mod param;

use std::fmt;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};

/// Shape of a 4-D tensor: `[batch, channels, height, width]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([b, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn height(&self) -> usize {
        self.0[2]
    }

    pub fn width(&self) -> usize {
        self.0[3]
    }

    /// Number of spatial sites, `height * width`.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, h, w] = self.0;
        write!(f, "({b}, {c}, {h}, {w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A dense 4-D array of `f64` values.
///
/// Every constructor checks that the data length matches the shape and that
/// all values are finite.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without the finiteness scan. The caller guarantees the
    /// length matches.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::from_raw(shape, vec![0.0; shape.numel()])
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor::from_raw(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(Shape::scalar(), vec![value])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [b, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([bi, ci, y, x]));
                    }
                }
            }
        }
        Tensor::from_raw(shape, data)
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

    fn offset(&self, [b, c, y, x]: [usize; 4]) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((b * cs + c) * hs + y) * ws + x
    }

    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::dim("item", format!("expected a scalar, got {}", self.shape)))
        }
    }

    /// Slice holding one `(height, width)` plane.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels() + c) * n;
        &self.data[start..start + n]
    }

    /// Copy of a single batch item as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let per = self.shape.numel() / self.shape.batch();
        let [_, c, h, w] = self.shape.0;
        Tensor::from_raw(
            Shape::new(1, c, h, w),
            self.data[b * per..(b + 1) * per].to_vec(),
        )
    }

    /// Stacks equally shaped `(1, C, H, W)` tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack", "no tensors to stack"))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape || t.shape.batch() != 1 {
                return Err(Error::dim(
                    "stack",
                    format!("expected {} items of batch 1, got {}", first.shape, t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_raw(Shape::new(items.len(), c, h, w), data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "...")?;
        }
        Ok(())
    }
}
