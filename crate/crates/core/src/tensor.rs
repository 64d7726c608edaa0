//! Dense rank-4 NCHW tensors.
//!
//! Every activation, image and gradient in the crate is a [`Tensor`]: a
//! contiguous `Vec<f32>` in batch, channel, row, column order. There are no
//! strides or views; crops and reshapes copy.

use std::fmt;

use crate::error::{Error, Result};

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

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of elements in a single `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Flat offset of `(n, c, h, w)`.
    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Inverse of [`Shape::index`].
    pub const fn unravel(&self, idx: usize) -> (usize, usize, usize, usize) {
        let w = idx % self.w;
        let rest = idx / self.w;
        let h = rest % self.h;
        let rest = rest / self.h;
        let c = rest % self.c;
        (rest / self.c, c, h, w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape { n, c, h, w }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Filled tensor. Zero-sized shapes are rejected.
    pub fn full(shape: impl Into<Shape>, value: f32) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() == 0 {
            return Err(Error::InvalidShape {
                shape,
                reason: "element count must be positive".into(),
            });
        }
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    /// Zero tensor; zero-sized shapes are allowed here.
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data length {} != element count {}", data.len(), shape.numel()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Contiguous `(h, w)` plane for batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Copy of batch items `start..start + count`.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape.n || count == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch slice {start}..{} out of range for {}",
                start + count,
                self.shape
            )));
        }
        let item = self.shape.c * self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(count, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * item..(start + count) * item].to_vec(),
        })
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let base = first.shape;
        let mut data = Vec::with_capacity(base.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (base.c, base.h, base.w) {
                return Err(Error::ShapeMismatch {
                    left: base,
                    right: t.shape,
                });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, base.c, base.h, base.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|x| x * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Arithmetic mean, accumulated in f64 in flat-index order.
    pub fn mean(&self) -> Result<f32> {
        if self.data.is_empty() {
            return Err(Error::InvalidShape {
                shape: self.shape,
                reason: "mean of an empty tensor".into(),
            });
        }
        let sum: f64 = self.data.iter().map(|&x| x as f64).sum();
        Ok((sum / self.data.len() as f64) as f32)
    }

    /// Error carrying the first flat index holding NaN or infinity.
    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub(crate) fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }
}
