use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Shape of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..*self }
    }

    fn checked_len(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major rank-4 array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Allocates a zero tensor, reporting overflow instead of panicking.
    pub fn try_zeros(shape: Shape4) -> Result<Self> {
        let len = shape.checked_len().ok_or(Error::TooLarge(usize::MAX))?;
        let mut data = Vec::new();
        data.try_reserve_exact(len).map_err(|_| Error::TooLarge(len))?;
        data.resize(len, 0.0);
        Ok(Self { shape, data })
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                expected: format!("{} elements ({shape})", shape.len()),
                found: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = &self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The contiguous slice of one batch item.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copy of a single batch item as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor4 {
        Tensor4 {
            shape: self.shape.with_n(1),
            data: self.item(n).to_vec(),
        }
    }

    /// Builds a batch from the listed items, in order.
    pub fn gather(&self, indices: &[usize]) -> Tensor4 {
        let mut data = Vec::with_capacity(indices.len() * self.shape.item_len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Tensor4 {
            shape: self.shape.with_n(indices.len()),
            data,
        }
    }

    /// Concatenates batches with identical item shapes.
    pub fn concat(parts: &[Tensor4]) -> Result<Tensor4> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let item = first.shape.with_n(1);
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape.with_n(1) != item {
                return Err(Error::ShapeMismatch {
                    context: "concat",
                    expected: format!("{item}"),
                    found: format!("{}", p.shape),
                });
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            shape: item.with_n(n),
            data,
        })
    }

    /// Same data viewed under another shape with the same element count.
    pub fn reshape(self, shape: Shape4) -> Result<Tensor4> {
        Tensor4::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Tensor4 {
        self.map(|x| a * x)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
