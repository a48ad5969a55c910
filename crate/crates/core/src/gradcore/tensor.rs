use crate::error::{Error, Result};

/// Dense rank-4 array of `f64` in row-major `(n, c, h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// A `(1, 1, 1, 1)` tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor4 {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{} elements supplied for dims {dims:?} ({expected} expected)",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    /// Batch of row vectors, stored as `(rows, cols, 1, 1)`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec([rows, cols, 1, 1], data)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Number of elements per batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Row `n` of the tensor viewed as `(n, c·h·w)`.
    pub fn row(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Bitwise comparison, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor4) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
