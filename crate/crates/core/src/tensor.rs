//! Dense rank-4 tensors (height x width x channels x batch).
//!
//! Memory layout, from slowest to fastest varying index:
//! batch, then channel, then row, then column. The flat offset of
//! element `(row, col, chan, item)` is
//!
//! ```text
//! ((item * channels + chan) * height + row) * width + col
//! ```
//!
//! so each `(item, chan)` plane is a contiguous row-major `height x width`
//! slab. All modules in this crate share this layout, including the T4F
//! file format.

use num_traits::Float;

use crate::error::{Error, Result};

/// Element trait for tensors: 32-bit reals in production paths, 64-bit in
/// the gradient-check suites.
pub trait Scalar: Float + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dense rank-4 array. `Tensor4` (the `f32` alias) is the carrier for
/// images, label maps, feature maps and gradients throughout the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    h: usize,
    w: usize,
    c: usize,
    n: usize,
    data: Vec<T>,
}

pub type Tensor4 = Tensor<f32>;

impl<T: Scalar> Tensor<T> {
    pub fn zeros(h: usize, w: usize, c: usize, n: usize) -> Self {
        assert!(h > 0 && w > 0 && c > 0 && n > 0, "tensor dims must be positive");
        Tensor {
            h,
            w,
            c,
            n,
            data: vec![T::zero(); h * w * c * n],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, n: usize, value: T) -> Self {
        let mut t = Self::zeros(h, w, c, n);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            h: 1,
            w: 1,
            c: 1,
            n: 1,
            data: vec![value],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, n: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * c * n {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} elements for {}x{}x{}x{}", h * w * c * n, h, w, c, n),
                format!("{} elements", data.len()),
            ));
        }
        if h == 0 || w == 0 || c == 0 || n == 0 {
            return Err(Error::InvalidArgument("tensor dims must be positive".into()));
        }
        Ok(Tensor { h, w, c, n, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.h, self.w, self.c, self.n)
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.h, self.w, self.c, self.n)
    }

    pub fn dims_str(&self) -> String {
        format!("{}x{}x{}x{}", self.h, self.w, self.c, self.n)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat offset of `(row, col, chan, item)` in the documented layout.
    #[inline]
    pub fn idx(&self, row: usize, col: usize, chan: usize, item: usize) -> usize {
        debug_assert!(row < self.h && col < self.w && chan < self.c && item < self.n);
        ((item * self.c + chan) * self.h + row) * self.w + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, chan: usize, item: usize) -> T {
        self.data[self.idx(row, col, chan, item)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, chan: usize, item: usize, value: T) {
        let i = self.idx(row, col, chan, item);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Contiguous `h*w` plane of one (item, channel) pair.
    #[inline]
    pub fn plane(&self, item: usize, chan: usize) -> &[T] {
        let start = (item * self.c + chan) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, item: usize, chan: usize) -> &mut [T] {
        let start = (item * self.c + chan) * self.h * self.w;
        let end = start + self.h * self.w;
        &mut self.data[start..end]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            n: self.n,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise a + b.
    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::shape("Tensor::add", self.dims_str(), other.dims_str()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            n: self.n,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape("Tensor::add_assign", self.dims_str(), other.dims_str()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, k: T) {
        for v in &mut self.data {
            *v = *v * k;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy element cast, used to run f32 graphs through the f64 checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            n: self.n,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_lossy())).collect(),
        }
    }

    /// Copy a contiguous run of `len` batch items into a new tensor.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch slice {}..{} out of range for batch size {}",
                start,
                start + len,
                self.n
            )));
        }
        let per_item = self.h * self.w * self.c;
        let data = self.data[start * per_item..(start + len) * per_item].to_vec();
        Ok(Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            n: len,
            data,
        })
    }

    /// Stack tensors with identical per-item shape along the batch axis.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_batch of zero tensors".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.h, p.w, p.c) != (first.h, first.w, first.c) {
                return Err(Error::shape("Tensor::concat_batch", first.dims_str(), p.dims_str()));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Tensor {
            h: first.h,
            w: first.w,
            c: first.c,
            n,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_batch_channel_row_col() {
        let mut t = Tensor::<f32>::zeros(2, 3, 2, 2);
        t.set(1, 2, 0, 1, 7.0);
        // ((1*2 + 0)*2 + 1)*3 + 2 = 17
        assert_eq!(t.data()[17], 7.0);
        assert_eq!(t.get(1, 2, 0, 1), 7.0);
    }

    #[test]
    fn planes_are_contiguous() {
        let mut t = Tensor::<f32>::zeros(2, 2, 2, 2);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        assert_eq!(t.plane(1, 0), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(t.plane(0, 1), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::<f32>::from_vec(2, 2, 1, 1, vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4 elements"), "{msg}");
        assert!(msg.contains("5 elements"), "{msg}");
    }

    #[test]
    fn slice_and_concat_batch_roundtrip() {
        let mut t = Tensor::<f32>::zeros(2, 2, 1, 3);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        let a = t.slice_batch(0, 1).unwrap();
        let b = t.slice_batch(1, 2).unwrap();
        let back = Tensor::concat_batch(&[&a, &b]).unwrap();
        assert_eq!(back, t);
    }
}
