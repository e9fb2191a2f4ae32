//! Dense N-dimensional tensor value type.
//!
//! A [`Tensor`] is just a shape plus a contiguous row-major buffer of
//! [`Elem`]. Image batches use `[batch, channel, height, width]` order.
//! Gradients are not stored here; they live on the autograd tape nodes.

use crate::error::{Error, Result};
use crate::Elem;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Elem>,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat data.
    pub fn new(shape: &[usize], data: Vec<Elem>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: Elem) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// 0-dimensional scalar.
    pub fn scalar(value: Elem) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[Elem]) -> Self {
        Self { shape: vec![values.len()], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Elem] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Elem> {
        self.data
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<Elem> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index for a 4-D `[b, c, h, w]` tensor.
    #[inline]
    pub fn idx4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> Elem {
        self.data[self.idx4(b, c, y, x)]
    }

    /// Flat index for a 2-D `[r, c]` tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        r * self.shape[1] + c
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> Elem {
        self.data[self.idx2(r, c)]
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Elem> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "max_abs_diff shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Elem::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_item() {
        let t = Tensor::scalar(4.5);
        assert_eq!(t.item().unwrap(), 4.5);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }

    #[test]
    fn idx4_is_row_major() {
        let t = Tensor::zeros(&[2, 3, 4, 5]);
        assert_eq!(t.idx4(0, 0, 0, 0), 0);
        assert_eq!(t.idx4(0, 0, 0, 1), 1);
        assert_eq!(t.idx4(0, 0, 1, 0), 5);
        assert_eq!(t.idx4(0, 1, 0, 0), 20);
        assert_eq!(t.idx4(1, 0, 0, 0), 60);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(&[2, 3], (0..6).map(|v| v as Elem).collect()).unwrap();
        let r = t.clone().reshaped(&[6]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4]).is_err());
    }
}
