//! Dense real tensors (rank <= 4) with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value type: shape plus row-major `f64` storage. It
//! is `Send` and carries no graph state, so videos, weights and perturbations
//! can move freely between worker threads. Differentiable computation happens
//! on a [`Tape`]: leaves are registered on the tape, operations on [`Var`]
//! handles record adjoint rules, and one `backward` pass fills gradients.

mod tape;
mod vten;

pub use tape::{Tape, TapeOptions, Var};
pub use vten::{read_tensor, read_tensor_from, write_tensor, write_tensor_to};

use crate::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Dense row-major tensor of rank <= 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::RankTooHigh(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Index of the largest element, ties broken toward the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Snap every element onto the f32 grid. Anything persisted through the
    /// VTEN format (f32 payload) must round-trip bit-exact, so values headed
    /// for disk are quantized first.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Flat range covered by frame `t` of a rank-4 `T x W x H x C` tensor.
    pub fn frame_range(&self, t: usize) -> std::ops::Range<usize> {
        debug_assert_eq!(self.rank(), 4);
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        t * per..(t + 1) * per
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[self.frame_range(t)]
    }

    /// New tensor holding the first `n` frames of a rank-4 tensor.
    pub fn truncate_frames(&self, n: usize) -> Tensor {
        debug_assert_eq!(self.rank(), 4);
        debug_assert!(n >= 1 && n <= self.shape[0]);
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: vec![n, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[..n * per].to_vec(),
        }
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DataLength { .. }));
    }

    #[test]
    fn new_rejects_rank_five() {
        let err = Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).unwrap_err();
        assert!(matches!(err, Error::RankTooHigh(5)));
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::from_vec(vec![0.5, 0.5, 0.1]);
        assert_eq!(t.argmax(), 0);
    }

    #[test]
    fn frame_slicing() {
        let t = Tensor::new(vec![2, 1, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.frame(0), &[1.0, 2.0]);
        assert_eq!(t.frame(1), &[3.0, 4.0]);
        let head = t.truncate_frames(1);
        assert_eq!(head.shape(), &[1, 1, 2, 1]);
        assert_eq!(head.data(), &[1.0, 2.0]);
    }
}
