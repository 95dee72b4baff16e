use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::Result;

/// Dense numeric array with shape, row-major, 32-bit storage.
///
/// This is the value carrier for everything persisted or trained: images,
/// parameters, triggers. Computation happens on the [`super::Tape`] in 64-bit;
/// tensors are the endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::Contract("tensor extents must all be >= 1"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                context: "tensor data length vs shape product",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product::<usize>().max(1);
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let numel: usize = shape.iter().product::<usize>().max(1);
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Dimensions as seen by the tape: rank-2 tensors keep (rows, cols),
    /// everything else flattens to a single row.
    pub fn tape_dims(&self) -> (usize, usize) {
        if self.shape.len() == 2 {
            (self.shape[0], self.shape[1])
        } else {
            (1, self.numel())
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    /// Writes 64-bit values back into 32-bit storage (rounding).
    pub fn set_from_f64(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.data.len());
        for (dst, &src) in self.data.iter_mut().zip(values) {
            *dst = src as f32;
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |acc, &x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0; 3]).unwrap_err();
        match err {
            CoreError::ShapeMismatch { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tape_dims_flatten_non_matrices() {
        let t = Tensor::zeros(&[4, 4, 3]);
        assert_eq!(t.tape_dims(), (1, 48));
        let m = Tensor::zeros(&[3, 5]);
        assert_eq!(m.tape_dims(), (3, 5));
    }
}
