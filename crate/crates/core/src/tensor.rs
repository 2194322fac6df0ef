//! Dense row-major f64 tensors.
//!
//! All numerics in this crate run in 64-bit floats so the exactness claims
//! of the gradient-shielding checks hold without tolerance juggling.

use serde::{Deserialize, Serialize};

/// A dense tensor: shape plus a flat row-major payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must equal product of shape"
        );
        TensorValue { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        TensorValue {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        TensorValue {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros_like(&self) -> Self {
        TensorValue::zeros(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, i.e. the batch axis.
    pub fn batch(&self) -> usize {
        *self.shape.first().unwrap_or(&0)
    }

    /// Number of elements per example (product of non-batch dims).
    pub fn per_example(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        TensorValue {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise a + b; shapes must match.
    pub fn add(&self, other: &TensorValue) -> TensorValue {
        debug_assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        TensorValue {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Accumulate `other` into self (gradient accumulation).
    pub fn add_assign(&mut self, other: &TensorValue) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> TensorValue {
        self.map(|v| v * s)
    }

    /// Full-tensor inner product.
    pub fn dot(&self, other: &TensorValue) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Largest relative difference against `other`, with an absolute floor
    /// so comparisons near zero stay meaningful.
    pub fn max_rel_diff(&self, other: &TensorValue, floor: f64) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// One training or evaluation batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: TensorValue,
    pub targets: TensorValue,
    pub size: usize,
}

impl Batch {
    pub fn new(inputs: TensorValue, targets: TensorValue) -> Self {
        let size = inputs.batch();
        assert_eq!(
            targets.batch(),
            size,
            "inputs and targets must agree on the batch dimension"
        );
        Batch {
            inputs,
            targets,
            size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_matches_data_len() {
        let t = TensorValue::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.batch(), 2);
        assert_eq!(t.per_example(), 3);
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_panics() {
        TensorValue::new(vec![2, 2], vec![1.0; 3]);
    }

    #[test]
    fn dot_and_scale() {
        let a = TensorValue::new(vec![3], vec![1.0, 2.0, 3.0]);
        let b = TensorValue::new(vec![3], vec![4.0, 5.0, 6.0]);
        assert_eq!(a.dot(&b), 32.0);
        assert_eq!(a.scale(2.0).data, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    #[should_panic]
    fn batch_mismatch_panics() {
        Batch::new(
            TensorValue::zeros(&[2, 3]),
            TensorValue::zeros(&[3]),
        );
    }
}
