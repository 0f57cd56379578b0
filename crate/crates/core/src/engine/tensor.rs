use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::TensorShape;

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: TensorShape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "shape {shape} holds {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("non-finite value at index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(TensorShape::new(dims.to_vec())?, data)
    }

    pub fn zeros(shape: TensorShape) -> Self {
        let n = shape.numel();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::from_dims(&[data.len()], data)
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * 4
    }

    /// Same data viewed with another shape of equal element count.
    pub fn reshape(self, shape: TensorShape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Concatenates along axis 0; all trailing dims must agree.
    pub fn concat(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let tail = &first.dims()[1..];
        let mut axis0 = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if &p.dims()[1..] != tail {
                return Err(Error::Dimension(format!(
                    "concat trailing dims differ: {} vs {}",
                    first.shape(),
                    p.shape()
                )));
            }
            axis0 += p.dims()[0];
            data.extend_from_slice(p.data());
        }
        let mut dims = first.dims().to_vec();
        dims[0] = axis0;
        Self::from_dims(&dims, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::Dimension(format!(
                    "stack shapes differ: {} vs {}",
                    first.shape(),
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        Self::from_dims(&dims, data)
    }

    /// Splits off the leading axis.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        if self.shape.rank() < 2 {
            return Err(Error::Dimension(format!(
                "cannot unstack rank-{} tensor",
                self.shape.rank()
            )));
        }
        let inner = TensorShape::new(self.dims()[1..].to_vec())?;
        let step = inner.numel();
        Ok(self
            .data
            .chunks(step)
            .map(|c| Tensor {
                shape: inner.clone(),
                data: c.to_vec(),
            })
            .collect())
    }

    /// Largest absolute elementwise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shapes and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(Tensor::from_dims(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_dims(&[1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn concat_and_stack_roundtrip() {
        let a = Tensor::from_dims(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_dims(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = c.unstack().unwrap();
        assert_eq!(Tensor::stack(&rows).unwrap(), c);
    }
}
