//! Dense row-major `f64` tensors.
//!
//! Images use the channels × height × width layout; a batch adds an explicit
//! leading extent. Tensors are plain values: operations return new tensors
//! and never mutate their inputs.

use std::fmt;

use crate::error::{DemeshError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(DemeshError::invalid(
                "Tensor::new",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DemeshError::ShapeMismatch {
                op: "Tensor::new",
                expected: vec![expected],
                found: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for callers that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(channels, height, width)` of a rank-3 image tensor.
    pub fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(DemeshError::invalid(
                op,
                format!("expected a channels x height x width tensor, found shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DemeshError::ShapeMismatch {
                op: "Tensor::reshape",
                expected: shape,
                found: self.shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn ensure_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(DemeshError::ShapeMismatch {
                op,
                expected: shape.to_vec(),
                found: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(DemeshError::NonFinite {
                op,
                context: format!(" at element {i}"),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        other.ensure_shape(op, &self.shape)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "Tensor::sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        other.ensure_shape("Tensor::add_assign", &self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        other.ensure_shape("Tensor::dot", &self.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Slice `i` along the leading (batch) extent.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let b = self.shape[0];
        if i >= b || self.shape.len() < 2 {
            return Err(DemeshError::IndexOutOfBounds {
                op: "Tensor::batch_item",
                index: i,
                len: b,
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading extent.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| DemeshError::invalid("Tensor::stack", "empty input"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            t.ensure_shape("Tensor::stack", &first.shape)?;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Splits along the leading extent.
    pub fn unstack(&self) -> Vec<Tensor> {
        (0..self.shape[0])
            .map(|i| self.batch_item(i).expect("index in range"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, DemeshError::ShapeMismatch { .. }));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn stack_and_unstack() {
        let a = Tensor::filled(&[1, 2, 2], 1.0);
        let b = Tensor::filled(&[1, 2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.unstack(), vec![a, b]);
    }
}
