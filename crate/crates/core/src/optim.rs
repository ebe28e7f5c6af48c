//! Learnable parameters and the Adam optimizer.

use crate::error::{DemeshError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// A tensor together with its Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    value: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Param { value, m, v, step: 0 }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.v
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Replaces the value and resets optimizer state (checkpoint restore).
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        value.ensure_shape("Param::set_value", self.value.shape())?;
        *self = Param::new(value);
        Ok(())
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grad: &Tensor, cfg: &AdamConfig) -> Result<()> {
        grad.ensure_shape("adam_step", self.value.shape())?;
        if !(cfg.lr > 0.0) {
            return Err(DemeshError::invalid("adam_step", format!("lr must be positive, got {}", cfg.lr)));
        }
        grad.ensure_finite("adam_step")?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let p = self.value.data_mut();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Param,
    pub bias: Param,
}

impl LayerParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        LayerParams {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.value()
    }

    pub fn bias(&self) -> &Tensor {
        self.bias.value()
    }

    pub fn count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    pub fn adam_step(&mut self, grad: &LayerGrads, cfg: &AdamConfig) -> Result<()> {
        self.weight.adam_step(&grad.weight, cfg)?;
        self.bias.adam_step(&grad.bias, cfg)
    }
}

/// Gradients matching a [`LayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerGrads {
    pub fn zeros_like(p: &LayerParams) -> Self {
        LayerGrads {
            weight: Tensor::zeros(p.weight().shape()),
            bias: Tensor::zeros(p.bias().shape()),
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        self.bias.add_assign(&other.bias)
    }

    pub fn scale(&self, k: f64) -> LayerGrads {
        LayerGrads {
            weight: self.weight.scale(k),
            bias: self.bias.scale(k),
        }
    }
}
