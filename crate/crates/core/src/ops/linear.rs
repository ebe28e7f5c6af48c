use crate::error::{DemeshError, Result};
use crate::tensor::Tensor;

use super::{axpy, dot};

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let &[out, n] = weight.shape() else {
        return Err(DemeshError::invalid(
            "fully_connected",
            format!("weight must be [out, in], found {:?}", weight.shape()),
        ));
    };
    if input.len() != n {
        return Err(DemeshError::ShapeMismatch {
            op: "fully_connected",
            expected: vec![n],
            found: vec![input.len()],
        });
    }
    bias.ensure_shape("fully_connected bias", &[out])?;
    Ok((out, n))
}

/// Affine map of the flattened input: `W · vec(x) + b`, shape `[out]`.
pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, n) = check(input, weight, bias)?;
    let x = input.data();
    let w = weight.data();
    let y = (0..out).map(|o| dot(&w[o * n..(o + 1) * n], x) + bias.data()[o]).collect();
    Ok(Tensor::from_parts(vec![out], y))
}

/// The input gradient keeps the original (unflattened) input shape.
pub fn fully_connected_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (out, n) = check(input, weight, &Tensor::zeros(&[weight.shape()[0]]))?;
    grad_out.ensure_shape("fully_connected_backward", &[out])?;
    let x = input.data();
    let w = weight.data();
    let mut gw = vec![0.0; out * n];
    let mut gx = vec![0.0; n];
    for (o, &g) in grad_out.data().iter().enumerate() {
        axpy(g, x, &mut gw[o * n..(o + 1) * n]);
        axpy(g, &w[o * n..(o + 1) * n], &mut gx);
    }
    Ok(LinearGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gx),
        weight: Tensor::from_parts(vec![out, n], gw),
        bias: grad_out.clone(),
    })
}
