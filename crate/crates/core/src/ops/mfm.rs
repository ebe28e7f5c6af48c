use crate::error::{DemeshError, Result};
use crate::tensor::Tensor;

fn halves(input: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let c = input.shape()[0];
    if c % 2 != 0 {
        return Err(DemeshError::OddExtent {
            op,
            what: "channel count",
            found: c,
        });
    }
    Ok((c / 2, input.len() / c))
}

/// Max-Feature-Map: elementwise max of the two channel halves along the
/// leading extent. Works for `[C, H, W]` maps and `[C]` vectors alike.
pub fn mfm(input: &Tensor) -> Result<Tensor> {
    let (half, inner) = halves(input, "mfm")?;
    let x = input.data();
    let n = half * inner;
    let out: Vec<f64> = (0..n).map(|i| x[i].max(x[i + n])).collect();
    let mut shape = input.shape().to_vec();
    shape[0] = half;
    Ok(Tensor::from_parts(shape, out))
}

/// Routes each output gradient to the winning half; ties go to the first.
pub fn mfm_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (half, inner) = halves(input, "mfm_backward")?;
    let mut out_shape = input.shape().to_vec();
    out_shape[0] = half;
    grad_out.ensure_shape("mfm_backward", &out_shape)?;
    let x = input.data();
    let n = half * inner;
    let mut grad = vec![0.0; input.len()];
    for (i, &g) in grad_out.data().iter().enumerate() {
        if x[i] >= x[i + n] {
            grad[i] = g;
        } else {
            grad[i + n] = g;
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), grad))
}
