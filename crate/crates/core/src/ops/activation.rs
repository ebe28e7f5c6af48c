use crate::error::Result;
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Logistic squashing into (0, 1).
pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Takes the forward *output*.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, "sigmoid_backward", |y, g| g * y * (1.0 - y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::{normal_tensor, seeded};

    #[test]
    fn sigmoid_is_bounded_and_stable() {
        let x = Tensor::new(vec![4], vec![-800.0, 0.0, 3.0, 800.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[1], 0.5);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(4);
        let x = normal_tensor(&mut rng, &[3, 4, 4], 1.0);
        let probe = normal_tensor(&mut rng, &[3, 4, 4], 1.0);
        let f = |t: &Tensor| {
            let y = sigmoid(t);
            Ok((y.dot(&probe)?, sigmoid_backward(&y, &probe)?))
        };
        assert!(grad_check(f, &x, 1e-4).unwrap().passed);
        let r = |t: &Tensor| Ok((relu(t).dot(&probe)?, relu_backward(t, &probe)?));
        assert!(grad_check(r, &x, 1e-4).unwrap().passed);
    }
}
