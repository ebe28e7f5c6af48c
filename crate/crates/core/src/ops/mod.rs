//! Layer primitives with explicit forward and backward passes.
//!
//! All image ops work on a single `[C, H, W]` tensor; callers iterate over
//! the batch extent. Backward functions return gradients w.r.t. inputs and
//! parameters given the upstream gradient and whatever the forward cached.

mod activation;
mod conv;
pub mod gemm;
mod linear;
mod mfm;
mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{conv2d, conv2d_backward, conv2d_forward, conv_output_extent, ConvCache, ConvGrads};
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use mfm::{mfm, mfm_backward};
pub use pool::{maxpool2_backward, maxpool2_indices, unpool_backward, unpool_indices, IndexMap};

/// Dot product with eight independent accumulators, summed in a fixed order.
/// The split lets the compiler vectorize while keeping results reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0_f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.125).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-10);
    }
}
