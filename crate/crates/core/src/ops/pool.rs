use crate::error::{DemeshError, Result};
use crate::tensor::Tensor;

/// Argmax record of a 2×2 max pooling: for every pooled cell, the flat
/// offset of the winning element in the pooled input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    input_shape: [usize; 3],
    argmax: Vec<usize>,
}

impl IndexMap {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn pooled_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.input_shape;
        [c, h / 2, w / 2]
    }

    pub fn flat_indices(&self) -> &[usize] {
        &self.argmax
    }

    /// `(channel, row, col)` in the input of the winner for pooled cell `k`.
    pub fn source_position(&self, k: usize) -> (usize, usize, usize) {
        let [_, h, w] = self.input_shape;
        let flat = self.argmax[k];
        (flat / (h * w), (flat / w) % h, flat % w)
    }

    /// Offset of the winner inside its 2×2 window.
    pub fn window_offset(&self, k: usize) -> (usize, usize) {
        let (_, r, c) = self.source_position(k);
        (r % 2, c % 2)
    }
}

/// Non-overlapping 2×2 max pooling that records argmax positions.
/// Ties go to the first element in row-major scan order of the window.
pub fn maxpool2_indices(input: &Tensor) -> Result<(Tensor, IndexMap)> {
    let (c, h, w) = input.chw("maxpool2_indices")?;
    if h % 2 != 0 {
        return Err(DemeshError::OddExtent {
            op: "maxpool2_indices",
            what: "height",
            found: h,
        });
    }
    if w % 2 != 0 {
        return Err(DemeshError::OddExtent {
            op: "maxpool2_indices",
            what: "width",
            found: w,
        });
    }
    let (ph, pw) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    let mut argmax = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..ph {
            for j in 0..pw {
                let top = base + 2 * i * w + 2 * j;
                let window = [top, top + 1, top + w, top + w + 1];
                let mut best = window[0];
                for &idx in &window[1..] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![c, ph, pw], out),
        IndexMap {
            input_shape: [c, h, w],
            argmax,
        },
    ))
}

/// Gradient of max pooling: route each pooled gradient to its argmax.
pub fn maxpool2_backward(grad_out: &Tensor, indices: &IndexMap) -> Result<Tensor> {
    unpool_indices(grad_out, indices, indices.input_shape)
}

/// Sparse scatter of pooled values back to the recorded argmax positions.
pub fn unpool_indices(input: &Tensor, indices: &IndexMap, out_shape: [usize; 3]) -> Result<Tensor> {
    input.ensure_shape("unpool_indices", &indices.pooled_shape())?;
    if out_shape != indices.input_shape {
        return Err(DemeshError::ShapeMismatch {
            op: "unpool_indices",
            expected: indices.input_shape.to_vec(),
            found: out_shape.to_vec(),
        });
    }
    let len: usize = out_shape.iter().product();
    let mut out = vec![0.0; len];
    for (&idx, &v) in indices.argmax.iter().zip(input.data()) {
        if idx >= len {
            return Err(DemeshError::IndexOutOfBounds {
                op: "unpool_indices",
                index: idx,
                len,
            });
        }
        out[idx] = v;
    }
    Ok(Tensor::from_parts(out_shape.to_vec(), out))
}

/// Gradient of unpooling: gather from the scattered positions.
pub fn unpool_backward(grad_out: &Tensor, indices: &IndexMap) -> Result<Tensor> {
    grad_out.ensure_shape("unpool_backward", &indices.input_shape)?;
    let g = grad_out.data();
    let mut out = Vec::with_capacity(indices.argmax.len());
    for &idx in &indices.argmax {
        out.push(*g.get(idx).ok_or(DemeshError::IndexOutOfBounds {
            op: "unpool_backward",
            index: idx,
            len: g.len(),
        })?);
    }
    Ok(Tensor::from_parts(indices.pooled_shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::{normal_tensor, seeded};

    #[test]
    fn single_window_picks_max() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, idx) = maxpool2_indices(&x).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(idx.window_offset(0), (1, 1));
        let up = unpool_indices(&p, &idx, [1, 2, 2]).unwrap();
        assert_eq!(up.data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn ties_resolve_to_first_in_scan_order() {
        let x = Tensor::filled(&[2, 4, 6], 0.7);
        let (p, idx) = maxpool2_indices(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.7));
        for k in 0..idx.flat_indices().len() {
            assert_eq!(idx.window_offset(k), (0, 0));
        }
    }

    #[test]
    fn odd_extent_is_rejected() {
        assert!(matches!(
            maxpool2_indices(&Tensor::zeros(&[1, 3, 4])),
            Err(DemeshError::OddExtent { what: "height", .. })
        ));
        assert!(matches!(
            maxpool2_indices(&Tensor::zeros(&[1, 4, 5])),
            Err(DemeshError::OddExtent { what: "width", .. })
        ));
    }

    #[test]
    fn zero_input_unpools_to_zero() {
        let (_, idx) = maxpool2_indices(&normal_tensor(&mut seeded(1), &[2, 4, 4], 1.0)).unwrap();
        let up = unpool_indices(&Tensor::zeros(&[2, 2, 2]), &idx, [2, 4, 4]).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_keeps_values_only_at_indices() {
        let x = normal_tensor(&mut seeded(5), &[3, 8, 8], 1.0);
        let (p, idx) = maxpool2_indices(&x).unwrap();
        let up = unpool_indices(&p, &idx, [3, 8, 8]).unwrap();
        let mut expected = vec![0.0; x.len()];
        for (k, &flat) in idx.flat_indices().iter().enumerate() {
            expected[flat] = p.data()[k];
            assert_eq!(x.data()[flat], p.data()[k]);
        }
        assert_eq!(up.data(), &expected[..]);
        // exactly one nonzero per window
        let nonzero = up.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 3 * 16);
    }

    #[test]
    fn mismatched_indices_are_rejected() {
        let (_, idx) = maxpool2_indices(&Tensor::zeros(&[1, 4, 4])).unwrap();
        assert!(unpool_indices(&Tensor::zeros(&[1, 3, 2]), &idx, [1, 4, 4]).is_err());
        assert!(unpool_indices(&Tensor::zeros(&[1, 2, 2]), &idx, [1, 4, 6]).is_err());
    }

    #[test]
    fn pool_and_unpool_gradients_match_finite_differences() {
        let mut rng = seeded(8);
        let x = normal_tensor(&mut rng, &[2, 6, 4], 1.0);
        let probe = normal_tensor(&mut rng, &[2, 3, 2], 1.0);
        let f = |t: &Tensor| {
            let (p, idx) = maxpool2_indices(t)?;
            Ok((p.dot(&probe)?, maxpool2_backward(&probe, &idx)?))
        };
        assert!(grad_check(f, &x, 1e-4).unwrap().passed);

        let (_, idx) = maxpool2_indices(&x).unwrap();
        let probe_full = normal_tensor(&mut rng, &[2, 6, 4], 1.0);
        let g = |t: &Tensor| {
            let up = unpool_indices(t, &idx, [2, 6, 4])?;
            Ok((up.dot(&probe_full)?, unpool_backward(&probe_full, &idx)?))
        };
        let pooled = normal_tensor(&mut rng, &[2, 3, 2], 1.0);
        assert!(grad_check(g, &pooled, 1e-4).unwrap().passed);
    }
}
