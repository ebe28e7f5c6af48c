use crate::error::{DemeshError, Result};
use crate::tensor::Tensor;

use super::gemm::{gemm_acc, gemm_nt_acc, transpose};

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Saved state for the backward pass: the unfolded input patches.
#[derive(Debug, Clone)]
pub struct ConvCache {
    input_shape: [usize; 3],
    out_hw: (usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
    cols: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn geometry(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    let (c, h, w) = input.chw("conv2d")?;
    let &[out_c, wc, kh, kw] = weight.shape() else {
        return Err(DemeshError::invalid(
            "conv2d",
            format!("weight must be [out, in, k, k], found {:?}", weight.shape()),
        ));
    };
    if kh != kw {
        return Err(DemeshError::invalid("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if wc != c {
        return Err(DemeshError::ShapeMismatch {
            op: "conv2d",
            expected: vec![out_c, c, kh, kw],
            found: weight.shape().to_vec(),
        });
    }
    bias.ensure_shape("conv2d bias", &[out_c])?;
    if stride == 0 {
        return Err(DemeshError::invalid("conv2d", "stride must be at least 1"));
    }
    let oh = conv_output_extent(h, kh, stride, pad);
    let ow = conv_output_extent(w, kw, stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(DemeshError::invalid(
            "conv2d",
            format!("kernel {kh} larger than padded input {h}x{w} (pad {pad})"),
        ));
    };
    Ok(Geometry { c, h, w, out_c, k: kh, oh, ow })
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `t`, i.e.
/// outputs whose source index `o * stride + t - pad` falls inside `0..len`.
fn valid_range(out: usize, len: usize, t: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if t >= pad { 0 } else { (pad - t).div_ceil(stride) };
    // o * stride + t - pad <= len - 1
    let hi = if len + pad < t + 1 { 0 } else { ((len + pad - t - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

fn im2col(input: &[f64], g: &Geometry, stride: usize, pad: usize) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.k * g.k * plane];
    for c in 0..g.c {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (y0, y1) = valid_range(g.oh, g.h, ki, stride, pad);
            for kj in 0..g.k {
                let (x0, x1) = valid_range(g.ow, g.w, kj, stride, pad);
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in y0..y1 {
                    let iy = oy * stride + ki - pad;
                    let src_row = &src[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if stride == 1 {
                        let ix0 = x0 + kj - pad;
                        dst_row[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            dst_row[ox] = src_row[ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cache: &ConvCache) -> Vec<f64> {
    let [c_in, h, w] = cache.input_shape;
    let (oh, ow) = cache.out_hw;
    let (k, stride, pad) = (cache.kernel, cache.stride, cache.pad);
    let plane = oh * ow;
    let mut out = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            let (y0, y1) = valid_range(oh, h, ki, stride, pad);
            for kj in 0..k {
                let (x0, x1) = valid_range(ow, w, kj, stride, pad);
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in y0..y1 {
                    let iy = oy * stride + ki - pad;
                    let drow = &mut dst[iy * w..(iy + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        drow[ox * stride + kj - pad] += srow[ox];
                    }
                }
            }
        }
    }
    out
}

/// 2-D convolution (cross-correlation) of a `[C, H, W]` input with a
/// `[O, C, k, k]` kernel. Returns `[O, H', W']`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_forward(input, weight, bias, stride, pad).map(|(out, _)| out)
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvCache)> {
    let g = geometry(input, weight, bias, stride, pad)?;
    let cols = im2col(input.data(), &g, stride, pad);
    let plane = g.oh * g.ow;
    let patch = g.c * g.k * g.k;
    let mut out = vec![0.0; g.out_c * plane];
    for (o, dst) in out.chunks_exact_mut(plane).enumerate() {
        dst.fill(bias.data()[o]);
    }
    gemm_acc(weight.data(), &cols, &mut out, g.out_c, patch, plane);
    let cache = ConvCache {
        input_shape: [g.c, g.h, g.w],
        out_hw: (g.oh, g.ow),
        kernel: g.k,
        stride,
        pad,
        cols,
    };
    Ok((Tensor::from_parts(vec![g.out_c, g.oh, g.ow], out), cache))
}

/// Gradients of a convolution. The input gradient is skipped when
/// `need_input` is false (first layer of a network). Consumes the cache so
/// its patch buffer can be reused for the input gradient.
pub fn conv2d_backward(cache: ConvCache, weight: &Tensor, grad_out: &Tensor, need_input: bool) -> Result<ConvGrads> {
    let out_c = weight.shape()[0];
    let (oh, ow) = cache.out_hw;
    grad_out.ensure_shape("conv2d_backward", &[out_c, oh, ow])?;
    let plane = oh * ow;
    let patch = cache.input_shape[0] * cache.kernel * cache.kernel;
    weight.ensure_shape("conv2d_backward", &[out_c, cache.input_shape[0], cache.kernel, cache.kernel])?;
    let g = grad_out.data();
    let gb: Vec<f64> = g.chunks_exact(plane).map(|row| row.iter().sum()).collect();
    let mut gw = vec![0.0; out_c * patch];
    gemm_nt_acc(g, &cache.cols, &mut gw, out_c, plane, patch);
    let input = if need_input {
        let w_t = transpose(weight.data(), out_c, patch);
        let mut cache = cache;
        let mut dcols = std::mem::take(&mut cache.cols);
        dcols.fill(0.0);
        gemm_acc(&w_t, g, &mut dcols, patch, out_c, plane);
        Some(Tensor::from_parts(cache.input_shape.to_vec(), col2im(&dcols, &cache)))
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![out_c], gb),
    })
}
