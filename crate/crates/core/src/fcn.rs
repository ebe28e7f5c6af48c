//! The inpainting network: a SegNet-style encoder–decoder whose decoder
//! unpools with the argmax indices recorded by the matching encoder stage.
//!
//! With `widths = [w0, w1, ..]` the layer sequence is
//!
//! ```text
//! enc0: conv(1 -> w0) relu pool
//! enc1: conv(w0 -> w1) relu pool
//! ...
//! dec1: unpool(enc1) conv(w1 -> w0) relu
//! dec0: unpool(enc0) conv(w0 -> 1) logistic
//! ```

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{DemeshError, Result};
use crate::ops::{
    conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_indices, relu, relu_backward, sigmoid,
    sigmoid_backward, unpool_backward, unpool_indices, ConvCache, IndexMap,
};
use crate::optim::{AdamConfig, LayerGrads, LayerParams};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub height: usize,
    pub width: usize,
    /// Encoder channel widths; one pooling stage per entry.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            height: 64,
            width: 48,
            widths: vec![16, 32],
            kernel: 3,
        }
    }
}

impl ArchSpec {
    pub fn pool_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(DemeshError::invalid("ArchSpec", "need at least one positive channel width"));
        }
        if self.kernel % 2 == 0 {
            return Err(DemeshError::invalid("ArchSpec", format!("kernel {} must be odd", self.kernel)));
        }
        let div = 1usize << self.pool_stages();
        if self.height % div != 0 || self.width % div != 0 || self.height == 0 || self.width == 0 {
            return Err(DemeshError::invalid(
                "ArchSpec",
                format!(
                    "image {}x{} not divisible by 2^{} = {div}",
                    self.height,
                    self.width,
                    self.pool_stages()
                ),
            ));
        }
        Ok(())
    }

    fn encoder_channels(&self, i: usize) -> (usize, usize) {
        let input = if i == 0 { 1 } else { self.widths[i - 1] };
        (input, self.widths[i])
    }

    fn decoder_channels(&self, i: usize) -> (usize, usize) {
        let output = if i == 0 { 1 } else { self.widths[i - 1] };
        (self.widths[i], output)
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        (0..self.pool_stages())
            .map(|i| {
                let (ei, eo) = self.encoder_channels(i);
                let (di, dout) = self.decoder_channels(i);
                ei * eo * k2 + eo + di * dout * k2 + dout
            })
            .sum()
    }

    /// Theoretical receptive field (pixels, one axis) of an output pixel.
    pub fn receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1usize, 1usize);
        for _ in 0..self.pool_stages() {
            rf += (self.kernel - 1) * jump;
            rf += jump;
            jump *= 2;
        }
        for _ in 0..self.pool_stages() {
            jump /= 2;
            rf += (self.kernel - 1) * jump;
        }
        rf
    }

    /// Receptive field of the same convolutions with pooling removed.
    pub fn receptive_field_without_pooling(&self) -> usize {
        1 + 2 * self.pool_stages() * (self.kernel - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintNet {
    spec: ArchSpec,
    encoders: Vec<LayerParams>,
    decoders: Vec<LayerParams>,
}

struct EncoderCache {
    conv: ConvCache,
    pre: Tensor,
    indices: IndexMap,
}

struct DecoderCache {
    conv: ConvCache,
    pre: Tensor,
}

/// Everything the backward pass needs from one forward pass.
pub struct PsiCache {
    encoders: Vec<EncoderCache>,
    decoders: Vec<DecoderCache>,
    output: Tensor,
}

impl PsiCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// Per-layer parameter gradients of an [`InpaintNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct PsiGrads {
    pub encoders: Vec<LayerGrads>,
    pub decoders: Vec<LayerGrads>,
}

impl PsiGrads {
    pub fn add_assign(&mut self, other: &PsiGrads) -> Result<()> {
        for (a, b) in self.encoders.iter_mut().zip(&other.encoders) {
            a.add_assign(b)?;
        }
        for (a, b) in self.decoders.iter_mut().zip(&other.decoders) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> PsiGrads {
        PsiGrads {
            encoders: self.encoders.iter().map(|g| g.scale(k)).collect(),
            decoders: self.decoders.iter().map(|g| g.scale(k)).collect(),
        }
    }

    /// Flattened view in checkpoint order (`enc*` then `dec*`, weight before bias).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .flat_map(|g| [&g.weight, &g.bias])
            .collect()
    }
}

fn he_layer(seed: u64, name: &str, cin: usize, cout: usize, k: usize) -> LayerParams {
    let mut rng = seeded(derive_seed(seed, name, 0));
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    LayerParams::new(normal_tensor(&mut rng, &[cout, cin, k, k], std), Tensor::zeros(&[cout]))
}

impl InpaintNet {
    /// Seeded He-initialised network with zero biases.
    pub fn build(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let encoders = (0..spec.pool_stages())
            .map(|i| {
                let (cin, cout) = spec.encoder_channels(i);
                he_layer(seed, &format!("enc{i}"), cin, cout, k)
            })
            .collect();
        let decoders = (0..spec.pool_stages())
            .map(|i| {
                let (cin, cout) = spec.decoder_channels(i);
                he_layer(seed, &format!("dec{i}"), cin, cout, k)
            })
            .collect();
        Ok(InpaintNet { spec, encoders, decoders })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.encoders.iter().chain(&self.decoders).map(LayerParams::count).sum()
    }

    pub fn encoders(&self) -> &[LayerParams] {
        &self.encoders
    }

    pub fn encoders_mut(&mut self) -> &mut [LayerParams] {
        &mut self.encoders
    }

    pub fn decoders_mut(&mut self) -> &mut [LayerParams] {
        &mut self.decoders
    }

    pub fn decoders(&self) -> &[LayerParams] {
        &self.decoders
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.ensure_shape("forward_psi", &[1, self.spec.height, self.spec.width])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(x).map(|c| c.output)
    }

    pub fn forward_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        xs.par_iter().map(|x| self.forward(x)).collect()
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<PsiCache> {
        self.check_input(x)?;
        let pad = self.spec.kernel / 2;
        let mut h = x.clone();
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for p in &self.encoders {
            let (pre, conv) = conv2d_forward(&h, p.weight(), p.bias(), 1, pad)?;
            let (pooled, indices) = maxpool2_indices(&relu(&pre))?;
            encoders.push(EncoderCache { conv, pre, indices });
            h = pooled;
        }
        let mut decoders: Vec<DecoderCache> = Vec::with_capacity(self.decoders.len());
        let mut output = None;
        for i in (0..self.decoders.len()).rev() {
            let idx = &encoders[i].indices;
            let up = unpool_indices(&h, idx, idx.input_shape())?;
            let p = &self.decoders[i];
            let (pre, conv) = conv2d_forward(&up, p.weight(), p.bias(), 1, pad)?;
            if i == 0 {
                output = Some(sigmoid(&pre));
            } else {
                h = relu(&pre);
            }
            decoders.push(DecoderCache { conv, pre });
        }
        decoders.reverse();
        Ok(PsiCache {
            encoders,
            decoders,
            output: output.expect("at least one stage"),
        })
    }

    /// Parameter gradients given dLoss/dOutput.
    pub fn backward(&self, cache: PsiCache, grad_output: &Tensor) -> Result<PsiGrads> {
        grad_output.ensure_shape("psi_backward", cache.output.shape())?;
        let s = self.decoders.len();
        let mut dec_grads = vec![None; s];
        let mut g = sigmoid_backward(&cache.output, grad_output)?;
        for (i, dec) in cache.decoders.into_iter().enumerate() {
            if i > 0 {
                g = relu_backward(&dec.pre, &g)?;
            }
            let cg = conv2d_backward(dec.conv, self.decoders[i].weight(), &g, true)?;
            dec_grads[i] = Some(LayerGrads {
                weight: cg.weight,
                bias: cg.bias,
            });
            g = unpool_backward(&cg.input.expect("input grad requested"), &cache.encoders[i].indices)?;
        }
        let mut enc_grads = vec![None; s];
        for (i, enc) in cache.encoders.into_iter().enumerate().rev() {
            let up = maxpool2_backward(&g, &enc.indices)?;
            let gpre = relu_backward(&enc.pre, &up)?;
            let cg = conv2d_backward(enc.conv, self.encoders[i].weight(), &gpre, i > 0)?;
            enc_grads[i] = Some(LayerGrads {
                weight: cg.weight,
                bias: cg.bias,
            });
            if let Some(gi) = cg.input {
                g = gi;
            }
        }
        Ok(PsiGrads {
            encoders: enc_grads.into_iter().map(Option::unwrap).collect(),
            decoders: dec_grads.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn zero_grads(&self) -> PsiGrads {
        PsiGrads {
            encoders: self.encoders.iter().map(LayerGrads::zeros_like).collect(),
            decoders: self.decoders.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    /// Adam update; `weight_decay` adds `wd * w` to every weight gradient
    /// (biases are not decayed).
    pub fn apply_adam(&mut self, grads: &PsiGrads, cfg: &AdamConfig, weight_decay: f64) -> Result<()> {
        for (p, g) in self
            .encoders
            .iter_mut()
            .chain(self.decoders.iter_mut())
            .zip(grads.encoders.iter().chain(&grads.decoders))
        {
            let mut wg = g.weight.clone();
            if weight_decay != 0.0 {
                for (gv, wv) in wg.data_mut().iter_mut().zip(p.weight().data()) {
                    *gv += weight_decay * wv;
                }
            }
            p.weight.adam_step(&wg, cfg)?;
            p.bias.adam_step(&g.bias, cfg)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push(
            "meta.input_extent",
            false,
            Tensor::from_parts(vec![2], vec![self.spec.height as f64, self.spec.width as f64]),
        );
        for (prefix, layers) in [("enc", &self.encoders), ("dec", &self.decoders)] {
            for (i, p) in layers.iter().enumerate() {
                ck.push(format!("{prefix}{i}.weight"), false, p.weight().clone());
                ck.push(format!("{prefix}{i}.bias"), false, p.bias().clone());
            }
        }
        ck
    }

    /// Rebuilds the architecture from the stored shapes.
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let extent = ck.tensor("meta.input_extent", path)?;
        let &[h, w] = extent.data() else {
            return Err(DemeshError::format(path, "meta.input_extent must hold 2 values"));
        };
        let mut widths = Vec::new();
        let mut kernel = 0;
        while let Some(e) = ck.get(&format!("enc{}.weight", widths.len())) {
            let s = e.tensor.shape();
            if s.len() != 4 {
                return Err(DemeshError::format(path, "encoder weight must be rank 4"));
            }
            widths.push(s[0]);
            kernel = s[2];
        }
        let spec = ArchSpec {
            height: h as usize,
            width: w as usize,
            widths,
            kernel,
        };
        let mut net = InpaintNet::build(spec, 0).map_err(|e| DemeshError::format(path, e.to_string()))?;
        for (prefix, layers) in [("enc", &mut net.encoders), ("dec", &mut net.decoders)] {
            for (i, p) in layers.iter_mut().enumerate() {
                p.weight.set_value(ck.tensor(&format!("{prefix}{i}.weight"), path)?.clone())?;
                p.bias.set_value(ck.tensor(&format!("{prefix}{i}.bias"), path)?.clone())?;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        InpaintNet::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
