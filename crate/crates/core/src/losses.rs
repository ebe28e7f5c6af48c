//! Pixel, reverse-Huber feature, and unified losses.
//!
//! Images arrive either as one `[1, H, W]` sample or as a `[B, 1, H, W]`
//! batch. Every loss sums over elements and averages over the batch.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{DemeshError, Result};
use crate::featnet::{FeatureNet, PhiCache, Tap};
use crate::facegen::mesh::ensure_binary;
use crate::stn::{alignment_grid, bilinear_backward, bilinear_sample, resize_grid, Landmarks, SampleGrid};
use crate::tensor::Tensor;

/// Floor for the dynamic threshold when a batch has no residual at all.
pub const C_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// Elementwise penalty applied to feature residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeaturePenalty {
    ReverseHuber,
    Squared,
}

/// The five model variants of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Fcne,
    Fcnw,
    Fcnf,
    DeMeshNetE,
    DeMeshNet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Fcne,
        Variant::Fcnw,
        Variant::Fcnf,
        Variant::DeMeshNetE,
        Variant::DeMeshNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcne => "FCNE",
            Variant::Fcnw => "FCNW",
            Variant::Fcnf => "FCNF",
            Variant::DeMeshNetE => "DeMeshNet_E",
            Variant::DeMeshNet => "DeMeshNet",
        }
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Variant::Fcnf | Variant::DeMeshNetE | Variant::DeMeshNet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DemeshError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DemeshError::invalid("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the masked pixel term; the same knob appears as λ and λ1.
    pub mask_weight: f64,
    /// Weight of the feature term (λ2).
    pub feature_weight: f64,
    /// Dynamic threshold as a fraction of the batch max residual.
    pub c_fraction: f64,
    pub taps: Vec<Tap>,
    pub penalty: FeaturePenalty,
    /// Feature term on STN-aligned crops; otherwise the whole image is
    /// resized to φ's input.
    pub aligned: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::for_variant(Variant::DeMeshNet)
    }
}

impl LossConfig {
    pub fn for_variant(v: Variant) -> LossConfig {
        let full = LossConfig {
            mask_weight: 1.0,
            feature_weight: 1.0,
            c_fraction: 0.2,
            taps: vec![Tap::EarlyConv, Tap::FinalFeature],
            penalty: FeaturePenalty::ReverseHuber,
            aligned: true,
        };
        match v {
            Variant::Fcne => LossConfig {
                mask_weight: 0.0,
                feature_weight: 0.0,
                ..full
            },
            Variant::Fcnw => LossConfig {
                feature_weight: 0.0,
                ..full
            },
            Variant::Fcnf => LossConfig {
                taps: vec![Tap::EarlyConv],
                aligned: false,
                ..full
            },
            Variant::DeMeshNetE => LossConfig {
                penalty: FeaturePenalty::Squared,
                ..full
            },
            Variant::DeMeshNet => full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.mask_weight) || !ok(self.feature_weight) {
            return Err(DemeshError::invalid("LossConfig", "loss weights must be finite and non-negative"));
        }
        if !(self.c_fraction > 0.0 && self.c_fraction <= 1.0) {
            return Err(DemeshError::invalid(
                "LossConfig",
                format!("c fraction {} outside (0, 1]", self.c_fraction),
            ));
        }
        if self.feature_weight > 0.0 && self.taps.is_empty() {
            return Err(DemeshError::invalid("LossConfig", "feature term needs at least one tap"));
        }
        Ok(())
    }

    pub fn uses_features(&self) -> bool {
        self.feature_weight > 0.0 && !self.taps.is_empty()
    }
}

/// `(batch, per-sample shape)` of a single image or a batch.
fn batch_layout(t: &Tensor, op: &'static str) -> Result<(usize, Vec<usize>)> {
    match t.shape() {
        [_, _, _] => Ok((1, t.shape().to_vec())),
        [b, c, h, w] if *b > 0 => Ok((*b, vec![*c, *h, *w])),
        s => Err(DemeshError::invalid(op, format!("expected [C,H,W] or [B,C,H,W], found {s:?}"))),
    }
}

/// `‖p − t‖² + λ‖M ⊙ (p − t)‖²`, summed per sample and averaged over the batch.
pub fn pixel_loss(pred: &Tensor, target: &Tensor, mask: &Tensor, lambda: f64) -> Result<LossValue> {
    target.ensure_shape("pixel_loss", pred.shape())?;
    mask.ensure_shape("pixel_loss", pred.shape())?;
    ensure_binary(mask, "pixel_loss")?;
    let (b, _) = batch_layout(pred, "pixel_loss")?;
    let inv = 1.0 / b as f64;
    let mut value = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .map(|((&p, &t), &m)| {
            let r = p - t;
            let w = 1.0 + lambda * m;
            value += w * r * r;
            2.0 * w * r * inv
        })
        .collect();
    Ok(LossValue {
        value: value * inv,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// `fraction · max |r|`, floored at [`C_FLOOR`].
pub fn dynamic_c(residual: &Tensor, fraction: f64) -> f64 {
    (fraction * residual.max_abs()).max(C_FLOOR)
}

/// Reverse Huber: `|r|` beyond `c`, `(r² + c²) / 2c` inside. The gradient
/// is with respect to `r`, holding `c` fixed.
pub fn reverse_huber(residual: &Tensor, c: f64) -> Result<LossValue> {
    if !(c > 0.0) {
        return Err(DemeshError::invalid("reverse_huber", format!("threshold c = {c} must be positive")));
    }
    let (value, grad) = penalize(residual, |r| berhu(r, c));
    Ok(LossValue { value, grad })
}

/// Value and derivative of the reverse Huber penalty at one residual.
pub fn berhu(r: f64, c: f64) -> (f64, f64) {
    if r.abs() > c {
        (r.abs(), r.signum())
    } else {
        ((r * r + c * c) / (2.0 * c), r / c)
    }
}

/// Sums the values of `f` over the tensor and collects its derivatives.
fn penalize(r: &Tensor, f: impl Fn(f64) -> (f64, f64)) -> (f64, Tensor) {
    let mut value = 0.0;
    let grad = r
        .data()
        .iter()
        .map(|&x| {
            let (v, g) = f(x);
            value += v;
            g
        })
        .collect();
    (value, Tensor::from_parts(r.shape().to_vec(), grad))
}

fn penalty(p: FeaturePenalty, r: f64, c: f64) -> (f64, f64) {
    match p {
        FeaturePenalty::ReverseHuber => berhu(r, c),
        FeaturePenalty::Squared => (r * r, 2.0 * r),
    }
}

/// Feature loss with the thresholds used for each tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLoss {
    pub loss: LossValue,
    pub thresholds: Vec<f64>,
}

/// Sampling grid from an image into φ's input for the configured mode.
pub fn feature_grid(eyes: &Landmarks, height: usize, width: usize, crop: usize, aligned: bool) -> Result<SampleGrid> {
    if aligned {
        alignment_grid(eyes, height, width, crop, crop)
    } else {
        resize_grid(crop, crop)
    }
}

struct SampleState {
    grid: SampleGrid,
    cache: PhiCache,
    residuals: Vec<Tensor>,
}

/// Reverse-Huber (or squared) penalty on φ activation residuals between
/// the prediction and the target, routed back to the prediction image
/// through φ and the sampler. `fixed_c` supplies one threshold per tap
/// instead of the dynamic batch statistic.
pub fn feature_loss_with(
    pred: &Tensor,
    target: &Tensor,
    eyes: &[Landmarks],
    phi: &FeatureNet,
    cfg: &LossConfig,
    fixed_c: Option<&[f64]>,
) -> Result<FeatureLoss> {
    target.ensure_shape("feature_loss", pred.shape())?;
    let (b, item) = batch_layout(pred, "feature_loss")?;
    if eyes.len() != b {
        return Err(DemeshError::invalid(
            "feature_loss",
            format!("{} landmark pairs for a batch of {b}", eyes.len()),
        ));
    }
    if item[0] != 1 {
        return Err(DemeshError::invalid("feature_loss", "images must be single-channel"));
    }
    if let Some(cs) = fixed_c {
        if cs.len() != cfg.taps.len() {
            return Err(DemeshError::invalid("feature_loss", "one threshold per tap required"));
        }
    }
    let (h, w) = (item[1], item[2]);
    let crop = phi.spec().crop;
    let plane = h * w;
    let sample = |t: &Tensor, i: usize| Tensor::new(item.clone(), t.data()[i * plane..(i + 1) * plane].to_vec());

    let states: Vec<SampleState> = (0..b)
        .into_par_iter()
        .map(|i| {
            let grid = feature_grid(&eyes[i], h, w, crop, cfg.aligned)?;
            let (act_p, cache) = phi.forward_cached(&bilinear_sample(&sample(pred, i)?, &grid)?)?;
            let act_t = phi.forward(&bilinear_sample(&sample(target, i)?, &grid)?)?;
            let residuals = cfg
                .taps
                .iter()
                .map(|&tap| act_p.tap(tap).sub(act_t.tap(tap)))
                .collect::<Result<_>>()?;
            Ok(SampleState { grid, cache, residuals })
        })
        .collect::<Result<_>>()?;

    let thresholds: Vec<f64> = match fixed_c {
        Some(cs) => cs.to_vec(),
        None => (0..cfg.taps.len())
            .map(|k| {
                let m = states.iter().map(|s| s.residuals[k].max_abs()).fold(0.0, f64::max);
                (cfg.c_fraction * m).max(C_FLOOR)
            })
            .collect(),
    };
    let inv = 1.0 / b as f64;
    let per: Vec<(f64, Tensor)> = states
        .into_par_iter()
        .map(|st| {
            let mut value = 0.0;
            let mut grads: Vec<Tensor> = Vec::with_capacity(cfg.taps.len());
            for (k, r) in st.residuals.iter().enumerate() {
                let c = thresholds[k];
                let (v, g) = penalize(r, |x| {
                    let (v, g) = penalty(cfg.penalty, x, c);
                    (v, g * inv)
                });
                value += v;
                grads.push(g);
            }
            let pick = |tap: Tap| cfg.taps.iter().position(|&t| t == tap).map(|k| &grads[k]);
            let g_crop = phi.backward(st.cache, pick(Tap::EarlyConv), pick(Tap::FinalFeature))?;
            let g_img = bilinear_backward(&g_crop, &st.grid, &item)?;
            Ok((value, g_img))
        })
        .collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (v, g) in per {
        value += v;
        grad.extend_from_slice(g.data());
    }
    Ok(FeatureLoss {
        loss: LossValue {
            value: value * inv,
            grad: Tensor::new(pred.shape().to_vec(), grad)?,
        },
        thresholds,
    })
}

pub fn feature_loss(pred: &Tensor, target: &Tensor, eyes: &[Landmarks], phi: &FeatureNet, cfg: &LossConfig) -> Result<LossValue> {
    feature_loss_with(pred, target, eyes, phi, cfg, None).map(|f| f.loss)
}

/// The unified objective with its parts kept for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedLoss {
    pub total: f64,
    pub pixel: f64,
    /// Unweighted feature loss; `total = pixel + λ2 · feature`.
    pub feature: f64,
    pub grad: Tensor,
    pub thresholds: Vec<f64>,
}

pub fn unified_loss_with(
    pred: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    eyes: &[Landmarks],
    phi: Option<&FeatureNet>,
    cfg: &LossConfig,
    fixed_c: Option<&[f64]>,
) -> Result<UnifiedLoss> {
    cfg.validate()?;
    let px = pixel_loss(pred, target, mask, cfg.mask_weight)?;
    if !cfg.uses_features() {
        return Ok(UnifiedLoss {
            total: px.value,
            pixel: px.value,
            feature: 0.0,
            grad: px.grad,
            thresholds: Vec::new(),
        });
    }
    let phi = phi.ok_or_else(|| DemeshError::invalid("unified_loss", "feature term requires φ"))?;
    let fl = feature_loss_with(pred, target, eyes, phi, cfg, fixed_c)?;
    let mut grad = px.grad;
    for (g, f) in grad.data_mut().iter_mut().zip(fl.loss.grad.data()) {
        *g += cfg.feature_weight * f;
    }
    Ok(UnifiedLoss {
        total: px.value + cfg.feature_weight * fl.loss.value,
        pixel: px.value,
        feature: fl.loss.value,
        grad,
        thresholds: fl.thresholds,
    })
}

pub fn unified_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    eyes: &[Landmarks],
    phi: Option<&FeatureNet>,
    cfg: &LossConfig,
) -> Result<UnifiedLoss> {
    unified_loss_with(pred, target, mask, eyes, phi, cfg, None)
}
