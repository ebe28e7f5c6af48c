//! The frozen feature network φ: `(conv → mfm → pool) × k`, then a fully
//! connected layer and a final MFM producing the compact face feature.
//!
//! Two activations are exposed: the raw output of the second conv layer
//! (before its MFM) and the final feature vector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{DemeshError, Result};
use crate::facegen::{render_face, Identity, JitterRange, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::ops::{
    conv2d_backward, conv2d_forward, fully_connected, fully_connected_backward, maxpool2_backward, maxpool2_indices,
    mfm, mfm_backward, ConvCache, IndexMap,
};
use crate::optim::{AdamConfig, LayerGrads, LayerParams};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::stn::align_face;
use crate::tensor::Tensor;

/// A φ output vector, shape `[feature_width]`.
pub type FeatureVec = Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tap {
    EarlyConv,
    FinalFeature,
}

impl Tap {
    pub fn name(self) -> &'static str {
        match self {
            Tap::EarlyConv => "early_conv",
            Tap::FinalFeature => "final_feature",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = DemeshError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early_conv" => Ok(Tap::EarlyConv),
            "final_feature" => Ok(Tap::FinalFeature),
            other => Err(DemeshError::UnknownTap(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhiSpec {
    /// Square input crop extent.
    pub crop: usize,
    /// Conv output channels per stage (before MFM halves them).
    pub widths: Vec<usize>,
    /// Fully connected output before the final MFM.
    pub fc: usize,
    pub kernel: usize,
}

impl Default for PhiSpec {
    fn default() -> Self {
        PhiSpec {
            crop: 32,
            widths: vec![16, 32],
            fc: 128,
            kernel: 3,
        }
    }
}

impl PhiSpec {
    pub fn feature_width(&self) -> usize {
        self.fc / 2
    }

    /// Stage whose conv output is the early tap: the second, or the only one.
    pub fn early_stage(&self) -> usize {
        1.min(self.widths.len() - 1)
    }

    fn fc_inputs(&self) -> usize {
        let side = self.crop >> self.widths.len();
        self.widths.last().expect("validated") / 2 * side * side
    }

    pub fn early_shape(&self) -> [usize; 3] {
        let s = self.early_stage();
        let side = self.crop >> s;
        [self.widths[s], side, side]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DemeshError::invalid("PhiSpec", msg));
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0 || w % 2 != 0) {
            return bad("stage widths must be non-empty and even".into());
        }
        if self.fc == 0 || self.fc % 2 != 0 {
            return bad(format!("fc width {} must be positive and even", self.fc));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        let div = 1usize << self.widths.len();
        if self.crop == 0 || self.crop % div != 0 {
            return bad(format!("crop {} not divisible by {div}", self.crop));
        }
        Ok(())
    }

    fn stage_inputs(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            self.widths[i - 1] / 2
        }
    }
}

/// Weight and bias of a frozen layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    weight: Tensor,
    bias: Tensor,
}

impl FrozenLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        FrozenLayer { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// Both tapped activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiActivations {
    pub early: Tensor,
    pub feature: FeatureVec,
}

impl PhiActivations {
    pub fn tap(&self, tap: Tap) -> &Tensor {
        match tap {
            Tap::EarlyConv => &self.early,
            Tap::FinalFeature => &self.feature,
        }
    }
}

struct StageCache {
    conv: ConvCache,
    pre: Tensor,
    indices: IndexMap,
}

/// Everything backward needs from a forward pass.
pub struct PhiCache {
    stages: Vec<StageCache>,
    fc_in: Tensor,
    fc_pre: Tensor,
}

type LayerRefs<'a> = (&'a Tensor, &'a Tensor);

fn forward_impl(spec: &PhiSpec, convs: &[LayerRefs<'_>], fc: LayerRefs<'_>, x: &Tensor) -> Result<(PhiActivations, PhiCache)> {
    x.ensure_shape("phi_forward", &[1, spec.crop, spec.crop])?;
    let pad = spec.kernel / 2;
    let mut h = x.clone();
    let mut stages = Vec::with_capacity(convs.len());
    let mut early = None;
    for (i, &(w, b)) in convs.iter().enumerate() {
        let (pre, conv) = conv2d_forward(&h, w, b, 1, pad)?;
        if i == spec.early_stage() {
            early = Some(pre.clone());
        }
        let (pooled, indices) = maxpool2_indices(&mfm(&pre)?)?;
        stages.push(StageCache { conv, pre, indices });
        h = pooled;
    }
    let fc_pre = fully_connected(&h, fc.0, fc.1)?;
    let feature = mfm(&fc_pre)?;
    Ok((
        PhiActivations {
            early: early.expect("early stage exists"),
            feature,
        },
        PhiCache { stages, fc_in: h, fc_pre },
    ))
}

/// Returns the crop gradient (if requested) and, when `param_grads` is
/// set, the gradients of every conv layer followed by the fc layer.
fn backward_impl(
    spec: &PhiSpec,
    convs: &[LayerRefs<'_>],
    fc: LayerRefs<'_>,
    cache: PhiCache,
    grad_early: Option<&Tensor>,
    grad_feature: Option<&Tensor>,
    param_grads: bool,
) -> Result<(Option<Tensor>, Vec<LayerGrads>)> {
    let mut grads: Vec<Option<LayerGrads>> = vec![None; convs.len() + 1];
    let mut g: Option<Tensor> = None;
    if let Some(gf) = grad_feature {
        let gpre = mfm_backward(&cache.fc_pre, gf)?;
        let lg = fully_connected_backward(&cache.fc_in, fc.0, &gpre)?;
        grads[convs.len()] = Some(LayerGrads {
            weight: lg.weight,
            bias: lg.bias,
        });
        g = Some(lg.input);
    }
    let early = spec.early_stage();
    for (i, st) in cache.stages.into_iter().enumerate().rev() {
        let mut gpre = match g.take() {
            Some(gp) => Some(mfm_backward(&st.pre, &maxpool2_backward(&gp, &st.indices)?)?),
            None => None,
        };
        if i == early {
            if let Some(ge) = grad_early {
                match gpre.as_mut() {
                    Some(acc) => acc.add_assign(ge)?,
                    None => gpre = Some(ge.clone()),
                }
            }
        }
        let Some(gpre) = gpre else { continue };
        let cg = conv2d_backward(st.conv, convs[i].0, &gpre, true)?;
        if param_grads {
            grads[i] = Some(LayerGrads {
                weight: cg.weight,
                bias: cg.bias,
            });
        }
        g = cg.input;
    }
    let grads = if param_grads {
        grads
            .into_iter()
            .enumerate()
            .map(|(i, gr)| {
                gr.unwrap_or_else(|| {
                    let (w, b) = if i < convs.len() { convs[i] } else { fc };
                    LayerGrads {
                        weight: Tensor::zeros(w.shape()),
                        bias: Tensor::zeros(b.shape()),
                    }
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok((g, grads))
}

fn he(seed: u64, tag: &str, shape: &[usize], fan_in: usize) -> Tensor {
    normal_tensor(&mut seeded(derive_seed(seed, tag, 0)), shape, (2.0 / fan_in as f64).sqrt())
}

/// Freshly initialised trainable layers: every conv stage, then fc.
fn init_layers(spec: &PhiSpec, seed: u64) -> Vec<LayerParams> {
    let k = spec.kernel;
    let mut layers: Vec<LayerParams> = (0..spec.widths.len())
        .map(|i| {
            let (cin, cout) = (spec.stage_inputs(i), spec.widths[i]);
            LayerParams::new(
                he(seed, &format!("phi.conv{i}"), &[cout, cin, k, k], cin * k * k),
                Tensor::zeros(&[cout]),
            )
        })
        .collect();
    let n = spec.fc_inputs();
    layers.push(LayerParams::new(he(seed, "phi.fc", &[spec.fc, n], n), Tensor::zeros(&[spec.fc])));
    layers
}

/// The frozen φ. Parameters are reachable only by shared reference, so no
/// optimizer can bind to them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    spec: PhiSpec,
    convs: Vec<FrozenLayer>,
    fc: FrozenLayer,
}

impl FeatureNet {
    /// Assembles φ from explicit layers, checking every shape.
    pub fn from_layers(spec: PhiSpec, convs: Vec<FrozenLayer>, fc: FrozenLayer) -> Result<Self> {
        spec.validate()?;
        if convs.len() != spec.widths.len() {
            return Err(DemeshError::invalid(
                "FeatureNet",
                format!("{} conv layers for {} stages", convs.len(), spec.widths.len()),
            ));
        }
        let k = spec.kernel;
        for (i, l) in convs.iter().enumerate() {
            l.weight.ensure_shape("FeatureNet conv weight", &[spec.widths[i], spec.stage_inputs(i), k, k])?;
            l.bias.ensure_shape("FeatureNet conv bias", &[spec.widths[i]])?;
        }
        fc.weight.ensure_shape("FeatureNet fc weight", &[spec.fc, spec.fc_inputs()])?;
        fc.bias.ensure_shape("FeatureNet fc bias", &[spec.fc])?;
        Ok(FeatureNet { spec, convs, fc })
    }

    fn freeze(spec: PhiSpec, layers: Vec<LayerParams>) -> Result<Self> {
        let mut frozen: Vec<FrozenLayer> = layers
            .into_iter()
            .map(|l| FrozenLayer::new(l.weight().clone(), l.bias().clone()))
            .collect();
        let fc = frozen.pop().expect("fc layer");
        FeatureNet::from_layers(spec, frozen, fc)
    }

    /// Seeded He-initialised weights, frozen as-is.
    pub fn fixed_random(spec: PhiSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = init_layers(&spec, seed);
        FeatureNet::freeze(spec, layers)
    }

    pub fn spec(&self) -> &PhiSpec {
        &self.spec
    }

    pub fn convs(&self) -> &[FrozenLayer] {
        &self.convs
    }

    pub fn fc(&self) -> &FrozenLayer {
        &self.fc
    }

    pub fn feature_width(&self) -> usize {
        self.spec.feature_width()
    }

    pub fn parameter_tensors(&self) -> Vec<&Tensor> {
        self.convs
            .iter()
            .chain([&self.fc])
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn refs(&self) -> (Vec<LayerRefs<'_>>, LayerRefs<'_>) {
        (
            self.convs.iter().map(|l| (&l.weight, &l.bias)).collect(),
            (&self.fc.weight, &self.fc.bias),
        )
    }

    pub fn forward_cached(&self, crop: &Tensor) -> Result<(PhiActivations, PhiCache)> {
        let (convs, fc) = self.refs();
        forward_impl(&self.spec, &convs, fc, crop)
    }

    pub fn forward(&self, crop: &Tensor) -> Result<PhiActivations> {
        self.forward_cached(crop).map(|(a, _)| a)
    }

    /// Gradient w.r.t. the crop given gradients at either tap.
    pub fn backward(&self, cache: PhiCache, grad_early: Option<&Tensor>, grad_feature: Option<&Tensor>) -> Result<Tensor> {
        if let Some(g) = grad_early {
            g.ensure_shape("phi_backward", &self.spec.early_shape())?;
        }
        if let Some(g) = grad_feature {
            g.ensure_shape("phi_backward", &[self.feature_width()])?;
        }
        let (convs, fc) = self.refs();
        let (g, _) = backward_impl(&self.spec, &convs, fc, cache, grad_early, grad_feature, false)?;
        Ok(g.unwrap_or_else(|| Tensor::zeros(&[1, self.spec.crop, self.spec.crop])))
    }

    pub fn extract_feature(&self, crop: &Tensor) -> Result<FeatureVec> {
        Ok(self.forward(crop)?.feature)
    }

    pub fn tap_activation(&self, crop: &Tensor, tap: Tap) -> Result<Tensor> {
        let a = self.forward(crop)?;
        Ok(match tap {
            Tap::EarlyConv => a.early,
            Tap::FinalFeature => a.feature,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("meta.phi_crop", true, Tensor::from_parts(vec![1], vec![self.spec.crop as f64]));
        for (i, l) in self.convs.iter().enumerate() {
            ck.push(format!("phi.conv{i}.weight"), true, l.weight.clone());
            ck.push(format!("phi.conv{i}.bias"), true, l.bias.clone());
        }
        ck.push("phi.fc.weight", true, self.fc.weight.clone());
        ck.push("phi.fc.bias", true, self.fc.bias.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        if let Some(e) = ck.entries.iter().find(|e| e.name.starts_with("phi.") && !e.frozen) {
            return Err(DemeshError::format(path, format!("entry {} is not marked frozen", e.name)));
        }
        let crop = ck.tensor("meta.phi_crop", path)?.data().first().copied().unwrap_or(0.0) as usize;
        let get = |name: &str| ck.tensor(name, path).cloned();
        let mut convs = Vec::new();
        while ck.get(&format!("phi.conv{}.weight", convs.len())).is_some() {
            let i = convs.len();
            convs.push(FrozenLayer::new(get(&format!("phi.conv{i}.weight"))?, get(&format!("phi.conv{i}.bias"))?));
        }
        let fc = FrozenLayer::new(get("phi.fc.weight")?, get("phi.fc.bias")?);
        let spec = PhiSpec {
            crop,
            widths: convs.iter().map(|l| l.weight.shape()[0]).collect(),
            fc: fc.weight.shape()[0],
            kernel: convs.first().map_or(0, |l| l.weight.shape().get(2).copied().unwrap_or(0)),
        };
        FeatureNet::from_layers(spec, convs, fc).map_err(|e| DemeshError::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureNet::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Surrogate pretraining: identity classification on aligned synthetic
/// renders, with a linear softmax head that is discarded afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            identities: 32,
            per_identity: 200,
            epochs: 3,
            batch: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainStats {
    /// Training-set top-1 identity accuracy after the last epoch.
    pub accuracy: f64,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiMode {
    Pretrain,
    FixedRandom,
}

impl FromStr for PhiMode {
    type Err = DemeshError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(PhiMode::Pretrain),
            "fixed_random" => Ok(PhiMode::FixedRandom),
            other => Err(DemeshError::invalid("phi mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Aligned clear crops of the pretraining identities. Identity seeds live
/// in their own namespace so they never coincide with dataset identities.
pub fn pretrain_crops(spec: &PhiSpec, cfg: &PretrainConfig, seed: u64) -> Result<Vec<(Tensor, usize)>> {
    let per_id: Vec<Vec<(Tensor, usize)>> = (0..cfg.identities)
        .into_par_iter()
        .map(|k| {
            let id = Identity::from_seed(derive_seed(seed, "phi-identity", k as u64));
            (0..cfg.per_identity)
                .map(|j| {
                    // alternate the mild and the harder jitter
                    let range = if j % 2 == 0 { JitterRange::NORMAL } else { JitterRange::DAILY };
                    let r = render_face(&id, derive_seed(id.seed, "phi-render", j as u64), &range, DEFAULT_HEIGHT, DEFAULT_WIDTH)?;
                    let (crop, _) = align_face(&r.image, &r.eyes, spec.crop, spec.crop)?;
                    Ok((crop, k))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_id.into_iter().flatten().collect())
}

fn softmax_xent(logits: &Tensor, label: usize) -> (f64, Tensor, usize) {
    let z = logits.data();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let loss = -(e[label] / s).ln();
    let mut g: Vec<f64> = e.iter().map(|v| v / s).collect();
    g[label] -= 1.0;
    let argmax = z
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    (loss, Tensor::from_parts(vec![z.len()], g), argmax)
}

pub fn pretrain(spec: PhiSpec, cfg: &PretrainConfig, seed: u64) -> Result<(FeatureNet, PretrainStats)> {
    spec.validate()?;
    if cfg.identities < 2 || cfg.per_identity == 0 {
        return Err(DemeshError::invalid(
            "build_phi",
            format!(
                "pretraining needs at least 2 identities with samples, got {} x {}",
                cfg.identities, cfg.per_identity
            ),
        ));
    }
    if cfg.batch == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(DemeshError::invalid("build_phi", "batch, epochs and lr must be positive"));
    }
    let data = pretrain_crops(&spec, cfg, seed)?;
    let mut layers = init_layers(&spec, seed);
    let fw = spec.feature_width();
    let mut head = LayerParams::new(
        he(seed, "phi.head", &[cfg.identities, fw], fw),
        Tensor::zeros(&[cfg.identities]),
    );
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut correct = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive_seed(seed, "phi-order", epoch as u64)));
        let mut total = 0.0;
        correct = 0;
        for batch in order.chunks(cfg.batch) {
            let convs: Vec<LayerRefs<'_>> = layers[..layers.len() - 1].iter().map(|l| (l.weight(), l.bias())).collect();
            let fcl = layers.last().expect("fc");
            let fc = (fcl.weight(), fcl.bias());
            let per: Vec<(f64, bool, Vec<LayerGrads>, LayerGrads)> = batch
                .par_iter()
                .map(|&i| {
                    let (x, label) = &data[i];
                    let (act, cache) = forward_impl(&spec, &convs, fc, x)?;
                    let logits = fully_connected(&act.feature, head.weight(), head.bias())?;
                    let (loss, dlogits, pred) = softmax_xent(&logits, *label);
                    let hg = fully_connected_backward(&act.feature, head.weight(), &dlogits)?;
                    let (_, grads) = backward_impl(&spec, &convs, fc, cache, None, Some(&hg.input), true)?;
                    Ok((
                        loss,
                        pred == *label,
                        grads,
                        LayerGrads {
                            weight: hg.weight,
                            bias: hg.bias,
                        },
                    ))
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut iter = per.into_iter();
            let (l0, c0, mut acc, mut hacc) = iter.next().expect("non-empty batch");
            total += l0;
            correct += usize::from(c0);
            for (l, c, g, hg) in iter {
                total += l;
                correct += usize::from(c);
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
                hacc.add_assign(&hg)?;
            }
            for (p, g) in layers.iter_mut().zip(&acc) {
                p.adam_step(&g.scale(inv), &adam)?;
            }
            head.adam_step(&hacc.scale(inv), &adam)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(DemeshError::NonFinite {
                op: "build_phi",
                context: format!(" (pretraining loss in epoch {epoch})"),
            });
        }
        epoch_losses.push(mean);
    }
    let stats = PretrainStats {
        accuracy: correct as f64 / data.len() as f64,
        first_epoch_loss: epoch_losses[0],
        last_epoch_loss: *epoch_losses.last().expect("at least one epoch"),
    };
    Ok((FeatureNet::freeze(spec, layers)?, stats))
}

/// Builds φ in the requested mode.
pub fn build_phi(mode: PhiMode, seed: u64, spec: PhiSpec, cfg: &PretrainConfig) -> Result<FeatureNet> {
    match mode {
        PhiMode::FixedRandom => FeatureNet::fixed_random(spec, seed),
        PhiMode::Pretrain => pretrain(spec, cfg, seed).map(|(net, _)| net),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::normal_tensor;

    fn tiny_spec() -> PhiSpec {
        PhiSpec {
            crop: 8,
            widths: vec![4, 6],
            fc: 6,
            kernel: 3,
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let net = FeatureNet::fixed_random(PhiSpec::default(), 3).unwrap();
        let x = normal_tensor(&mut seeded(1), &[1, 32, 32], 0.3);
        let a = net.forward(&x).unwrap();
        assert_eq!(a.feature.shape(), &[64]);
        assert_eq!(a.early.shape(), &[32, 16, 16]);
        let again = FeatureNet::fixed_random(PhiSpec::default(), 3).unwrap().forward(&x).unwrap();
        assert_eq!(a, again);
        assert_eq!(net.extract_feature(&x).unwrap(), net.tap_activation(&x, Tap::FinalFeature).unwrap());
        assert!(net.extract_feature(&Tensor::zeros(&[1, 32, 32])).unwrap().data().iter().all(|v| v.is_finite()));
        assert!(net.extract_feature(&Tensor::zeros(&[1, 16, 16])).is_err());
    }

    #[test]
    fn zero_image_early_tap_is_bias() {
        let net = FeatureNet::fixed_random(tiny_spec(), 4).unwrap();
        // conv0 on zeros gives its bias (0); after MFM/pool the second conv sees zeros too
        let early = net.tap_activation(&Tensor::zeros(&[1, 8, 8]), Tap::EarlyConv).unwrap();
        let b = net.convs()[1].bias().data();
        for (i, v) in early.data().iter().enumerate() {
            assert_eq!(*v, b[i / 16]);
        }
    }

    #[test]
    fn tap_names() {
        assert_eq!("early_conv".parse::<Tap>().unwrap(), Tap::EarlyConv);
        assert!(matches!("conv9".parse::<Tap>(), Err(DemeshError::UnknownTap(_))));
    }

    #[test]
    fn tap_gradients_match_finite_differences() {
        let net = FeatureNet::fixed_random(tiny_spec(), 9).unwrap();
        let mut rng = seeded(10);
        let x = normal_tensor(&mut rng, &[1, 8, 8], 1.0);
        let pe = normal_tensor(&mut rng, &net.spec().early_shape(), 1.0);
        let pf = normal_tensor(&mut rng, &[3], 1.0);
        let f = |t: &Tensor| {
            let (a, cache) = net.forward_cached(t)?;
            let v = a.early.dot(&pe)? + a.feature.dot(&pf)?;
            Ok((v, net.backward(cache, Some(&pe), Some(&pf))?))
        };
        let rep = grad_check(f, &x, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
        let sum_final = |t: &Tensor| {
            let (a, cache) = net.forward_cached(t)?;
            Ok((a.feature.sum(), net.backward(cache, None, Some(&Tensor::filled(&[3], 1.0)))?))
        };
        assert!(grad_check(sum_final, &x, 1e-4).unwrap().passed);
    }

    #[test]
    fn checkpoint_round_trip_keeps_frozen_flags() {
        let net = FeatureNet::fixed_random(tiny_spec(), 2).unwrap();
        let ck = net.to_checkpoint();
        assert!(ck.entries.iter().all(|e| e.frozen));
        let back = FeatureNet::from_checkpoint(&ck, Path::new("phi")).unwrap();
        assert_eq!(back, net);
        let mut thawed = ck.clone();
        thawed.entries[1].frozen = false;
        assert!(FeatureNet::from_checkpoint(&thawed, Path::new("phi")).is_err());
    }

    #[test]
    fn too_few_identities_is_an_error() {
        let cfg = PretrainConfig {
            identities: 1,
            ..PretrainConfig::default()
        };
        assert!(pretrain(PhiSpec::default(), &cfg, 0).is_err());
    }

    #[test]
    fn small_pretrain_beats_chance() {
        let cfg = PretrainConfig {
            identities: 8,
            per_identity: 24,
            epochs: 4,
            batch: 8,
            lr: 1e-3,
        };
        let (net, stats) = pretrain(PhiSpec::default(), &cfg, 1).unwrap();
        assert!(stats.accuracy > 2.0 / 8.0, "{stats:?}");
        assert!(stats.last_epoch_loss < stats.first_epoch_loss);
        let (again, _) = pretrain(PhiSpec::default(), &cfg, 1).unwrap();
        assert_eq!(net, again);
    }
}
