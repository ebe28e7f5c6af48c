//! Training, evaluation and the variant ablation.

pub mod config;

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::TrainConfig;

use crate::error::{DemeshError, Result};
use crate::facegen::{Dataset, Split, Triplet};
use crate::fcn::{InpaintNet, PsiGrads};
use crate::featnet::FeatureNet;
use crate::losses::{unified_loss, LossConfig, UnifiedLoss, Variant};
use crate::optim::AdamConfig;
use crate::rng::{derive_seed, seeded};
use crate::stn::align_face;
use crate::tensor::Tensor;
use crate::verifier::{baseline_rows, evaluate_images, feature_rmse, psnr, EvalReport, TestSet};

pub const LOG_HEADER: &str = "step\ttotal_loss\tpixel_loss\tfeature_loss\tlr\tval_psnr_db\tval_feature_rmse";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub pixel: f64,
    pub feature: f64,
    pub lr: f64,
}

/// Validation metrics measured after `step` updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValRecord {
    pub step: usize,
    pub psnr_db: f64,
    pub feature_rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValRecord>,
}

impl TrainLog {
    /// Mean total loss over a fraction of the run at its start or end.
    pub fn mean_total(&self, fraction: f64, from_end: bool) -> f64 {
        let n = ((self.steps.len() as f64 * fraction).ceil() as usize).clamp(1, self.steps.len().max(1));
        let slice = if from_end {
            &self.steps[self.steps.len() - n..]
        } else {
            &self.steps[..n]
        };
        slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.steps {
            let val = self.validation.iter().find(|v| v.step == r.step + 1);
            let (vp, vr) = match val {
                Some(v) => (
                    format!("{:.6}", v.psnr_db),
                    v.feature_rmse.map_or("-".to_string(), |x| format!("{x:.6}")),
                ),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:e}\t{vp}\t{vr}",
                r.step, r.total, r.pixel, r.feature, r.lr
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| DemeshError::io(path, e))
    }
}

/// Endless seeded stream of training batches: each epoch is a fresh
/// permutation, and batches run across epoch boundaries.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut b = BatchOrder {
            n,
            seed,
            epoch: 0,
            perm: Vec::new(),
            pos: 0,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut seeded(derive_seed(self.seed, "epoch", self.epoch)));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss and summed ψ gradient of one batch.
pub fn batch_gradient(
    net: &InpaintNet,
    batch: &[&Triplet],
    phi: Option<&FeatureNet>,
    loss: &LossConfig,
) -> Result<(UnifiedLoss, PsiGrads)> {
    let caches: Vec<_> = batch.par_iter().map(|t| net.forward_cached(&t.x)).collect::<Result<_>>()?;
    let stack = |f: &dyn Fn(&Triplet) -> &Tensor| Tensor::stack(&batch.iter().map(|t| f(t).clone()).collect::<Vec<_>>());
    let preds = Tensor::stack(&caches.iter().map(|c| c.output().clone()).collect::<Vec<_>>())?;
    let targets = stack(&|t| &t.y)?;
    let masks = stack(&|t| &t.mask)?;
    let eyes: Vec<_> = batch.iter().map(|t| t.eyes).collect();
    let l = unified_loss(&preds, &targets, &masks, &eyes, phi, loss)?;
    if !l.total.is_finite() {
        return Ok((l, net.zero_grads()));
    }
    let grads_per: Vec<Tensor> = l.grad.unstack();
    let per: Vec<PsiGrads> = caches
        .into_par_iter()
        .zip(grads_per.par_iter())
        .map(|(c, g)| net.backward(c, g))
        .collect::<Result<_>>()?;
    let mut iter = per.into_iter();
    let mut acc = iter.next().expect("non-empty batch");
    for g in iter {
        acc.add_assign(&g)?;
    }
    Ok((l, acc))
}

fn phi_digest(phi: &FeatureNet) -> u64 {
    let mut h = DefaultHasher::new();
    for t in phi.parameter_tensors() {
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Mean PSNR and, with φ, feature RMSE of `net` over a split.
pub fn split_metrics(net: &InpaintNet, ds: &Dataset, split: Split, phi: Option<&FeatureNet>) -> Result<Option<(f64, Option<f64>)>> {
    let triplets = ds.triplets(split);
    if triplets.is_empty() {
        return Ok(None);
    }
    let preds: Vec<Tensor> = triplets.par_iter().map(|t| net.forward(&t.x)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(&triplets) {
        total += psnr(p, &t.y, 1.0)?;
    }
    let mean_psnr = total / preds.len() as f64;
    let rmse = match phi {
        Some(phi) => {
            let crop = phi.spec().crop;
            let feats = |imgs: Vec<&Tensor>| -> Result<Vec<Tensor>> {
                imgs.par_iter()
                    .zip(triplets.par_iter())
                    .map(|(img, t)| phi.extract_feature(&align_face(img, &t.eyes, crop, crop)?.0))
                    .collect()
            };
            let fp = feats(preds.iter().collect())?;
            let ft = feats(triplets.iter().map(|t| &t.y).collect())?;
            Some(feature_rmse(&fp, &ft)?)
        }
        None => None,
    };
    Ok(Some((mean_psnr, rmse)))
}

/// Trains ψ from its seeded initialisation.
pub fn train(cfg: &TrainConfig, ds: &Dataset, phi: Option<&FeatureNet>) -> Result<(InpaintNet, TrainLog)> {
    cfg.validate()?;
    let net = InpaintNet::build(cfg.arch.clone(), cfg.init_seed)?;
    train_from(net, cfg, ds, phi)
}

/// Trains an existing ψ for `cfg.steps` updates.
pub fn train_from(mut net: InpaintNet, cfg: &TrainConfig, ds: &Dataset, phi: Option<&FeatureNet>) -> Result<(InpaintNet, TrainLog)> {
    cfg.validate()?;
    if cfg.loss.uses_features() && phi.is_none() {
        return Err(DemeshError::invalid("train", format!("variant {} needs φ", cfg.variant)));
    }
    let train_set = ds.triplets(Split::Train);
    if train_set.is_empty() {
        return Err(DemeshError::invalid("train", "dataset has no training triplets"));
    }
    if let Some((h, w)) = ds.extent() {
        if (h, w) != (cfg.arch.height, cfg.arch.width) {
            return Err(DemeshError::invalid(
                "train",
                format!("dataset extent {h}x{w} differs from model {}x{}", cfg.arch.height, cfg.arch.width),
            ));
        }
    }
    let digest = phi.map(phi_digest);
    let mut order = BatchOrder::new(train_set.len(), cfg.order_seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let idx = order.next_batch(cfg.batch_size);
        let batch: Vec<&Triplet> = idx.iter().map(|&i| train_set[i]).collect();
        let (l, grads) = batch_gradient(&net, &batch, phi, &cfg.loss)?;
        if !l.total.is_finite() || grads.tensors().iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(DemeshError::Diverged {
                step,
                lr,
                batch: batch.iter().map(|t| t.name()).collect(),
                msg: format!("loss {} (pixel {}, feature {})", l.total, l.pixel, l.feature),
            });
        }
        net.apply_adam(&grads, &AdamConfig::with_lr(lr), cfg.weight_decay)?;
        log.steps.push(StepRecord {
            step,
            total: l.total,
            pixel: l.pixel,
            feature: l.feature,
            lr,
        });
        let done = step + 1;
        if done == cfg.steps || (cfg.val_interval > 0 && done % cfg.val_interval == 0) {
            if let Some((p, r)) = split_metrics(&net, ds, Split::Val, phi)? {
                log.validation.push(ValRecord {
                    step: done,
                    psnr_db: p,
                    feature_rmse: r,
                });
            }
        }
    }
    if let (Some(phi), Some(d)) = (phi, digest) {
        if phi_digest(phi) != d {
            return Err(DemeshError::invalid("train", "φ parameters changed during training"));
        }
    }
    Ok((net, log))
}

/// Verification report for a trained ψ: its row plus Clear and Corrupted.
pub fn evaluate(name: &str, net: &InpaintNet, ds: &Dataset, phi: &FeatureNet) -> Result<EvalReport> {
    crate::verifier::run_protocol(name, |x| net.forward(x), ds, phi)
}

/// Ablation result with the artefacts of every variant.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub report: EvalReport,
    pub logs: Vec<(Variant, TrainLog)>,
    pub nets: Vec<(Variant, InpaintNet)>,
}

/// Trains every variant on the shared dataset, φ and seeds, and reports
/// them after the Clear and Corrupted rows. With `out_dir`, checkpoints,
/// logs and the report so far are written after each variant.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    ds: &Dataset,
    phi: &FeatureNet,
    out_dir: Option<&Path>,
) -> Result<AblationRun> {
    let set = TestSet::from_dataset(ds, Split::Test)?;
    let [clear, corrupted] = baseline_rows(&set, phi)?;
    let mut run = AblationRun {
        report: EvalReport {
            rows: vec![clear, corrupted],
        },
        logs: Vec::new(),
        nets: Vec::new(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| DemeshError::io(dir, e))?;
    }
    for &v in variants {
        let cfg = base.with_variant(v);
        let (net, log) = train(&cfg, ds, Some(phi))?;
        let recovered: Vec<Tensor> = set.triplets.par_iter().map(|t| net.forward(&t.x)).collect::<Result<_>>()?;
        run.report.rows.push(evaluate_images(v.name(), &recovered, &set, phi)?);
        if let Some(dir) = out_dir {
            net.save(&dir.join(format!("{v}.dmsh")))?;
            log.write(&dir.join(format!("{v}.log.tsv")))?;
            run.report.write(dir)?;
        }
        run.logs.push((v, log));
        run.nets.push((v, net));
    }
    if let Some(dir) = out_dir {
        run.report.write(dir)?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::{generate, DatasetConfig};
    use crate::fcn::ArchSpec;
    use crate::featnet::PhiSpec;

    fn toy_dataset() -> Dataset {
        generate(&DatasetConfig {
            identities: 6,
            per_identity: 3,
            seed: 4,
            split: "0.5/0.17/0.33".parse().unwrap(),
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    fn toy_cfg(v: Variant, steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            arch: ArchSpec {
                widths: vec![4, 8],
                ..ArchSpec::default()
            },
            val_interval: 2,
            ..TrainConfig::for_variant(v).with_steps(steps)
        }
    }

    #[test]
    fn batch_order_covers_each_epoch() {
        let mut b = BatchOrder::new(5, 9);
        let mut first: Vec<usize> = (0..5).flat_map(|_| b.next_batch(1)).collect();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let again: Vec<usize> = BatchOrder::new(5, 9).next_batch(7);
        assert_eq!(again.len(), 7);
    }

    #[test]
    fn training_is_deterministic_and_phi_stays_frozen() {
        let ds = toy_dataset();
        let phi = FeatureNet::fixed_random(PhiSpec::default(), 5).unwrap();
        let before = phi.clone();
        let cfg = toy_cfg(Variant::DeMeshNet, 3);
        let (a, la) = train(&cfg, &ds, Some(&phi)).unwrap();
        let (b, lb) = train(&cfg, &ds, Some(&phi)).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        assert_eq!(la, lb);
        assert_eq!(phi, before);
        assert_eq!(la.steps.len(), 3);
        assert!(la.steps.iter().all(|r| r.lr == cfg.lr_at(r.step)));
        assert_eq!(la.validation.iter().map(|v| v.step).collect::<Vec<_>>(), vec![2, 3]);
        assert!(la.to_tsv().starts_with(LOG_HEADER));
    }

    #[test]
    fn one_step_matches_hand_applied_adam() {
        let ds = toy_dataset();
        let cfg = toy_cfg(Variant::Fcnw, 1);
        let net0 = InpaintNet::build(cfg.arch.clone(), cfg.init_seed).unwrap();
        let train_set = ds.triplets(Split::Train);
        let idx = BatchOrder::new(train_set.len(), cfg.order_seed).next_batch(cfg.batch_size);
        let batch: Vec<&Triplet> = idx.iter().map(|&i| train_set[i]).collect();
        let (_, g) = batch_gradient(&net0, &batch, None, &cfg.loss).unwrap();
        let (net1, _) = train(&cfg, &ds, None).unwrap();
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, cfg.lr);
        let layers0 = net0.encoders().iter().chain(net0.decoders());
        let layers1 = net1.encoders().iter().chain(net1.decoders());
        let grads = g.encoders.iter().chain(&g.decoders);
        for ((p0, p1), gl) in layers0.zip(layers1).zip(grads) {
            for (is_weight, w0, w1, gr) in [
                (true, p0.weight(), p1.weight(), &gl.weight),
                (false, p0.bias(), p1.bias(), &gl.bias),
            ] {
                for k in 0..w0.len() {
                    let gk = gr.data()[k] + if is_weight { cfg.weight_decay * w0.data()[k] } else { 0.0 };
                    let m = (1.0 - b1) * gk / (1.0 - b1);
                    let v = (1.0 - b2) * gk * gk / (1.0 - b2);
                    let want = w0.data()[k] - lr * m / (v.sqrt() + eps);
                    assert!((w1.data()[k] - want).abs() < 1e-15, "{} vs {want}", w1.data()[k]);
                }
            }
        }
    }

    #[test]
    fn feature_variants_require_phi() {
        let ds = toy_dataset();
        assert!(train(&toy_cfg(Variant::DeMeshNet, 1), &ds, None).is_err());
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let ds = toy_dataset();
        let mut cfg = toy_cfg(Variant::Fcne, 2);
        cfg.loss.mask_weight = f64::MAX;
        cfg.loss.feature_weight = 0.0;
        match train(&cfg, &ds, None) {
            Err(DemeshError::Diverged { step, batch, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(batch.len(), 2);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ablation_has_seven_rows() {
        let ds = toy_dataset();
        let phi = FeatureNet::fixed_random(PhiSpec::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = run_ablation(&toy_cfg(Variant::DeMeshNet, 1), &Variant::ALL, &ds, &phi, Some(dir.path())).unwrap();
        let names: Vec<&str> = run.report.rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, vec!["Clear", "Corrupted", "FCNE", "FCNW", "FCNF", "DeMeshNet_E", "DeMeshNet"]);
        let clear = run.report.row("Clear").unwrap();
        assert_eq!((clear.psnr_db, clear.feature_rmse), (f64::INFINITY, 0.0));
        let tsv = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 8);
        assert!(dir.path().join("roc_DeMeshNet_E.tsv").exists());
        assert!(dir.path().join("FCNF.dmsh").exists());
        // the in-process row equals a file round trip through evaluate
        let net = InpaintNet::load(&dir.path().join("FCNW.dmsh")).unwrap();
        let rep = evaluate("FCNW", &net, &ds, &phi).unwrap();
        assert_eq!(rep.rows[0], *run.report.row("FCNW").unwrap());
    }
}
