//! Verification protocol and image metrics.
//!
//! Every test identity contributes one ID photo (its first MeshFace,
//! recovered by the model under test) and one daily photo. All `N²`
//! (ID, daily) pairs are scored by cosine similarity; the `N` same-identity
//! pairs are genuine and the rest impostors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{DemeshError, Result};
use crate::facegen::{Dataset, Split, Triplet};
use crate::featnet::{FeatureNet, FeatureVec};
use crate::stn::{align_face, Landmarks};
use crate::tensor::Tensor;

pub const FPR_TARGETS: [f64; 3] = [1e-2, 1e-3, 1e-4];
pub const REPORT_HEADER: &str = "model\ttpr_fpr_1e2\ttpr_fpr_1e3\ttpr_fpr_1e4\tpsnr_db\tfeature_rmse";
pub const ROC_HEADER: &str = "fpr\ttpr\tthreshold";
pub const CLEAR: &str = "Clear";
pub const CORRUPTED: &str = "Corrupted";

pub fn cosine_similarity(a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
    b.ensure_shape("cosine_similarity", a.shape())?;
    let (na, nb) = (a.dot(a)?.sqrt(), b.dot(b)?.sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(DemeshError::invalid("cosine_similarity", "zero-norm feature vector"));
    }
    Ok((a.dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Scores every gallery feature against every probe; pair `(i, i)` is genuine.
pub fn score_pairs(gallery: &[FeatureVec], probes: &[FeatureVec]) -> Result<ScoreSet> {
    if gallery.len() != probes.len() {
        return Err(DemeshError::invalid(
            "score_pairs",
            format!("{} gallery vs {} probe features", gallery.len(), probes.len()),
        ));
    }
    let rows: Vec<Vec<f64>> = gallery
        .par_iter()
        .map(|g| probes.iter().map(|p| cosine_similarity(g, p)).collect())
        .collect::<Result<_>>()?;
    let mut s = ScoreSet::default();
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            if i == j {
                s.genuine.push(v);
            } else {
                s.impostor.push(v);
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Accept when `score >= threshold`; the first point uses `+inf`.
    pub threshold: f64,
}

/// Step ROC over every distinct score, starting from `(0, 0)`.
pub fn roc(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(DemeshError::invalid("roc", "both genuine and impostor scores are required"));
    }
    if scores.genuine.iter().chain(&scores.impostor).any(|v| !v.is_finite()) {
        return Err(DemeshError::NonFinite {
            op: "roc",
            context: " in scores".into(),
        });
    }
    let mut g = scores.genuine.clone();
    let mut im = scores.impostor.clone();
    let desc = |a: &f64, b: &f64| b.total_cmp(a);
    g.sort_by(desc);
    im.sort_by(desc);
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(desc);
    thresholds.dedup();
    let (ng, ni) = (g.len() as f64, im.len() as f64);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut gi, mut ii) = (0, 0);
    for t in thresholds {
        while gi < g.len() && g[gi] >= t {
            gi += 1;
        }
        while ii < im.len() && im[ii] >= t {
            ii += 1;
        }
        points.push(RocPoint {
            fpr: ii as f64 / ni,
            tpr: gi as f64 / ng,
            threshold: t,
        });
    }
    Ok(points)
}

/// Highest TPR among points whose FPR does not exceed `target`.
pub fn tpr_at_fpr(points: &[RocPoint], target: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fpr <= target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// Peak signal-to-noise ratio in dB; identical images give `+inf`.
pub fn psnr(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<f64> {
    target.ensure_shape("psnr", pred.shape())?;
    if pred.is_empty() {
        return Err(DemeshError::invalid("psnr", "empty images"));
    }
    let mse = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    })
}

/// Mean Euclidean distance between paired feature vectors.
pub fn feature_rmse(preds: &[FeatureVec], targets: &[FeatureVec]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(DemeshError::invalid(
            "feature_rmse",
            format!("{} predictions vs {} targets", preds.len(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        total += p.sub(t)?.dot(&p.sub(t)?)?.sqrt();
    }
    Ok(total / preds.len() as f64)
}

/// One row of the report plus its ROC.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub model: String,
    pub tpr: [f64; 3],
    pub psnr_db: f64,
    pub feature_rmse: f64,
    pub roc: Vec<RocPoint>,
}

impl ModelRow {
    pub fn tpr_at(&self, target: f64) -> Option<f64> {
        FPR_TARGETS.iter().position(|&t| t == target).map(|i| self.tpr[i])
    }
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn parse_num(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ModelRow>,
}

impl EvalReport {
    pub fn row(&self, model: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.model,
                fmt_num(r.tpr[0]),
                fmt_num(r.tpr[1]),
                fmt_num(r.tpr[2]),
                fmt_num(r.psnr_db),
                fmt_num(r.feature_rmse)
            );
        }
        out
    }

    /// Parses the report TSV; ROC lists are left empty.
    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(DemeshError::format(path, "missing report header"));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let cols: Vec<&str> = line.split('\t').collect();
                let nums: Option<Vec<f64>> = cols.iter().skip(1).map(|c| parse_num(c)).collect();
                match (cols.len(), nums) {
                    (6, Some(n)) => Ok(ModelRow {
                        model: cols[0].to_string(),
                        tpr: [n[0], n[1], n[2]],
                        psnr_db: n[3],
                        feature_rmse: n[4],
                        roc: Vec::new(),
                    }),
                    _ => Err(DemeshError::format(path, format!("malformed report row `{line}`"))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport { rows })
    }

    /// Writes `report.tsv` and one `roc_<model>.tsv` per row into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| DemeshError::io(dir, e))?;
        for r in &self.rows {
            write_roc(&dir.join(format!("roc_{}.tsv", r.model)), &r.roc)?;
        }
        let path = dir.join("report.tsv");
        fs::write(&path, self.to_tsv()).map_err(|e| DemeshError::io(&path, e))?;
        Ok(path)
    }
}

pub fn roc_tsv(points: &[RocPoint]) -> String {
    let mut out = String::from(ROC_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{}", fmt_num(p.fpr), fmt_num(p.tpr), fmt_num(p.threshold));
    }
    out
}

pub fn write_roc(path: &Path, points: &[RocPoint]) -> Result<()> {
    fs::write(path, roc_tsv(points)).map_err(|e| DemeshError::io(path, e))
}

pub fn read_roc(path: &Path) -> Result<Vec<RocPoint>> {
    let text = fs::read_to_string(path).map_err(|e| DemeshError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(ROC_HEADER) {
        return Err(DemeshError::format(path, "missing ROC header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let v: Option<Vec<f64>> = line.split('\t').map(parse_num).collect();
            match v.as_deref() {
                Some(&[fpr, tpr, threshold]) => Ok(RocPoint { fpr, tpr, threshold }),
                _ => Err(DemeshError::format(path, format!("malformed ROC row `{line}`"))),
            }
        })
        .collect()
}

/// The test material: every test triplet, and per identity its ID
/// MeshFace (first sample) and daily photo.
#[derive(Debug, Clone)]
pub struct TestSet<'a> {
    pub triplets: Vec<&'a Triplet>,
    /// Index into `triplets` of each identity's ID photo.
    pub id_photos: Vec<usize>,
    pub daily: Vec<(&'a Tensor, Landmarks)>,
}

impl<'a> TestSet<'a> {
    pub fn from_dataset(ds: &'a Dataset, split: Split) -> Result<Self> {
        let mut set = TestSet {
            triplets: Vec::new(),
            id_photos: Vec::new(),
            daily: Vec::new(),
        };
        for rec in ds.split(split) {
            if rec.samples.is_empty() {
                continue;
            }
            set.id_photos.push(set.triplets.len());
            set.triplets.extend(rec.samples.iter());
            set.daily.push((&rec.daily.image, rec.daily.eyes));
        }
        if set.id_photos.len() < 2 {
            return Err(DemeshError::invalid(
                "run_protocol",
                format!("{split} split needs at least two identities, found {}", set.id_photos.len()),
            ));
        }
        Ok(set)
    }
}

fn features(phi: &FeatureNet, items: &[(&Tensor, Landmarks)]) -> Result<Vec<FeatureVec>> {
    let crop = phi.spec().crop;
    items
        .par_iter()
        .map(|(img, eyes)| phi.extract_feature(&align_face(img, eyes, crop, crop)?.0))
        .collect()
}

/// Metrics of one set of recovered images (aligned with `set.triplets`).
pub fn evaluate_images(model: &str, recovered: &[Tensor], set: &TestSet<'_>, phi: &FeatureNet) -> Result<ModelRow> {
    if recovered.len() != set.triplets.len() {
        return Err(DemeshError::invalid(
            "run_protocol",
            format!("{} recovered images for {} triplets", recovered.len(), set.triplets.len()),
        ));
    }
    let rec_items: Vec<(&Tensor, Landmarks)> = recovered.iter().zip(&set.triplets).map(|(r, t)| (r, t.eyes)).collect();
    let truth_items: Vec<(&Tensor, Landmarks)> = set.triplets.iter().map(|t| (&t.y, t.eyes)).collect();
    let rec_feats = features(phi, &rec_items)?;
    let truth_feats = features(phi, &truth_items)?;
    let daily_feats = features(phi, &set.daily)?;
    let psnrs: Vec<f64> = recovered
        .iter()
        .zip(&set.triplets)
        .map(|(r, t)| psnr(r, &t.y, 1.0))
        .collect::<Result<_>>()?;
    let psnr_db = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let rmse = feature_rmse(&rec_feats, &truth_feats)?;
    let gallery: Vec<FeatureVec> = set.id_photos.iter().map(|&i| rec_feats[i].clone()).collect();
    let points = roc(&score_pairs(&gallery, &daily_feats)?)?;
    Ok(ModelRow {
        model: model.to_string(),
        tpr: FPR_TARGETS.map(|t| tpr_at_fpr(&points, t)),
        psnr_db,
        feature_rmse: rmse,
        roc: points,
    })
}

/// The two analytic rows: ground truth and the raw MeshFaces.
pub fn baseline_rows(set: &TestSet<'_>, phi: &FeatureNet) -> Result<[ModelRow; 2]> {
    let clear: Vec<Tensor> = set.triplets.iter().map(|t| t.y.clone()).collect();
    let corrupted: Vec<Tensor> = set.triplets.iter().map(|t| t.x.clone()).collect();
    Ok([
        evaluate_images(CLEAR, &clear, set, phi)?,
        evaluate_images(CORRUPTED, &corrupted, set, phi)?,
    ])
}

/// Runs `model` over every test MeshFace and reports it alongside the
/// Clear and Corrupted rows.
pub fn run_protocol<F>(name: &str, model: F, ds: &Dataset, phi: &FeatureNet) -> Result<EvalReport>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let set = TestSet::from_dataset(ds, Split::Test)?;
    let recovered: Vec<Tensor> = set.triplets.par_iter().map(|t| model(&t.x)).collect::<Result<_>>()?;
    let row = evaluate_images(name, &recovered, &set, phi)?;
    let [clear, corrupted] = baseline_rows(&set, phi)?;
    Ok(EvalReport {
        rows: vec![row, clear, corrupted],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::{generate, DatasetConfig};
    use crate::featnet::PhiSpec;
    use crate::rng::{normal_tensor, seeded};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::new(vec![x.len()], x.to_vec()).unwrap()
    }

    /// Direct definition: every candidate threshold, counted from scratch.
    fn brute_roc(s: &ScoreSet) -> Vec<(f64, f64)> {
        let mut ts: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
        ts.push(f64::INFINITY);
        let mut pts: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| {
                let fpr = s.impostor.iter().filter(|&&x| x >= t).count() as f64 / s.impostor.len() as f64;
                let tpr = s.genuine.iter().filter(|&&x| x >= t).count() as f64 / s.genuine.len() as f64;
                (fpr, tpr)
            })
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        pts
    }

    fn brute_tpr(s: &ScoreSet, target: f64) -> f64 {
        brute_roc(s).iter().filter(|p| p.0 <= target).map(|p| p.1).fold(0.0, f64::max)
    }

    #[test]
    fn cosine_cases() {
        let f = v(&[1.0, 2.0, -0.5]);
        assert!((cosine_similarity(&f, &f).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&f, &f.scale(3.0)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn separable_and_chance_rocs() {
        let s = ScoreSet {
            genuine: vec![0.9],
            impostor: vec![0.1],
        };
        let r = roc(&s).unwrap();
        assert!(r.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        for t in FPR_TARGETS {
            assert_eq!(tpr_at_fpr(&r, t), 1.0);
        }
        let same = ScoreSet {
            genuine: vec![0.1, 0.2, 0.3, 0.4],
            impostor: vec![0.1, 0.2, 0.3, 0.4],
        };
        for p in roc(&same).unwrap() {
            assert_eq!(p.fpr, p.tpr);
        }
        assert_eq!(tpr_at_fpr(&roc(&same).unwrap(), 0.5), 0.5);
        assert!(roc(&ScoreSet::default()).is_err());
    }

    #[test]
    fn three_by_three_example() {
        let s = ScoreSet {
            genuine: vec![0.9, 0.7, 0.4],
            impostor: vec![0.8, 0.3, 0.2],
        };
        let r = roc(&s).unwrap();
        let got: Vec<(f64, f64)> = r.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(got, brute_roc(&s));
        // thresholds 0.9: (0, 1/3); 0.8: (1/3, 1/3); 0.7: (1/3, 2/3); 0.4: (1/3, 1); 0.3: (2/3, 1)
        assert_eq!(tpr_at_fpr(&r, 0.34), 1.0);
        assert_eq!(tpr_at_fpr(&r, 0.3), 1.0 / 3.0);
    }

    proptest! {
        #[test]
        fn roc_matches_enumeration(
            g in prop::collection::vec(0u8..10, 1..8),
            i in prop::collection::vec(0u8..10, 1..8),
            target in 0.01f64..0.99,
        ) {
            let s = ScoreSet {
                genuine: g.iter().map(|&x| f64::from(x) / 10.0).collect(),
                impostor: i.iter().map(|&x| f64::from(x) / 10.0).collect(),
            };
            let r = roc(&s).unwrap();
            let mut got: Vec<(f64, f64)> = r.iter().map(|p| (p.fpr, p.tpr)).collect();
            got.dedup();
            prop_assert_eq!(got, brute_roc(&s));
            prop_assert!(r.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
            prop_assert_eq!(tpr_at_fpr(&r, target), brute_tpr(&s, target));
            prop_assert!(tpr_at_fpr(&r, target) <= tpr_at_fpr(&r, (target + 0.1).min(0.999)));
        }
    }

    #[test]
    fn psnr_cases() {
        let a = normal_tensor(&mut seeded(1), &[1, 5, 4], 0.2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|x| x + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = normal_tensor(&mut seeded(2), &[1, 5, 4], 0.2);
        let mut mse = 0.0;
        for k in 0..20 {
            mse += (a.data()[k] - c.data()[k]).powi(2);
        }
        let want = -10.0 * (mse / 20.0).log10();
        assert!((psnr(&a, &c, 1.0).unwrap() - want).abs() < 1e-10);
        assert!(psnr(&a, &Tensor::zeros(&[1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn feature_rmse_cases() {
        let f = vec![v(&[1.0, 2.0]), v(&[0.0, -1.0])];
        assert_eq!(feature_rmse(&f, &f).unwrap(), 0.0);
        assert_eq!(feature_rmse(&[v(&[1.0, 0.0])], &[v(&[0.0, 0.0])]).unwrap(), 1.0);
        let g = vec![v(&[4.0, 2.0]), v(&[0.0, 1.0])];
        assert!((feature_rmse(&f, &g).unwrap() - (3.0 + 2.0) / 2.0).abs() < 1e-15);
        assert!(feature_rmse(&f, &g[..1]).is_err());
    }

    #[test]
    fn genuine_and_impostor_counts() {
        let feats: Vec<Tensor> = (0..5).map(|i| v(&[1.0, i as f64])).collect();
        let s = score_pairs(&feats, &feats).unwrap();
        assert_eq!((s.genuine.len(), s.impostor.len()), (5, 20));
    }

    #[test]
    fn report_tsv_round_trip_and_files() {
        let s = ScoreSet {
            genuine: vec![0.9, 0.7],
            impostor: vec![0.8, 0.3],
        };
        let r = roc(&s).unwrap();
        let rep = EvalReport {
            rows: vec![ModelRow {
                model: CLEAR.into(),
                tpr: [0.5, 0.25, 0.0],
                psnr_db: f64::INFINITY,
                feature_rmse: 0.0,
                roc: r.clone(),
            }],
        };
        let text = rep.to_tsv();
        assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
        assert_eq!(text.lines().nth(1).unwrap(), "Clear\t0.500000\t0.250000\t0.000000\tinf\t0.000000");
        let back = EvalReport::from_tsv(&text, Path::new("r")).unwrap();
        assert_eq!(back.rows[0].psnr_db, f64::INFINITY);
        let dir = tempfile::tempdir().unwrap();
        rep.write(dir.path()).unwrap();
        let pts = read_roc(&dir.path().join("roc_Clear.tsv")).unwrap();
        assert_eq!(pts.len(), r.len());
        assert_eq!(pts[0].threshold, f64::INFINITY);
    }

    #[test]
    fn protocol_consistency_rows() {
        let ds = generate(&DatasetConfig {
            identities: 12,
            per_identity: 2,
            seed: 3,
            split: "0.5/0.0/0.5".parse().unwrap(),
            ..DatasetConfig::default()
        })
        .unwrap();
        let phi = FeatureNet::fixed_random(PhiSpec::default(), 1).unwrap();
        let identity = run_protocol("id", |x| Ok(x.clone()), &ds, &phi).unwrap();
        let (m, corr) = (&identity.rows[0], identity.row(CORRUPTED).unwrap());
        assert_eq!((m.tpr, m.psnr_db, m.feature_rmse), (corr.tpr, corr.psnr_db, corr.feature_rmse));
        assert_eq!(m.roc, corr.roc);
        let set = TestSet::from_dataset(&ds, Split::Test).unwrap();
        let truth: Vec<Tensor> = set.triplets.iter().map(|t| t.y.clone()).collect();
        let oracle = evaluate_images("oracle", &truth, &set, &phi).unwrap();
        let clear = identity.row(CLEAR).unwrap();
        assert_eq!(oracle.psnr_db, f64::INFINITY);
        assert_eq!(oracle.feature_rmse, 0.0);
        assert_eq!((oracle.tpr, &oracle.roc), (clear.tpr, &clear.roc));
        assert_eq!(oracle.roc.last().unwrap().fpr, 1.0);
        assert!(corr.psnr_db.is_finite());
    }
}
