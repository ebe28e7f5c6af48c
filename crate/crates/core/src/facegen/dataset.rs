//! Identity-split triplet datasets and their on-disk layout:
//!
//! ```text
//! <root>/manifest.tsv
//! <root>/<split>/<identity>/<sample>.{x,y,m}.pgm
//! <root>/<split>/<identity>/<sample>.meta
//! <root>/<split>/<identity>/daily.{pgm,meta}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{DemeshError, Result};
use crate::rng::{derive_seed, seeded};
use crate::stn::Landmarks;
use crate::tensor::Tensor;

use super::mesh::{apply_mesh, ensure_binary, synth_mesh, MAX_DENSITY, MIN_DENSITY};
use super::pgm::{read_pgm, write_pgm};
use super::render::{render_face, Identity, JitterRange, DEFAULT_HEIGHT, DEFAULT_WIDTH};

pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "sample\tsplit\tidentity\tpath";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DemeshError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| DemeshError::invalid("split", format!("unknown split `{s}`")))
    }
}

/// Fractions of identities assigned to train / val / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DemeshError::invalid(
                "split",
                format!("ratios {}/{}/{} must be non-negative and sum to 1", self.train, self.val, self.test),
            ));
        }
        Ok(())
    }
}

impl FromStr for SplitRatios {
    type Err = DemeshError;

    /// `"0.7/0.1/0.2"` or `"0.7,0.1,0.2"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(['/', ','])
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| DemeshError::invalid("split", format!("cannot parse ratios `{s}`")))?;
        let &[train, val, test] = parts.as_slice() else {
            return Err(DemeshError::invalid("split", format!("expected three ratios, got `{s}`")));
        };
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.train, self.val, self.test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub seed: u64,
    pub split: SplitRatios,
    pub height: usize,
    pub width: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            identities: 100,
            per_identity: 20,
            seed: 0,
            split: SplitRatios::default(),
            height: DEFAULT_HEIGHT,
            width: DEFAULT_WIDTH,
        }
    }
}

/// MeshFace `x`, clear `y`, binary `mask`, and the eye centres of `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub x: Tensor,
    pub y: Tensor,
    pub mask: Tensor,
    pub eyes: Landmarks,
    pub identity: usize,
    pub sample: usize,
    pub sample_seed: u64,
    pub mask_seed: u64,
}

impl Triplet {
    pub fn name(&self) -> String {
        format!("{}/{}", identity_name(self.identity), sample_name(self.sample))
    }
}

/// The harder-jittered probe photo of an identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyPhoto {
    pub image: Tensor,
    pub eyes: Landmarks,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord {
    pub identity: usize,
    pub seed: u64,
    pub split: Split,
    pub samples: Vec<Triplet>,
    pub daily: DailyPhoto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub identities: Vec<IdentityRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &IdentityRecord> {
        self.identities.iter().filter(move |r| r.split == split)
    }

    pub fn triplets(&self, split: Split) -> Vec<&Triplet> {
        self.split(split).flat_map(|r| &r.samples).collect()
    }

    pub fn extent(&self) -> Option<(usize, usize)> {
        let t = self.identities.first()?.samples.first()?;
        let s = t.y.shape();
        Some((s[1], s[2]))
    }
}

pub fn identity_name(i: usize) -> String {
    format!("id{i:04}")
}

pub fn sample_name(j: usize) -> String {
    format!("s{j:04}")
}

pub fn identity_seed(root_seed: u64, identity: usize) -> u64 {
    derive_seed(root_seed, "identity", identity as u64)
}

pub fn make_triplet(identity: &Identity, index: usize, sample: usize, height: usize, width: usize) -> Result<Triplet> {
    let sample_seed = derive_seed(identity.seed, "sample", sample as u64);
    let render = render_face(identity, sample_seed, &JitterRange::NORMAL, height, width)?;
    let mask_seed = derive_seed(sample_seed, "mask", 0);
    let mask = synth_mesh(mask_seed, height, width)?;
    let x = apply_mesh(&render.image, &mask, mask_seed)?;
    Ok(Triplet {
        x,
        y: render.image,
        mask,
        eyes: render.eyes,
        identity: index,
        sample,
        sample_seed,
        mask_seed,
    })
}

pub fn make_daily(identity: &Identity, height: usize, width: usize) -> Result<DailyPhoto> {
    let seed = derive_seed(identity.seed, "daily", 0);
    let r = render_face(identity, seed, &JitterRange::DAILY, height, width)?;
    Ok(DailyPhoto {
        image: r.image,
        eyes: r.eyes,
        seed,
    })
}

/// Shuffles identity indices and cuts them by the ratios.
pub fn split_identities(n: usize, seed: u64, ratios: &SplitRatios) -> Result<Vec<Split>> {
    ratios.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(seed, "split", 0)));
    let n_train = (n as f64 * ratios.train).round() as usize;
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Builds the dataset in memory; a pure function of the config.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.identities == 0 || cfg.per_identity == 0 {
        return Err(DemeshError::invalid("make_dataset", "need at least one identity and one sample"));
    }
    let splits = split_identities(cfg.identities, cfg.seed, &cfg.split)?;
    let identities = (0..cfg.identities)
        .into_par_iter()
        .map(|i| {
            let seed = identity_seed(cfg.seed, i);
            let id = Identity::from_seed(seed);
            let samples = (0..cfg.per_identity)
                .map(|j| make_triplet(&id, i, j, cfg.height, cfg.width))
                .collect::<Result<Vec<_>>>()?;
            Ok(IdentityRecord {
                identity: i,
                seed,
                split: splits[i],
                samples,
                daily: make_daily(&id, cfg.height, cfg.width)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { identities })
}

fn eyes_field(e: &Landmarks) -> String {
    format!("{} {} {} {}", e.left.0, e.left.1, e.right.0, e.right.1)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DemeshError::io(path, e))
}

fn relative_prefix(split: Split, identity: usize, stem: &str) -> String {
    format!("{split}/{}/{stem}", identity_name(identity))
}

pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| DemeshError::io(root, e))?;
    ds.identities.par_iter().try_for_each(|rec| -> Result<()> {
        let dir = root.join(rec.split.name()).join(identity_name(rec.identity));
        fs::create_dir_all(&dir).map_err(|e| DemeshError::io(&dir, e))?;
        for t in &rec.samples {
            let stem = sample_name(t.sample);
            write_pgm(&dir.join(format!("{stem}.x.pgm")), &t.x)?;
            write_pgm(&dir.join(format!("{stem}.y.pgm")), &t.y)?;
            write_pgm(&dir.join(format!("{stem}.m.pgm")), &t.mask)?;
            write_text(
                &dir.join(format!("{stem}.meta")),
                &format!(
                    "eyes = {}\nidentity = {}\nidentity_seed = {}\nsample_seed = {}\nmask_seed = {}\n",
                    eyes_field(&t.eyes),
                    t.identity,
                    rec.seed,
                    t.sample_seed,
                    t.mask_seed
                ),
            )?;
        }
        write_pgm(&dir.join("daily.pgm"), &rec.daily.image)?;
        write_text(
            &dir.join("daily.meta"),
            &format!(
                "eyes = {}\nidentity = {}\nidentity_seed = {}\ndaily_seed = {}\n",
                eyes_field(&rec.daily.eyes),
                rec.identity,
                rec.seed,
                rec.daily.seed
            ),
        )
    })?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for rec in &ds.identities {
        for t in &rec.samples {
            let stem = sample_name(t.sample);
            manifest.push_str(&format!(
                "{stem}\t{}\t{}\t{}\n",
                rec.split,
                identity_name(rec.identity),
                relative_prefix(rec.split, rec.identity, &stem)
            ));
        }
    }
    write_text(&root.join(MANIFEST), &manifest)
}

/// Generates and persists; refuses to write into a non-empty directory
/// unless `force` is set.
pub fn make_dataset(cfg: &DatasetConfig, root: &Path, force: bool) -> Result<Dataset> {
    if !force && root.exists() {
        let mut entries = fs::read_dir(root).map_err(|e| DemeshError::io(root, e))?;
        if entries.next().is_some() {
            return Err(DemeshError::invalid(
                "gen-data",
                format!("output directory {} is not empty (use --force)", root.display()),
            ));
        }
    }
    if force && root.join(MANIFEST).exists() {
        for sp in Split::ALL {
            let d = root.join(sp.name());
            if d.exists() {
                fs::remove_dir_all(&d).map_err(|e| DemeshError::io(&d, e))?;
            }
        }
    }
    let ds = generate(cfg)?;
    write_dataset(&ds, root)?;
    Ok(ds)
}

fn parse_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| DemeshError::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DemeshError::format(path, format!("expected `key = value`, got `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_field<T: FromStr>(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DemeshError::format(path, format!("missing or malformed `{key}`")))
}

fn meta_eyes(meta: &BTreeMap<String, String>, path: &Path) -> Result<Landmarks> {
    let v: Vec<f64> = meta
        .get("eyes")
        .map(|s| s.split_whitespace().filter_map(|p| p.parse().ok()).collect())
        .unwrap_or_default();
    let &[x1, y1, x2, y2] = v.as_slice() else {
        return Err(DemeshError::format(path, "`eyes` must hold four numbers"));
    };
    Ok(Landmarks::new((x1, y1), (x2, y2)))
}

struct ManifestRow {
    split: Split,
    identity: usize,
    sample: usize,
    prefix: String,
}

fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DemeshError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(DemeshError::format(&path, "missing manifest header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || DemeshError::format(&path, format!("malformed manifest row `{line}`"));
            let &[sample, split, identity, prefix] = cols.as_slice() else {
                return Err(bad());
            };
            Ok(ManifestRow {
                split: split.parse().map_err(|_| bad())?,
                identity: identity.strip_prefix("id").and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                sample: sample.strip_prefix('s').and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                prefix: prefix.to_string(),
            })
        })
        .collect()
}

fn load_triplet(root: &Path, row: &ManifestRow) -> Result<Triplet> {
    let base = root.join(&row.prefix);
    let file = |suffix: &str| PathBuf::from(format!("{}{suffix}", base.display()));
    let meta_path = file(".meta");
    let meta = parse_meta(&meta_path)?;
    let mask_path = file(".m.pgm");
    let mask = read_pgm(&mask_path)?;
    ensure_binary(&mask, "load_dataset")?;
    Ok(Triplet {
        x: read_pgm(&file(".x.pgm"))?,
        y: read_pgm(&file(".y.pgm"))?,
        mask,
        eyes: meta_eyes(&meta, &meta_path)?,
        identity: row.identity,
        sample: row.sample,
        sample_seed: meta_field(&meta, "sample_seed", &meta_path)?,
        mask_seed: meta_field(&meta, "mask_seed", &meta_path)?,
    })
}

/// Reads a persisted dataset back through its manifest.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let rows = read_manifest(root)?;
    let mut groups: BTreeMap<usize, (Split, Vec<&ManifestRow>)> = BTreeMap::new();
    for row in &rows {
        let entry = groups.entry(row.identity).or_insert((row.split, Vec::new()));
        if entry.0 != row.split {
            return Err(DemeshError::format(
                &root.join(MANIFEST),
                format!("identity {} appears in both {} and {}", identity_name(row.identity), entry.0, row.split),
            ));
        }
        entry.1.push(row);
    }
    let identities = groups
        .into_par_iter()
        .map(|(identity, (split, rows))| {
            let samples = rows.iter().map(|r| load_triplet(root, r)).collect::<Result<Vec<_>>>()?;
            let dir = root.join(split.name()).join(identity_name(identity));
            let meta_path = dir.join("daily.meta");
            let meta = parse_meta(&meta_path)?;
            Ok(IdentityRecord {
                identity,
                seed: meta_field(&meta, "identity_seed", &meta_path)?,
                split,
                samples,
                daily: DailyPhoto {
                    image: read_pgm(&dir.join("daily.pgm"))?,
                    eyes: meta_eyes(&meta, &meta_path)?,
                    seed: meta_field(&meta, "daily_seed", &meta_path)?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { identities })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationReport {
    pub identities: usize,
    pub triplets: usize,
}

/// Checks every triplet invariant: binary mask, density bounds, exact
/// off-mask equality, pixel range, landmarks in frame, disjoint splits.
pub fn validate(ds: &Dataset) -> Result<ValidationReport> {
    let Some((h, w)) = ds.extent() else {
        return Err(DemeshError::invalid("validate", "empty dataset"));
    };
    let mut triplets = 0;
    for rec in &ds.identities {
        for t in &rec.samples {
            let name = t.name();
            let fail = |msg: String| Err(DemeshError::invalid("validate", format!("{name}: {msg}")));
            for img in [&t.x, &t.y, &t.mask] {
                img.ensure_shape("validate", &[1, h, w])?;
                if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return fail("pixel outside [0, 1]".into());
                }
            }
            ensure_binary(&t.mask, "validate")?;
            let d = t.mask.sum() / t.mask.len() as f64;
            if !(MIN_DENSITY..=MAX_DENSITY).contains(&d) {
                return fail(format!("mask density {d} outside bounds"));
            }
            let leak = t
                .x
                .data()
                .iter()
                .zip(t.y.data())
                .zip(t.mask.data())
                .position(|((x, y), &m)| m == 0.0 && x.to_bits() != y.to_bits());
            if let Some(i) = leak {
                return fail(format!("x differs from y off-mask at pixel {i}"));
            }
            if !t.eyes.inside(h, w, 0.0) {
                return fail("landmarks outside the image".into());
            }
            triplets += 1;
        }
        rec.daily.image.ensure_shape("validate", &[1, h, w])?;
    }
    let mut seen = BTreeMap::new();
    for rec in &ds.identities {
        if let Some(prev) = seen.insert(rec.identity, rec.split) {
            return Err(DemeshError::invalid(
                "validate",
                format!("identity {} listed twice ({prev}, {})", identity_name(rec.identity), rec.split),
            ));
        }
    }
    Ok(ValidationReport {
        identities: ds.identities.len(),
        triplets,
    })
}

pub fn validate_dir(root: &Path) -> Result<ValidationReport> {
    validate(&load_dataset(root)?)
}
