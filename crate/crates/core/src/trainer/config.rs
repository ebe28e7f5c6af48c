//! `key = value` experiment configs.
//!
//! `#` starts a comment. Unknown keys are errors. The `variant` key sets
//! the loss defaults for that variant; explicit loss keys then override
//! them regardless of line order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{DemeshError, Result};
use crate::fcn::ArchSpec;
use crate::featnet::{PhiMode, Tap};
use crate::losses::{FeaturePenalty, LossConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Steps between decays.
    pub lr_step: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub init_seed: u64,
    pub order_seed: u64,
    pub dataset: Option<PathBuf>,
    pub loss: LossConfig,
    pub arch: ArchSpec,
    /// Steps between validation passes; 0 validates only at the end.
    pub val_interval: usize,
    pub phi_mode: PhiMode,
    pub phi_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_variant(Variant::DeMeshNet)
    }
}

impl TrainConfig {
    /// Desk schedule: 3000 steps of batch 8, lr 1e-3 decayed ×0.1 at 2/3.
    pub fn for_variant(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            batch_size: 8,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_step: 2000,
            steps: 3000,
            weight_decay: 1e-5,
            init_seed: 1,
            order_seed: 2,
            dataset: None,
            loss: LossConfig::for_variant(variant),
            arch: ArchSpec::default(),
            val_interval: 500,
            phi_mode: PhiMode::Pretrain,
            phi_seed: 3,
        }
    }

    /// Same config for another variant, keeping every non-loss field.
    pub fn with_variant(&self, variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            loss: LossConfig::for_variant(variant),
            ..self.clone()
        }
    }

    /// Keeps the decay at two thirds of a shortened schedule.
    pub fn with_steps(&self, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            lr_step: (steps * 2 / 3).max(1),
            ..self.clone()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let k = (step / self.lr_step.max(1)) as i32;
        self.lr * self.lr_decay.powi(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DemeshError::invalid("TrainConfig", msg));
        if self.batch_size == 0 || self.steps == 0 || self.lr_step == 0 {
            return bad("batch_size, steps and lr_step must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        self.loss.validate()?;
        self.arch.validate()
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let taps: Vec<&str> = self.loss.taps.iter().map(|t| t.name()).collect();
        let widths: Vec<String> = self.arch.widths.iter().map(|w| w.to_string()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("variant", self.variant.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_step", self.lr_step.to_string()),
            ("steps", self.steps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("order_seed", self.order_seed.to_string()),
            (
                "dataset",
                self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("mask_weight", self.loss.mask_weight.to_string()),
            ("feature_weight", self.loss.feature_weight.to_string()),
            ("c_fraction", self.loss.c_fraction.to_string()),
            ("taps", taps.join(",")),
            (
                "penalty",
                match self.loss.penalty {
                    FeaturePenalty::ReverseHuber => "reverse_huber",
                    FeaturePenalty::Squared => "squared",
                }
                .to_string(),
            ),
            ("aligned", self.loss.aligned.to_string()),
            ("height", self.arch.height.to_string()),
            ("width", self.arch.width.to_string()),
            ("widths", widths.join(",")),
            ("kernel", self.arch.kernel.to_string()),
            ("val_interval", self.val_interval.to_string()),
            (
                "phi_mode",
                match self.phi_mode {
                    PhiMode::Pretrain => "pretrain",
                    PhiMode::FixedRandom => "fixed_random",
                }
                .to_string(),
            ),
            ("phi_seed", self.phi_seed.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| DemeshError::Config {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
                return Err(DemeshError::Config {
                    line: line_no,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        let variant = match map.remove("variant") {
            Some((line, v)) => v.parse().map_err(|e: DemeshError| DemeshError::Config { line, msg: e.to_string() })?,
            None => Variant::DeMeshNet,
        };
        let mut cfg = TrainConfig::for_variant(variant);
        for (key, (line, value)) in map {
            let err = |msg: String| DemeshError::Config { line, msg };
            fn num<T: FromStr>(v: &str, key: &str, line: usize) -> Result<T> {
                v.parse().map_err(|_| DemeshError::Config {
                    line,
                    msg: format!("`{key}`: cannot parse `{v}`"),
                })
            }
            let list = |v: &str| -> Result<Vec<usize>> { v.split(',').map(|p| num(p.trim(), &key, line)).collect() };
            match key.as_str() {
                "batch_size" => cfg.batch_size = num(&value, &key, line)?,
                "lr" => cfg.lr = num(&value, &key, line)?,
                "lr_decay" => cfg.lr_decay = num(&value, &key, line)?,
                "lr_step" => cfg.lr_step = num(&value, &key, line)?,
                "steps" => cfg.steps = num(&value, &key, line)?,
                "weight_decay" => cfg.weight_decay = num(&value, &key, line)?,
                "init_seed" => cfg.init_seed = num(&value, &key, line)?,
                "order_seed" => cfg.order_seed = num(&value, &key, line)?,
                "dataset" => cfg.dataset = (!value.is_empty()).then(|| PathBuf::from(&value)),
                "mask_weight" => cfg.loss.mask_weight = num(&value, &key, line)?,
                "feature_weight" => cfg.loss.feature_weight = num(&value, &key, line)?,
                "c_fraction" => cfg.loss.c_fraction = num(&value, &key, line)?,
                "taps" => {
                    cfg.loss.taps = value
                        .split(',')
                        .map(|t| t.trim())
                        .filter(|t| !t.is_empty())
                        .map(Tap::from_str)
                        .collect::<Result<_>>()
                        .map_err(|e| err(e.to_string()))?
                }
                "penalty" => {
                    cfg.loss.penalty = match value.as_str() {
                        "reverse_huber" => FeaturePenalty::ReverseHuber,
                        "squared" => FeaturePenalty::Squared,
                        other => return Err(err(format!("unknown penalty `{other}`"))),
                    }
                }
                "aligned" => cfg.loss.aligned = num(&value, &key, line)?,
                "height" => cfg.arch.height = num(&value, &key, line)?,
                "width" => cfg.arch.width = num(&value, &key, line)?,
                "widths" => cfg.arch.widths = list(&value)?,
                "kernel" => cfg.arch.kernel = num(&value, &key, line)?,
                "val_interval" => cfg.val_interval = num(&value, &key, line)?,
                "phi_mode" => cfg.phi_mode = value.parse().map_err(|e: DemeshError| err(e.to_string()))?,
                "phi_seed" => cfg.phi_seed = num(&value, &key, line)?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate().map_err(|e| DemeshError::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| DemeshError::io(path, e))?;
        TrainConfig::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_desk_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.steps, c.lr_step), (8, 3000, 2000));
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(1999), 1e-3);
        assert_eq!(c.lr_at(2000), 1e-3 * 0.1);
        assert_eq!(c.with_steps(30).lr_step, 20);
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let text = "# experiment\nfeature_weight = 0.5\nvariant = FCNF   # whole image\nsteps = 10\n\nlr_step = 5\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.variant, Variant::Fcnf);
        assert_eq!(c.loss.feature_weight, 0.5);
        assert!(!c.loss.aligned);
        assert_eq!(c.loss.taps, vec![Tap::EarlyConv]);
        assert_eq!(c.lr_at(5), 1e-3 * 0.1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = TrainConfig::parse("steps = 3\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, DemeshError::Config { line: 2, .. }), "{e}");
        assert!(matches!(TrainConfig::parse("steps 3"), Err(DemeshError::Config { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("lr = fast"), Err(DemeshError::Config { line: 1, .. })));
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("taps = conv7").is_err());
        assert!(TrainConfig::parse("steps = 1\nsteps = 2").is_err());
    }

    proptest! {
        #[test]
        fn config_text_round_trips(
            v in 0usize..5,
            batch in 1usize..64,
            lr in 1e-6f64..1e-1,
            steps in 1usize..100_000,
            seed in any::<u64>(),
            wd in 0.0f64..1e-2,
        ) {
            let mut c = TrainConfig::for_variant(Variant::ALL[v]);
            c.batch_size = batch;
            c.lr = lr;
            c.steps = steps;
            c.init_seed = seed;
            c.weight_decay = wd;
            c.dataset = Some(PathBuf::from("/data/desk"));
            let back = TrainConfig::parse(&c.to_config_string()).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn schedule_is_piecewise_constant(step in 0usize..10_000) {
            let c = TrainConfig::default();
            let k = step / c.lr_step;
            prop_assert_eq!(c.lr_at(step), 1e-3 * 0.1f64.powi(k as i32));
        }
    }
}
