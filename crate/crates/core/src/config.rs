//! Flat key=value run configuration.
//!
//! One file (plus command-line overrides) drives corpus generation, both
//! training stages and evaluation. Unknown keys are rejected; the resolved
//! config serializes canonically (sorted keys) and is hashed so outputs
//! carry an audit trail.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{LevelAgg, LossConfig};
use crate::rng::{self, Fnv64};
use crate::synth::{CorpusSpec, NormalClass};
use crate::teacher::EncoderConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    // corpus
    pub classes: Vec<NormalClass>,
    pub class: String,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomalous_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub perlin_period: usize,
    pub perlin_threshold: f32,
    pub beta_min: f32,
    pub beta_max: f32,
    pub min_mask_frac: f32,
    // model
    pub enc_channels: Vec<usize>,
    pub mem_len: usize,
    pub phi2_zero_init: bool,
    // losses
    pub alpha: f32,
    pub k_hard: usize,
    pub gamma: f32,
    pub level_agg: LevelAgg,
    // training
    pub stage1_epochs: u32,
    pub stage2_epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    pub use_raa: bool,
    pub use_hkd: bool,
    // scoring / eval
    pub smoothing: bool,
    pub smooth_sigma: f32,
    pub fpr_limit: f64,
    // paths
    pub corpus_dir: String,
    pub out_dir: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            classes: NormalClass::ALL.to_vec(),
            class: "stripes".into(),
            train_per_class: 200,
            test_normal_per_class: 50,
            test_anomalous_per_class: 50,
            image_size: 64,
            channels: 1,
            perlin_period: 8,
            perlin_threshold: 0.5,
            beta_min: 0.15,
            beta_max: 1.0,
            min_mask_frac: 0.01,
            enc_channels: vec![16, 32, 64],
            mem_len: 50,
            phi2_zero_init: true,
            alpha: 0.3,
            k_hard: 10,
            gamma: 2.0,
            level_agg: LevelAgg::Sum,
            stage1_epochs: 100,
            stage2_epochs: 120,
            batch_size: 16,
            lr: 0.005,
            use_raa: true,
            use_hkd: true,
            smoothing: false,
            smooth_sigma: 4.0,
            fpr_limit: 0.3,
            corpus_dir: "corpus".into(),
            out_dir: "out".into(),
        }
    }
}

impl Config {
    /// Minutes-scale CPU profile: shorter stages, smaller batches.
    pub fn toy() -> Self {
        Config {
            stage1_epochs: 20,
            stage2_epochs: 24,
            batch_size: 8,
            ..Config::default()
        }
    }

    pub fn k_levels(&self) -> usize {
        self.enc_channels.len()
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            classes: self.classes.clone(),
            train_per_class: self.train_per_class,
            test_normal_per_class: self.test_normal_per_class,
            test_anomalous_per_class: self.test_anomalous_per_class,
            image_size: self.image_size,
            channels: self.channels,
            perlin_period: self.perlin_period,
            perlin_threshold: self.perlin_threshold,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            min_mask_frac: self.min_mask_frac,
            seed: rng::mix(self.seed, 0xDA7A),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            k_hard: self.k_hard,
            gamma: self.gamma,
            level_agg: self.level_agg,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.channels,
            channels: self.enc_channels.clone(),
        }
    }

    pub fn teacher_seed(&self) -> u64 {
        rng::mix(self.seed, 0x7EAC)
    }

    pub fn raa_seed(&self) -> u64 {
        rng::mix(self.seed, 0xAA01)
    }

    pub fn student_seed(&self) -> u64 {
        rng::mix(self.seed, 0x57D0)
    }

    pub fn class_index(&self) -> Result<usize> {
        let target = NormalClass::parse(&self.class)?;
        self.classes
            .iter()
            .position(|&c| c == target)
            .ok_or_else(|| Error::Config {
                message: format!("class `{}` not in classes list", self.class),
            })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |message: String| Err(Error::Config { message });
        if self.stage1_epochs < 1 || self.stage2_epochs < 1 {
            return cfg_err("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return cfg_err("batch_size must be >= 1".into());
        }
        if self.lr <= 0.0 {
            return cfg_err(format!("lr must be > 0, got {}", self.lr));
        }
        if self.channels != 1 && self.channels != 3 {
            return cfg_err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        let k = self.k_levels();
        if k == 0 || self.image_size % (1 << k) != 0 {
            return cfg_err(format!(
                "image_size {} must be divisible by 2^{k}",
                self.image_size
            ));
        }
        if self.perlin_period == 0 || self.image_size % self.perlin_period != 0 {
            return cfg_err(format!(
                "perlin_period {} must divide image_size {}",
                self.perlin_period, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.beta_min)
            || !(0.0..=1.0).contains(&self.beta_max)
            || self.beta_min >= self.beta_max
        {
            return cfg_err(format!(
                "beta range [{}, {}] must sit inside [0,1]",
                self.beta_min, self.beta_max
            ));
        }
        if self.enc_channels.iter().any(|&c| c % 4 != 0) {
            return cfg_err("enc_channels must be divisible by 4 (position encoding)".into());
        }
        if self.mem_len == 0 {
            return cfg_err("mem_len must be >= 1".into());
        }
        if !(0.0 < self.fpr_limit && self.fpr_limit <= 1.0) {
            return cfg_err(format!("fpr_limit must lie in (0,1], got {}", self.fpr_limit));
        }
        self.loss_config().validate()
    }

    /// Canonical serialization: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("alpha", self.alpha.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("beta_min", self.beta_min.to_string()),
            ("channels", self.channels.to_string()),
            ("class", self.class.clone()),
            (
                "classes",
                self.classes
                    .iter()
                    .map(|c| c.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("corpus_dir", self.corpus_dir.clone()),
            (
                "enc_channels",
                self.enc_channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("fpr_limit", self.fpr_limit.to_string()),
            ("gamma", self.gamma.to_string()),
            ("image_size", self.image_size.to_string()),
            ("k_hard", self.k_hard.to_string()),
            (
                "level_agg",
                match self.level_agg {
                    LevelAgg::Sum => "sum".into(),
                    LevelAgg::Mean => "mean".into(),
                },
            ),
            ("lr", self.lr.to_string()),
            ("mem_len", self.mem_len.to_string()),
            ("min_mask_frac", self.min_mask_frac.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("perlin_period", self.perlin_period.to_string()),
            ("perlin_threshold", self.perlin_threshold.to_string()),
            ("phi2_zero_init", self.phi2_zero_init.to_string()),
            ("seed", self.seed.to_string()),
            ("smooth_sigma", self.smooth_sigma.to_string()),
            ("smoothing", self.smoothing.to_string()),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("stage2_epochs", self.stage2_epochs.to_string()),
            ("test_anomalous_per_class", self.test_anomalous_per_class.to_string()),
            ("test_normal_per_class", self.test_normal_per_class.to_string()),
            ("train_per_class", self.train_per_class.to_string()),
            ("use_hkd", self.use_hkd.to_string()),
            ("use_raa", self.use_raa.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update(self.to_text().as_bytes());
        h.finish()
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config {
            message: format!("bad value `{value}` for `{key}` ({what})"),
        };
        let v = value.trim();
        match key {
            "seed" => self.seed = v.parse().map_err(|_| bad("u64"))?,
            "class" => self.class = v.to_string(),
            "classes" => {
                let mut classes = Vec::new();
                for part in v.split(',').filter(|p| !p.is_empty()) {
                    classes.push(NormalClass::parse(part.trim()).map_err(|e| Error::Config {
                        message: e.to_string(),
                    })?);
                }
                if classes.is_empty() {
                    return Err(bad("empty class list"));
                }
                self.classes = classes;
            }
            "train_per_class" => self.train_per_class = v.parse().map_err(|_| bad("usize"))?,
            "test_normal_per_class" => {
                self.test_normal_per_class = v.parse().map_err(|_| bad("usize"))?
            }
            "test_anomalous_per_class" => {
                self.test_anomalous_per_class = v.parse().map_err(|_| bad("usize"))?
            }
            "image_size" => self.image_size = v.parse().map_err(|_| bad("usize"))?,
            "channels" => self.channels = v.parse().map_err(|_| bad("usize"))?,
            "perlin_period" => self.perlin_period = v.parse().map_err(|_| bad("usize"))?,
            "perlin_threshold" => self.perlin_threshold = v.parse().map_err(|_| bad("f32"))?,
            "beta_min" => self.beta_min = v.parse().map_err(|_| bad("f32"))?,
            "beta_max" => self.beta_max = v.parse().map_err(|_| bad("f32"))?,
            "min_mask_frac" => self.min_mask_frac = v.parse().map_err(|_| bad("f32"))?,
            "enc_channels" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    v.split(',').map(|p| p.trim().parse()).collect();
                self.enc_channels = parsed.map_err(|_| bad("usize list"))?;
            }
            "mem_len" => self.mem_len = v.parse().map_err(|_| bad("usize"))?,
            "phi2_zero_init" => self.phi2_zero_init = v.parse().map_err(|_| bad("bool"))?,
            "alpha" => self.alpha = v.parse().map_err(|_| bad("f32"))?,
            "k_hard" => self.k_hard = v.parse().map_err(|_| bad("usize"))?,
            "gamma" => self.gamma = v.parse().map_err(|_| bad("f32"))?,
            "level_agg" => {
                self.level_agg = match v {
                    "sum" => LevelAgg::Sum,
                    "mean" => LevelAgg::Mean,
                    _ => return Err(bad("sum|mean")),
                }
            }
            "stage1_epochs" => self.stage1_epochs = v.parse().map_err(|_| bad("u32"))?,
            "stage2_epochs" => self.stage2_epochs = v.parse().map_err(|_| bad("u32"))?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad("usize"))?,
            "lr" => self.lr = v.parse().map_err(|_| bad("f32"))?,
            "use_raa" => self.use_raa = v.parse().map_err(|_| bad("bool"))?,
            "use_hkd" => self.use_hkd = v.parse().map_err(|_| bad("bool"))?,
            "smoothing" => self.smoothing = v.parse().map_err(|_| bad("bool"))?,
            "smooth_sigma" => self.smooth_sigma = v.parse().map_err(|_| bad("f32"))?,
            "fpr_limit" => self.fpr_limit = v.parse().map_err(|_| bad("f64"))?,
            "corpus_dir" => self.corpus_dir = v.to_string(),
            "out_dir" => self.out_dir = v.to_string(),
            other => {
                return Err(Error::Config {
                    message: format!("unknown config key `{other}`"),
                })
            }
        }
        Ok(())
    }

    /// Parse a key=value file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                message: format!("line {} is not `key = value`: `{raw}`", ln + 1),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn smoothing_sigma(&self) -> Option<f32> {
        if self.smoothing {
            Some(self.smooth_sigma)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = Config::toy();
        cfg.seed = 17;
        cfg.class = "blobs".into();
        cfg.use_raa = false;
        let text = cfg.to_text();
        let back = Config::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            Config::from_text("nonsense = 1"),
            Err(Error::Config { .. })
        ));
        let mut cfg = Config::default();
        assert!(cfg.set("seed", "not-a-number").is_err());
    }

    #[test]
    fn overrides_change_hash() {
        let a = Config::default();
        let mut b = Config::default();
        b.set("seed", "99").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_catches_bad_geometry() {
        let mut cfg = Config::default();
        cfg.image_size = 60; // not divisible by 8
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.perlin_period = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        assert!(Config::default().validate().is_ok());
        assert!(Config::toy().validate().is_ok());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = Config::from_text("# profile\nseed = 5  # root\n\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.batch_size, 4);
    }
}
