//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `profile` | named preset applied before every other key | none |
//! | `rows`, `cols` | lattice size | 2, 3 |
//! | `channels` | 1 (gray) or 3 (color) | 1 |
//! | `fusion` | `concat` or `sum` | concat |
//! | `filters`, `kernel_size` | per-node width and kernel | 32, 3 |
//! | `noise` | training sigma (`25`) or blind range (`0-55`) | 25 |
//! | `patch_size`, `pairs_per_epoch`, `batch_size`, `epochs` | sampling and schedule | 16, 2048, 16, 30 |
//! | `lr_start`, `lr_end` | geometric learning-rate decay endpoints | 1e-3, 1e-5 |
//! | `seed` | initialization and data-order seed | 0 |
//! | `augment` | random dihedral transform per patch | false |
//! | `train_dir` | clean training images (P5/P6) | required for training |
//! | `val_dir` | clean validation images | none |
//! | `val_sigma` | validation noise level | training sigma |
//! | `val_seed` | validation noise seed | 0 |
//! | `model` | model file to write | `model.lfnt` |
//! | `history` | per-epoch CSV | `history.csv` beside the model |
//! | `precision` | `f32` or `f64` arithmetic | f32 |
//! | `deterministic` | sequential execution (the only mode) | true |

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::lattice::{ArchSpec, Fusion, LatticeSpec};
use crate::training::{NoiseMode, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("unknown profile `{0}` (available: {})", PROFILES.join(", "))]
    UnknownProfile(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub lattice: LatticeSpec,
    pub train: TrainConfig,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub val_sigma: Option<f64>,
    pub val_seed: u64,
    pub model: PathBuf,
    pub history: Option<PathBuf>,
    pub precision: Precision,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lattice: LatticeSpec::new(2, 3, 1),
            train: TrainConfig::default(),
            train_dir: None,
            val_dir: None,
            val_sigma: None,
            val_seed: 0,
            model: PathBuf::from("model.lfnt"),
            history: None,
            precision: Precision::F32,
            deterministic: true,
        }
    }
}

pub const KEYS: &[&str] = &[
    "profile",
    "rows",
    "cols",
    "channels",
    "fusion",
    "filters",
    "kernel_size",
    "noise",
    "patch_size",
    "pairs_per_epoch",
    "batch_size",
    "epochs",
    "lr_start",
    "lr_end",
    "seed",
    "augment",
    "train_dir",
    "val_dir",
    "val_sigma",
    "val_seed",
    "model",
    "history",
    "precision",
    "deterministic",
];

pub const PROFILES: &[&str] = &[
    "desk",
    "lfnet-4-5-gray-s15",
    "lfnet-4-5-gray-s25",
    "lfnet-4-5-gray-s50",
    "lfnet-4-6-gray-s15",
    "lfnet-4-6-gray-s25",
    "lfnet-4-6-gray-s50",
    "lfnet-4-10-color-blind",
];

/// Split config text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    /// Build from a profile (optional), then config-file pairs, then
    /// overrides. A `profile` key in the file is applied first regardless
    /// of its position; a profile given as an override replaces it.
    pub fn resolve(
        profile: Option<&str>,
        file_pairs: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let file_profile = file_pairs.iter().rev().find(|(k, _)| k == "profile").map(|(_, v)| v.as_str());
        if let Some(p) = profile.or(file_profile) {
            cfg.apply_profile(p)?;
        }
        for (k, v) in file_pairs.iter().chain(overrides) {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_profile(&mut self, name: &str) -> Result<(), ConfigError> {
        let gray = |rows, cols, sigma: f64, patch| {
            (LatticeSpec::new(rows, cols, 1), TrainConfig::full_scale_gray(sigma, patch))
        };
        let (lattice, train) = match name {
            "desk" => (LatticeSpec::new(2, 3, 1), TrainConfig::default()),
            "lfnet-4-5-gray-s15" => gray(4, 5, 15.0, 50),
            "lfnet-4-5-gray-s25" => gray(4, 5, 25.0, 50),
            "lfnet-4-5-gray-s50" => gray(4, 5, 50.0, 50),
            "lfnet-4-6-gray-s15" => gray(4, 6, 15.0, 60),
            "lfnet-4-6-gray-s25" => gray(4, 6, 25.0, 60),
            "lfnet-4-6-gray-s50" => gray(4, 6, 50.0, 60),
            "lfnet-4-10-color-blind" => (LatticeSpec::new(4, 10, 3), TrainConfig::full_scale_color_blind()),
            other => return Err(ConfigError::UnknownProfile(other.to_string())),
        };
        self.lattice = lattice;
        self.train = TrainConfig {
            seed: self.train.seed,
            ..train
        };
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let l = &mut self.lattice;
        match key {
            "rows" => l.rows = parse(key, value)?,
            "cols" => l.cols = parse(key, value)?,
            "channels" => {
                let c: usize = parse(key, value)?;
                l.in_channels = c;
                l.out_channels = c;
            }
            "fusion" => l.fusion = parse::<Fusion>(key, value)?,
            "filters" => l.filters = parse(key, value)?,
            "kernel_size" => l.kernel_size = parse(key, value)?,
            "noise" => t.noise = parse::<NoiseMode>(key, value)?,
            "patch_size" => t.patch_size = parse(key, value)?,
            "pairs_per_epoch" => t.pairs_per_epoch = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr_start" => t.lr_start = parse(key, value)?,
            "lr_end" => t.lr_end = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            "train_dir" => self.train_dir = Some(PathBuf::from(value)),
            "val_dir" => self.val_dir = Some(PathBuf::from(value)),
            "val_sigma" => self.val_sigma = Some(parse(key, value)?),
            "val_seed" => self.val_seed = parse(key, value)?,
            "model" => self.model = PathBuf::from(value),
            "history" => self.history = Some(PathBuf::from(value)),
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected f32 or f64".into(),
                        })
                    }
                }
            }
            "deterministic" => {
                self.deterministic = parse(key, value)?;
                if !self.deterministic {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: "only sequential (deterministic) execution is implemented".into(),
                    });
                }
            }
            "profile" => self.apply_profile(value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let l = &self.lattice;
        if l.rows == 0 || l.cols == 0 {
            return Err(ConfigError::Invalid("rows and cols must be at least 1".into()));
        }
        if l.in_channels != 1 && l.in_channels != 3 {
            return Err(ConfigError::Invalid(format!("channels must be 1 or 3, got {}", l.in_channels)));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(s) = self.val_sigma {
            NoiseMode::Fixed(s).validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec::Lattice(self.lattice)
    }

    /// Validation noise: `val_sigma`, else the fixed training sigma.
    pub fn validation_noise(&self) -> Result<NoiseMode, ConfigError> {
        match (self.val_sigma, self.train.noise) {
            (Some(s), _) => Ok(NoiseMode::Fixed(s)),
            (None, NoiseMode::Fixed(s)) => Ok(NoiseMode::Fixed(s)),
            (None, NoiseMode::UniformRange(..)) => Err(ConfigError::Invalid(
                "blind training needs an explicit val_sigma for validation".into(),
            )),
        }
    }

    pub fn history_path(&self) -> PathBuf {
        self.history.clone().unwrap_or_else(|| {
            self.model
                .parent()
                .map(|p| p.join("history.csv"))
                .unwrap_or_else(|| PathBuf::from("history.csv"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text).unwrap().into_iter().map(|(_, k, v)| (k, v)).collect()
    }

    #[test]
    fn parses_file_with_comments() {
        let cfg = RunConfig::resolve(
            None,
            &pairs("# desk run\nrows = 3\ncols=4 # trailing\n\nnoise = 0-55\nval_sigma = 25\naugment = true\n"),
            &[],
        )
        .unwrap();
        assert_eq!((cfg.lattice.rows, cfg.lattice.cols), (3, 4));
        assert_eq!(cfg.train.noise, NoiseMode::UniformRange(0.0, 55.0));
        assert!(cfg.train.augment);
        assert_eq!(cfg.validation_noise().unwrap(), NoiseMode::Fixed(25.0));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert_eq!(
            RunConfig::resolve(None, &pairs("colour = 3"), &[]),
            Err(ConfigError::UnknownKey("colour".into()))
        );
        assert!(matches!(
            RunConfig::resolve(None, &pairs("epochs = many"), &[]),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(parse_pairs("rows 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::resolve(None, &pairs("rows = 0"), &[]), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            RunConfig::resolve(Some("lfnet-9-9"), &[], &[]),
            Err(ConfigError::UnknownProfile(_))
        ));
    }

    #[test]
    fn overrides_win_and_profile_applies_first() {
        let file = pairs("epochs = 5\nprofile = lfnet-4-5-gray-s25\nseed = 3");
        let cfg = RunConfig::resolve(None, &file, &[("epochs".into(), "7".into())]).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!((cfg.lattice.rows, cfg.lattice.cols), (4, 5));
        assert_eq!(cfg.train.patch_size, 50);
        assert_eq!(cfg.train.pairs_per_epoch, 204_800);
    }

    #[test]
    fn every_profile_resolves() {
        for p in PROFILES {
            let cfg = RunConfig::resolve(Some(p), &[], &[]).unwrap();
            assert!(cfg.arch().build().is_ok(), "{p}");
        }
        let color = RunConfig::resolve(Some("lfnet-4-10-color-blind"), &[], &[]).unwrap();
        assert_eq!(color.lattice.in_channels, 3);
        assert_eq!(color.train.epochs, 40);
        assert!(color.validation_noise().is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let sample = |k: &str| match k {
            "profile" => "desk",
            "fusion" => "sum",
            "noise" => "15",
            "augment" | "deterministic" => "true",
            "precision" => "f64",
            "lr_start" | "lr_end" => "0.001",
            "channels" => "3",
            "train_dir" | "val_dir" | "model" | "history" => "x",
            _ => "4",
        };
        for k in KEYS {
            let mut cfg = RunConfig::default();
            cfg.set(k, sample(k)).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn history_defaults_beside_model() {
        let mut cfg = RunConfig::default();
        cfg.model = PathBuf::from("runs/a/m.lfnt");
        assert_eq!(cfg.history_path(), PathBuf::from("runs/a/history.csv"));
    }
}
