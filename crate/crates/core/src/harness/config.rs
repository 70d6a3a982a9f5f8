//! Run configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{LgdError, Result};
use crate::losses::{CosineMode, LossWeights};
use crate::model::ModelKind;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "LGD_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Manifest CSV or the dataset directory holding it.
    pub dataset: PathBuf,
    pub teacher_ckpt: Option<PathBuf>,
    /// Parent of the per-run `<variant>-<seed>` directories.
    pub out_dir: PathBuf,
    pub cosine: CosineMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: ModelKind::F,
            epochs: 50,
            batch_size: 32,
            base_lr: 1e-4,
            weights: LossWeights::default(),
            seed: 42,
            dataset: PathBuf::from("data"),
            teacher_ckpt: None,
            out_dir: PathBuf::from("runs"),
            cosine: CosineMode::Pooled,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LgdError::InvalidArgument(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Keys not present
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LgdError::InvalidArgument(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LgdError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            LgdError::InvalidArgument(reason) => LgdError::format(path, reason),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "base_lr" => self.base_lr = parse_num(key, value)?,
            "lambda_d" => self.weights.lambda_d = parse_num(key, value)?,
            "lambda_n" => self.weights.lambda_n = parse_num(key, value)?,
            "lambda_m" => self.weights.lambda_m = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "teacher_ckpt" => {
                self.teacher_ckpt = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "cosine" => {
                self.cosine = match value {
                    "pooled" => CosineMode::Pooled,
                    "per_location" => CosineMode::PerLocation,
                    _ => {
                        return Err(LgdError::InvalidArgument(format!(
                            "`cosine` must be pooled or per_location, got `{value}`"
                        )))
                    }
                }
            }
            _ => {
                return Err(LgdError::InvalidArgument(format!(
                    "unknown config key `{key}`"
                )))
            }
        }
        Ok(())
    }

    /// Replaces the seed with `LGD_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_num(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LgdError::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(LgdError::InvalidArgument(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        self.weights.validate()
    }

    /// `<variant>-<seed>`.
    pub fn run_name(&self) -> String {
        format!("{}-{}", self.variant, self.seed)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }

    /// Serialises back to the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let cosine = match self.cosine {
            CosineMode::Pooled => "pooled",
            CosineMode::PerLocation => "per_location",
        };
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "lambda_d = {}", self.weights.lambda_d);
        let _ = writeln!(s, "lambda_n = {}", self.weights.lambda_n);
        let _ = writeln!(s, "lambda_m = {}", self.weights.lambda_m);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "dataset = {}", self.dataset.display());
        if let Some(t) = &self.teacher_ckpt {
            let _ = writeln!(s, "teacher_ckpt = {}", t.display());
        }
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "cosine = {cosine}");
        s
    }
}
