//! TOML configuration files for stages and codec training.
//!
//! Required keys carry no serde default, so a missing key is reported by name
//! (`missing field `target_sr``). Relative checkpoint paths are resolved
//! against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bridge::BridgeSchedule;
use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::error::{Error, Result};
use crate::pipeline::{DegradationPolicy, StitchConfig};
use crate::predictor::PredictorConfig;

/// Prior augmentation for cascaded stages. Every field is required.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Inference low-pass margin below the detected prior bandwidth.
    pub lpf_margin_hz: f64,
    /// Training blur ratios are drawn from `U(0, b_r_max)`.
    pub b_r_max: f64,
    /// Blur ratio applied at inference.
    pub b_r_star: f64,
    /// Training margins are drawn from `U(0, train_margin_max_hz)`.
    pub train_margin_max_hz: f64,
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("augmentation.{name} must be a finite non-negative number, got {v}")))
            }
        };
        nonneg("lpf_margin_hz", self.lpf_margin_hz)?;
        nonneg("b_r_max", self.b_r_max)?;
        nonneg("b_r_star", self.b_r_star)?;
        nonneg("train_margin_max_hz", self.train_margin_max_hz)?;
        if self.b_r_star > self.b_r_max {
            return Err(Error::Config(format!(
                "augmentation.b_r_star ({}) exceeds b_r_max ({})",
                self.b_r_star, self.b_r_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Crop length in samples (rounded down to a multiple of the codec ratio).
    pub crop_len: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Trains toward a fixed output bandwidth instead of any-to-any targets.
    pub fixed_target_hz: Option<f64>,
}

impl Default for BridgeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            crop_len: 4096,
            lr: 1e-4,
            seed: 0,
            log_every: 100,
            fixed_target_hz: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Low-pass the input at the detected bandwidth before resampling (otherwise after).
    pub filter_before_resample: bool,
    /// Replace the output's band below `f_prior` with the input's.
    pub replace_low_band: bool,
    /// Windowed sampling for long inputs.
    pub stitch: Option<StitchConfig>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            filter_before_resample: true,
            replace_low_band: false,
            stitch: None,
        }
    }
}

/// One upsampling stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default)]
    pub name: String,
    pub target_sr: u32,
    pub codec: PathBuf,
    pub predictor: PathBuf,
    /// Stages consuming a previous stage's output (adds the blur token and prior augmentation).
    #[serde(default)]
    pub cascaded: bool,
    #[serde(default)]
    pub degradation: DegradationPolicy,
    pub augmentation: Option<AugmentationConfig>,
    #[serde(default)]
    pub schedule: BridgeSchedule,
    #[serde(default)]
    pub model: PredictorConfig,
    #[serde(default)]
    pub training: BridgeTrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl StageConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = load_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.codec = resolve(base, &cfg.codec);
        cfg.predictor = resolve(base, &cfg.predictor);
        if cfg.name.is_empty() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_sr == 0 {
            return Err(Error::Config("target_sr must be positive".into()));
        }
        self.degradation.validate(self.target_sr)?;
        match (&self.augmentation, self.cascaded) {
            (Some(a), _) => a.validate()?,
            (None, true) => {
                return Err(Error::Config(
                    "cascaded stage requires an [augmentation] section with lpf_margin_hz, b_r_max, b_r_star and train_margin_max_hz".into(),
                ))
            }
            (None, false) => {}
        }
        if self.model.blur_token != self.cascaded {
            return Err(Error::Config(format!(
                "model.blur_token ({}) must match cascaded ({})",
                self.model.blur_token, self.cascaded
            )));
        }
        if let Some(f) = self.training.fixed_target_hz {
            if !(f > 0.0 && f <= self.target_sr as f64 / 2.0) {
                return Err(Error::Config(format!("training.fixed_target_hz {f} outside (0, Nyquist]")));
            }
        }
        if let Some(st) = &self.inference.stitch {
            st.validate()?;
        }
        self.model.validate()
    }
}

/// Checks that a chain of stages has strictly increasing sample rates.
pub fn validate_chain(stages: &[StageConfig]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("at least one stage is required".into()));
    }
    for w in stages.windows(2) {
        if w[1].target_sr <= w[0].target_sr {
            return Err(Error::Config(format!(
                "stage rates must increase strictly: {} Hz follows {} Hz",
                w[1].target_sr, w[0].target_sr
            )));
        }
    }
    Ok(())
}

/// Codec training run: model and optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecRunConfig {
    pub model: CodecConfig,
    #[serde(default)]
    pub training: CodecTrainConfig,
}

impl CodecRunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = load_toml(path.as_ref())?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
