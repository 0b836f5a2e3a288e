//! The run configuration shared by every CLI subcommand. All defaults live
//! here; a config file only overrides, and unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::color::ColorTrainConfig;
use crate::detector::{DetectorThreshold, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::eval::SweepSpec;
use crate::fixtures::FixtureConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpsSettings {
    /// Smoothing weight; 0 interpolates the controls exactly.
    pub regularization: f64,
}

impl Default for TpsSettings {
    fn default() -> Self {
        Self { regularization: 0.0 }
    }
}

/// Synthetic capture data for `fit-color --synthesize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorDataSettings {
    pub train_samples: usize,
    pub heldout_samples: usize,
}

impl Default for ColorDataSettings {
    fn default() -> Self {
        Self {
            train_samples: 512,
            heldout_samples: 128,
        }
    }
}

/// Synthetic scenes for `train-detector --synthesize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorDataSettings {
    pub scenes: usize,
    pub seed: u64,
}

impl Default for DetectorDataSettings {
    fn default() -> Self {
        Self { scenes: 200, seed: 7 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tps: TpsSettings,
    pub color: ColorTrainConfig,
    pub color_data: ColorDataSettings,
    pub detector: DetectorTrainConfig,
    pub detector_data: DetectorDataSettings,
    pub attack: AttackConfig,
    pub threshold: DetectorThreshold,
    pub sweep: SweepSpec,
    pub fixtures: FixtureConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.line(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tps.regularization >= 0.0 && self.tps.regularization.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tps regularization {} must be nonnegative",
                self.tps.regularization
            )));
        }
        self.attack.validate()?;
        self.threshold.validate()
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.color.seed = seed;
        self.detector.seed = seed;
        self.detector_data.seed = seed;
        self.attack.seed = seed;
        self.sweep.seed = seed;
        self.fixtures.detector_seed = seed;
        self.fixtures.color_seed = seed;
        self.fixtures.detector.seed = seed;
        self.fixtures.color.seed = seed;
        self
    }
}
