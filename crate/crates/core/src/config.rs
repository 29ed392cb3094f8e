//! TOML configuration with `[camera]`, `[weights]`, `[fit]` and `[synth]`
//! sections. Missing keys take their defaults; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, DEFAULT_FOCAL_224};
use crate::error::{Error, Result};
use crate::eval::SynthConfig;
use crate::fitter::FitConfig;
use crate::losses::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    /// Focal length in pixels for a 224-pixel frame; scaled by `min(w, h)`.
    pub focal_224: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            focal_224: DEFAULT_FOCAL_224,
            width: 256,
            height: 256,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::with_frame_focal(self.focal_224, self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub camera: CameraConfig,
    pub weights: LossWeights,
    pub fit: FitConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.weights.validate()?;
        cfg.fit.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_override() {
        let c = Config::from_toml("[weights]\nlan = 0.5\n[fit]\nstage1_iters = 7\n").unwrap();
        assert_eq!(c.weights.lan, 0.5);
        assert_eq!(c.weights.pix, 100.0);
        assert_eq!(c.fit.stage1_iters, 7);
    }

    #[test]
    fn unknown_keys_and_negative_weights_are_rejected() {
        assert!(Config::from_toml("[weights]\nlambda = 1\n").is_err());
        assert!(Config::from_toml("[weights]\npix = -1\n").is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }
}
