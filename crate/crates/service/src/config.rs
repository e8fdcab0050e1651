//! JSON run configuration shared by the subcommands. Every field is
//! optional; without data paths the commands fall back to synthetic data.

use std::path::{Path, PathBuf};

use echoguide_core::pose::ScorerArchitecture;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoNetPaths {
    pub file_table: PathBuf,
    pub tracing_table: PathBuf,
    #[serde(default)]
    pub aux_table: Option<PathBuf>,
    /// Directory holding one folder of PNG frames per clip.
    pub video_root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub echonet: Option<EchoNetPaths>,
    /// Sweep manifest for pose training, evaluation, scoring and folds.
    pub sweeps: Option<PathBuf>,
    /// Sweep manifest or PNG frame directory for `infer`.
    pub input: Option<PathBuf>,
    /// Frames are resized to `[height, width]` when set.
    pub input_hw: Option<[usize; 2]>,
    pub fold: usize,
    pub architecture: ScorerArchitecture,
    pub encoder_depth: Option<usize>,
    pub width_multiplier: f64,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_steps: Option<usize>,
    pub augment: bool,
    /// Detector used to render landmark channels for the scorer.
    pub landmark_checkpoint: Option<PathBuf>,
    /// Converted ImageNet encoder weights for the detector.
    pub pretrained_encoder: Option<PathBuf>,
    /// Frozen language backbone for the adapter scorer.
    pub backbone: Option<PathBuf>,
    /// Side length and sample count of synthetic data.
    pub synthetic_size: usize,
    pub synthetic_samples: usize,
    /// Frame rate assumed for live streams and frame directories.
    pub fps: f64,
    pub host: String,
    pub log_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            echonet: None,
            sweeps: None,
            input: None,
            input_hw: None,
            fold: 0,
            architecture: ScorerArchitecture::Regression,
            encoder_depth: None,
            width_multiplier: 0.25,
            epochs: None,
            batch_size: None,
            learning_rate: None,
            max_steps: None,
            augment: true,
            landmark_checkpoint: None,
            pretrained_encoder: None,
            backbone: None,
            synthetic_size: 64,
            synthetic_samples: 48,
            fps: 30.0,
            host: "127.0.0.1".into(),
            log_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        if self.synthetic_size == 0 || self.synthetic_samples == 0 {
            return Err(Error::Config("synthetic data needs a non-zero size and count".into()));
        }
        if let Some([h, w]) = self.input_hw {
            if h == 0 || w == 0 {
                return Err(Error::Config("input_hw must be non-zero".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"fold": 2, "architecture": "adapter"}"#).unwrap();
        assert_eq!(cfg.fold, 2);
        assert_eq!(cfg.architecture, ScorerArchitecture::Adapter);
        assert_eq!(cfg.synthetic_size, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
