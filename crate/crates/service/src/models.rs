//! The three networks of the cascade, loaded together from one checkpoint
//! directory:
//!
//! ```text
//! <dir>/landmarks/   detector checkpoint
//! <dir>/pose/        regression or adapter scorer checkpoint
//! <dir>/lvef/        video regressor checkpoint
//! ```

use std::path::Path;

use candle_core::Device;
use echoguide_core::ingest::scores::category_midpoint;
use echoguide_core::pose::{PoseScore, ScorerArchitecture, ScorerMode};
use echoguide_core::{Frame, PoseCategory};
use echoguide_nn::adapter::{AdapterScorer, BACKBONE_FILE};
use echoguide_nn::landmark::{LandmarkDetector, LandmarkModelConfig};
use echoguide_nn::pose::{PoseModelConfig, PoseRegressor, PoseSample};
use echoguide_nn::video::{LvefModel, LvefModelConfig, LvefRegressor};

use crate::error::{Error, Result};

pub const LANDMARKS_DIR: &str = "landmarks";
pub const POSE_DIR: &str = "pose";
pub const LVEF_DIR: &str = "lvef";

pub enum PoseModel {
    Regression(PoseRegressor),
    Adapter(AdapterScorer),
}

impl PoseModel {
    /// A directory holding a backbone file is an adapter checkpoint.
    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        Ok(if dir.join(BACKBONE_FILE).exists() {
            PoseModel::Adapter(AdapterScorer::load(dir, device)?)
        } else {
            PoseModel::Regression(PoseRegressor::load(dir, device)?)
        })
    }

    pub fn mode(&self) -> ScorerMode {
        match self {
            PoseModel::Regression(m) => m.config.mode,
            PoseModel::Adapter(m) => m.config.mode,
        }
    }

    pub fn architecture(&self) -> ScorerArchitecture {
        match self {
            PoseModel::Regression(_) => ScorerArchitecture::Regression,
            PoseModel::Adapter(_) => ScorerArchitecture::Adapter,
        }
    }

    pub fn blob_sigma(&self) -> f64 {
        match self {
            PoseModel::Regression(m) => m.config.blob_sigma,
            PoseModel::Adapter(m) => m.config.blob_sigma,
        }
    }

    /// Score one assembled input. The adapter predicts a category, reported
    /// as the middle of that category's score range.
    pub fn score(&self, channels: Vec<Frame>) -> Result<PoseScore> {
        match self {
            PoseModel::Regression(m) => Ok(m.score_channels(&channels)?),
            PoseModel::Adapter(m) => {
                let sample = PoseSample {
                    channels,
                    score: 0.0,
                    category: PoseCategory::Green,
                };
                let category = m.predict(&[&sample])?[0];
                Ok(PoseScore::new(category_midpoint(category)))
            }
        }
    }
}

pub struct CascadeModels {
    pub detector: LandmarkDetector,
    pub scorer: PoseModel,
    pub lvef: Box<dyn LvefRegressor + Send>,
    /// Frame size the LVEF model expects; buffered frames are resized to it.
    pub lvef_input_hw: Option<[usize; 2]>,
}

impl CascadeModels {
    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let detector = LandmarkDetector::load(&dir.join(LANDMARKS_DIR), device)?;
        let scorer = PoseModel::load(&dir.join(POSE_DIR), device)?;
        let lvef = LvefModel::load(&dir.join(LVEF_DIR), device)?;
        let models = Self {
            lvef_input_hw: Some(lvef.config.input_hw),
            detector,
            scorer,
            lvef: Box::new(lvef),
        };
        models.check()?;
        Ok(models)
    }

    /// Small randomly initialized models, for demos and wiring tests.
    pub fn synthetic([h, w]: [usize; 2], mode: ScorerMode, seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let detector = LandmarkDetector::new(LandmarkModelConfig::new(18, 0.0625, h, w), seed, &device)?;
        let scorer = PoseRegressor::new(PoseModelConfig::new(mode, 0.0625, h, w), seed + 1, &device)?;
        let lvef = LvefModel::new(LvefModelConfig::tiny(h, w, 16), seed + 2, &device)?;
        Ok(Self {
            lvef_input_hw: Some(lvef.config.input_hw),
            detector,
            scorer: PoseModel::Regression(scorer),
            lvef: Box::new(lvef),
        })
    }

    /// Write the models of [`CascadeModels::synthetic`] as a checkpoint
    /// directory.
    pub fn save_synthetic(dir: &Path, [h, w]: [usize; 2], mode: ScorerMode, seed: u64) -> Result<()> {
        let device = Device::Cpu;
        LandmarkDetector::new(LandmarkModelConfig::new(18, 0.0625, h, w), seed, &device)?
            .save(&dir.join(LANDMARKS_DIR))?;
        PoseRegressor::new(PoseModelConfig::new(mode, 0.0625, h, w), seed + 1, &device)?
            .save(&dir.join(POSE_DIR))?;
        LvefModel::new(LvefModelConfig::tiny(h, w, 16), seed + 2, &device)?.save(&dir.join(LVEF_DIR))?;
        Ok(())
    }

    /// Frame size the cascade accepts.
    pub fn input_hw(&self) -> [usize; 2] {
        self.detector.config.input_hw
    }

    fn check(&self) -> Result<()> {
        let hw = self.input_hw();
        let scorer_hw = match &self.scorer {
            PoseModel::Regression(m) => m.config.input_hw,
            PoseModel::Adapter(m) => m.config.input_hw,
        };
        if scorer_hw != hw {
            return Err(Error::Config(format!(
                "detector takes {hw:?} frames but the scorer takes {scorer_hw:?}"
            )));
        }
        Ok(())
    }
}
