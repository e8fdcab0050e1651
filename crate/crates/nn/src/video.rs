//! LVEF regression from video with factorized (2+1)D convolutions: each
//! block runs a spatial 2D convolution per frame, then a temporal 1D
//! convolution per pixel.

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use candle_nn::{conv1d, conv2d, linear, Conv1d, Conv1dConfig, Conv2d, Conv2dConfig, Linear, VarBuilder};
use echoguide_core::lvef::{clamp_lvef, gate_clip, ClipSampling, LvefEstimate, VideoClip};
use echoguide_core::Frame;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::scalar;
use crate::train::{adam, check_finite, epoch_order, read_config, save_checkpoint, write_json, TrainLog, LOG_FILE, WEIGHTS_FILE};

pub const LVEF_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvefModelConfig {
    pub schema_version: u32,
    pub input_hw: [usize; 2],
    pub sampling: ClipSampling,
    /// Output channels of each (2+1)D block; every block halves H and W.
    pub channels: Vec<usize>,
    /// The network regresses `(ef - target_mean) / target_std`.
    pub target_mean: f64,
    pub target_std: f64,
    pub model_version: String,
}

impl LvefModelConfig {
    pub fn tiny(height: usize, width: usize, length: usize) -> Self {
        Self {
            schema_version: LVEF_SCHEMA_VERSION,
            input_hw: [height, width],
            sampling: ClipSampling { length, stride: 1 },
            channels: vec![8, 16],
            target_mean: 55.0,
            target_std: 12.0,
            model_version: "r2plus1d-tiny".into(),
        }
    }
}

impl Default for LvefModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            model_version: "r2plus1d".into(),
            ..Self::tiny(112, 112, 32)
        }
    }
}

/// Anything that maps a sampled clip to a raw (unclamped) LVEF.
pub trait LvefRegressor {
    fn sampling(&self) -> ClipSampling;
    fn predict_raw(&self, frames: &[&Frame]) -> Result<f64>;
    fn model_version(&self) -> String;
}

/// Fixed output, for wiring tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantLvef(pub f64);

impl LvefRegressor for ConstantLvef {
    fn sampling(&self) -> ClipSampling {
        ClipSampling::default()
    }

    fn predict_raw(&self, _frames: &[&Frame]) -> Result<f64> {
        Ok(self.0)
    }

    fn model_version(&self) -> String {
        format!("constant-{}", self.0)
    }
}

struct SpatioTemporal {
    spatial: Conv2d,
    temporal: Conv1d,
}

impl SpatioTemporal {
    fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        let spatial = conv2d(
            cin,
            cout,
            3,
            Conv2dConfig {
                padding: 1,
                stride: 2,
                ..Default::default()
            },
            vb.pp("spatial"),
        )?;
        let temporal = conv1d(
            cout,
            cout,
            3,
            Conv1dConfig {
                padding: 1,
                ..Default::default()
            },
            vb.pp("temporal"),
        )?;
        Ok(Self { spatial, temporal })
    }

    /// `(B, T, C, H, W)` in and out.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let y = self.spatial.forward(&x.reshape((b * t, c, h, w))?)?.relu()?;
        let (_, c2, h2, w2) = y.dims4()?;
        let y = y
            .reshape((b, t, c2, h2, w2))?
            .permute((0, 3, 4, 2, 1))?
            .contiguous()?
            .reshape((b * h2 * w2, c2, t))?;
        let y = self.temporal.forward(&y)?.relu()?;
        y.reshape((b, h2, w2, c2, t))?.permute((0, 4, 3, 1, 2))?.contiguous()
    }
}

pub struct R2Plus1d {
    blocks: Vec<SpatioTemporal>,
    head: Linear,
}

impl R2Plus1d {
    pub fn new(config: &LvefModelConfig, vb: VarBuilder) -> Result<Self> {
        if config.channels.is_empty() {
            return Err(Error::Config("video model needs at least one block".into()));
        }
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            blocks.push(SpatioTemporal::new(cin, c, vb.pp(format!("blocks.{i}")))?);
            cin = c;
        }
        let head = linear(cin, 1, vb.pp("head"))?;
        Ok(Self { blocks, head })
    }

    /// `(B, T, 1, H, W)` clips to `(B, 1)` normalized outputs.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for block in &self.blocks {
            y = block.forward(&y)?;
        }
        // Global average over time and space.
        let pooled = y.mean(4)?.mean(3)?.mean(1)?;
        Ok(self.head.forward(&pooled)?)
    }
}

pub struct LvefModel {
    pub config: LvefModelConfig,
    pub store: ParamStore,
    net: R2Plus1d,
}

impl LvefModel {
    pub fn new(config: LvefModelConfig, seed: u64, device: &Device) -> Result<Self> {
        if !(config.target_std > 0.0) {
            return Err(Error::Config("target_std must be positive".into()));
        }
        let store = ParamStore::new(seed, device);
        let net = R2Plus1d::new(&config, store.var_builder())?;
        Ok(Self { config, store, net })
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let config: LvefModelConfig = read_config(dir)?;
        let model = Self::new(config, 0, device)?;
        model.store.load(&dir.join(WEIGHTS_FILE))?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.config, &self.store)
    }

    /// Sample a clip per the config and stack it as `(1, T, 1, H, W)`.
    fn clip_tensor(&self, clips: &[Vec<&Frame>]) -> Result<Tensor> {
        let [h, w] = self.config.input_hw;
        let mut data = Vec::new();
        for frames in clips {
            if frames.is_empty() {
                return Err(Error::Shape("empty clip".into()));
            }
            for i in self.config.sampling.indices(frames.len()) {
                let f = frames[i];
                if f.width() != w || f.height() != h {
                    return Err(Error::Shape(format!(
                        "frame {}x{} does not match the LVEF model's {w}x{h}",
                        f.width(),
                        f.height()
                    )));
                }
                data.extend_from_slice(f.pixels());
            }
        }
        let t = self.config.sampling.length;
        Ok(Tensor::from_vec(data, (clips.len(), t, 1, h, w), self.store.device())?)
    }

    /// Batch of clips to `(B, 1)` normalized predictions.
    pub fn forward(&self, clips: &[Vec<&Frame>]) -> Result<Tensor> {
        self.net.forward(&self.clip_tensor(clips)?)
    }

    fn denormalize(&self, v: f64) -> f64 {
        v * self.config.target_std + self.config.target_mean
    }
}

impl LvefRegressor for LvefModel {
    fn sampling(&self) -> ClipSampling {
        self.config.sampling
    }

    fn predict_raw(&self, frames: &[&Frame]) -> Result<f64> {
        let out = self.forward(&[frames.to_vec()])?;
        Ok(self.denormalize(scalar(&out.flatten_all()?.get(0)?)?))
    }

    fn model_version(&self) -> String {
        self.config.model_version.clone()
    }
}

/// LVEF of a gated clip, clamped to `[0, 100]`. `first_frame` is the stream
/// index of the clip's first frame, used for the reported range.
pub fn estimate_lvef<M: LvefRegressor + ?Sized>(
    model: &M,
    clip: &VideoClip,
    clip_id: &str,
    first_frame: usize,
) -> Result<LvefEstimate> {
    if !gate_clip(clip) {
        return Err(Error::Precondition(format!(
            "clip of {} frames at {} fps does not pass the gate",
            clip.len(),
            clip.fps
        )));
    }
    let frames: Vec<&Frame> = clip.frames.iter().collect();
    let raw = model.predict_raw(&frames)?;
    Ok(LvefEstimate {
        value: clamp_lvef(raw),
        clip_id: clip_id.to_string(),
        frame_range: [first_frame, first_frame + clip.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LvefSample {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub ef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvefTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
    pub log_every: usize,
}

impl Default for LvefTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            max_steps: None,
            log_every: 10,
        }
    }
}

/// Squared-error regression on normalized EF.
pub fn train_lvef_estimator(
    model: &LvefModel,
    train: &[LvefSample],
    cfg: &LvefTrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no LVEF training clips".into()));
    }
    let mut opt = adam(model.store.trainable_vars(), cfg.learning_rate)?;
    let mut log = TrainLog::default();
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let clips: Vec<Vec<&Frame>> = chunk.iter().map(|&i| train[i].frames.iter().collect()).collect();
            let target: Vec<f32> = chunk
                .iter()
                .map(|&i| ((train[i].ef - model.config.target_mean) / model.config.target_std) as f32)
                .collect();
            let target = Tensor::from_vec(target, (chunk.len(), 1), model.store.device())?;
            let pred = model.forward(&clips)?;
            let loss = candle_nn::loss::mse(&pred, &target)?;
            let value = check_finite(scalar(&loss)?, step)?;
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
            log.record_step(value, cfg.log_every);
            sum += value * chunk.len() as f64;
            n += chunk.len();
            step += 1;
        }
        log.epochs.push(crate::train::EpochRecord {
            epoch,
            train_loss: sum / n.max(1) as f64,
            val_loss: None,
        });
    }
    log.finish();
    log.selected_epoch = log.epochs.last().map(|e| e.epoch);
    if let Some(dir) = out_dir {
        model.save(dir)?;
        write_json(&dir.join(LOG_FILE), &log)?;
    }
    Ok(log)
}

/// Mean absolute error in EF points over labeled clips.
pub fn lvef_mae(model: &LvefModel, samples: &[LvefSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no LVEF clips".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let frames: Vec<&Frame> = s.frames.iter().collect();
        total += (clamp_lvef(model.predict_raw(&frames)?) - s.ef).abs();
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize, fps: f64) -> VideoClip {
        VideoClip::new(vec![Frame::zeros(16, 16); n], fps).unwrap()
    }

    #[test]
    fn constant_model_and_clamp() {
        let c = clip(30, 30.0);
        assert_eq!(estimate_lvef(&ConstantLvef(55.0), &c, "a", 0).unwrap().value, 55.0);
        assert_eq!(estimate_lvef(&ConstantLvef(-3.0), &c, "a", 0).unwrap().value, 0.0);
        let e = estimate_lvef(&ConstantLvef(120.0), &c, "a", 10).unwrap();
        assert_eq!(e.value, 100.0);
        assert_eq!(e.frame_range, [10, 39]);
    }

    #[test]
    fn gated_out_clip_is_a_precondition_error() {
        let c = clip(20, 30.0);
        assert!(matches!(
            estimate_lvef(&ConstantLvef(55.0), &c, "a", 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn batch_output_shape() {
        let model = LvefModel::new(LvefModelConfig::tiny(16, 16, 8), 0, &Device::Cpu).unwrap();
        let f = Frame::zeros(16, 16);
        let clips = vec![vec![&f; 8]; 3];
        assert_eq!(model.forward(&clips).unwrap().dims(), &[3, 1]);
    }

    #[test]
    fn wrong_frame_size() {
        let model = LvefModel::new(LvefModelConfig::tiny(16, 16, 8), 0, &Device::Cpu).unwrap();
        let f = Frame::zeros(8, 8);
        assert!(matches!(model.predict_raw(&[&f; 8]), Err(Error::Shape(_))));
    }
}
