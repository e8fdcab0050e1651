//! Regression pose scorer: residual encoder with a scalar head, trained with
//! the class-weighted MSE against continuous sweep scores.

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder};
use echoguide_core::ingest::augment::{augment_frame, AugmentParams, AugmentRanges};
use echoguide_core::ingest::scores::category_midpoint;
use echoguide_core::landmarks::LandmarkPrediction;
use echoguide_core::pose::{
    compute_class_weights, count_categories, evaluate_scores, scorer_channels, ClassWeights, FoldResult,
    PoseScore, ScorerMode,
};
use echoguide_core::{Frame, PoseCategory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::weighted_mse;
use crate::params::ParamStore;
use crate::resnet::{ResNet, ResNetConfig};
use crate::tensor::{channel_stacks_to_tensor, scalar};
use crate::train::{
    adam, check_finite, epoch_order, read_config, save_checkpoint, write_json, EpochRecord, TrailingSelector,
    TrainLog, LOG_FILE, WEIGHTS_FILE,
};

pub const POSE_SCHEMA_VERSION: u32 = 1;
/// Trailing window of the checkpoint rule.
pub const SELECTION_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseModelConfig {
    pub schema_version: u32,
    pub mode: ScorerMode,
    pub encoder_depth: usize,
    pub width_multiplier: f64,
    pub input_hw: [usize; 2],
    /// Width of the rendered landmark blobs, pixels.
    pub blob_sigma: f64,
}

impl PoseModelConfig {
    pub fn new(mode: ScorerMode, width_multiplier: f64, height: usize, width: usize) -> Self {
        Self {
            schema_version: POSE_SCHEMA_VERSION,
            mode,
            encoder_depth: 18,
            width_multiplier,
            input_hw: [height, width],
            blob_sigma: 2.0,
        }
    }
}

impl Default for PoseModelConfig {
    fn default() -> Self {
        Self::new(ScorerMode::ImagesAndLandmarks, 1.0, 224, 224)
    }
}

/// One scorer input: the assembled channels and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    /// Image channel first, then the key-landmark channels when the mode
    /// uses them.
    pub channels: Vec<Frame>,
    pub score: f64,
    pub category: PoseCategory,
}

impl PoseSample {
    pub fn new(
        mode: ScorerMode,
        frame: &Frame,
        landmarks: Option<&[LandmarkPrediction]>,
        sigma: f64,
        score: f64,
        category: PoseCategory,
    ) -> Result<Self> {
        Ok(Self {
            channels: scorer_channels(mode, frame, landmarks, sigma)?,
            score,
            category,
        })
    }

    /// Same geometric transform on every channel; photometric jitter only
    /// on the image.
    pub fn augmented(&self, params: &AugmentParams) -> Self {
        let geometric = AugmentParams {
            brightness: 0.0,
            contrast: 1.0,
            ..*params
        };
        let channels = self
            .channels
            .iter()
            .enumerate()
            .map(|(i, c)| augment_frame(c, None, if i == 0 { params } else { &geometric }).0)
            .collect();
        Self {
            channels,
            score: self.score,
            category: self.category,
        }
    }
}

/// Image-only samples from the synthetic texture set, each scored at the
/// middle of its category range.
pub fn texture_samples(n: usize, size: usize, seed: u64) -> Vec<PoseSample> {
    echoguide_core::synthetic::category_dataset(n, size, size, seed)
        .into_iter()
        .map(|(frame, category)| PoseSample {
            channels: vec![frame],
            score: category_midpoint(category),
            category,
        })
        .collect()
}

pub(crate) fn batch_tensor(samples: &[&PoseSample], device: &Device) -> Result<Tensor> {
    let stacks: Vec<Vec<&Frame>> = samples.iter().map(|s| s.channels.iter().collect()).collect();
    channel_stacks_to_tensor(&stacks, device)
}

pub struct PoseRegressor {
    pub config: PoseModelConfig,
    pub store: ParamStore,
    encoder: ResNet,
    head: Linear,
}

impl PoseRegressor {
    pub fn new(config: PoseModelConfig, seed: u64, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, device);
        let vb = store.var_builder();
        let (encoder, head) = Self::build(&config, vb)?;
        Ok(Self {
            config,
            store,
            encoder,
            head,
        })
    }

    fn build(config: &PoseModelConfig, vb: VarBuilder) -> Result<(ResNet, Linear)> {
        let enc_cfg = ResNetConfig::new(config.encoder_depth, config.width_multiplier, config.mode.input_channels());
        let encoder = ResNet::new(enc_cfg, vb.pp("encoder"))?;
        let head = linear(encoder.out_channels(), 1, vb.pp("head"))?;
        Ok((encoder, head))
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let config: PoseModelConfig = read_config(dir)?;
        let model = Self::new(config, 0, device)?;
        model.store.load(&dir.join(WEIGHTS_FILE))?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.config, &self.store)
    }

    /// Raw scores `(B,)`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.mode.input_channels() || [h, w] != self.config.input_hw {
            return Err(Error::Shape(format!(
                "scorer expects ({}, {:?}), got ({c}, [{h}, {w}])",
                self.config.mode.input_channels(),
                self.config.input_hw
            )));
        }
        let feats = self.encoder.pooled(x, train)?;
        Ok(self.head.forward(&feats)?.squeeze(1)?)
    }

    /// Clamped scores for a batch of samples.
    pub fn predict(&self, samples: &[&PoseSample]) -> Result<Vec<PoseScore>> {
        let x = batch_tensor(samples, self.store.device())?;
        let raw = self.forward_t(&x, false)?.to_vec1::<f32>()?;
        Ok(raw.into_iter().map(|v| PoseScore::new(v as f64)).collect())
    }

    pub fn score_channels(&self, channels: &[Frame]) -> Result<PoseScore> {
        let sample = PoseSample {
            channels: channels.to_vec(),
            score: 0.0,
            category: PoseCategory::Green,
        };
        Ok(self.predict(&[&sample])?[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augment: Option<AugmentRanges>,
    pub log_every: usize,
}

impl Default for PoseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            augment: Some(AugmentRanges::default()),
            log_every: 10,
        }
    }
}

/// Class weights from the training labels; any absent category gets 1.
pub fn training_class_weights(samples: &[PoseSample]) -> ClassWeights {
    let cats: Vec<PoseCategory> = samples.iter().map(|s| s.category).collect();
    compute_class_weights(count_categories(&cats)).unwrap_or_default()
}

fn regression_loss(
    model: &PoseRegressor,
    samples: &[PoseSample],
    weights: &ClassWeights,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PoseSample> = chunk.iter().collect();
        let x = batch_tensor(&refs, model.store.device())?;
        let pred = model.forward_t(&x, false)?;
        let target: Vec<f32> = chunk.iter().map(|s| s.score as f32).collect();
        let target = Tensor::from_vec(target, chunk.len(), model.store.device())?;
        let cats: Vec<PoseCategory> = chunk.iter().map(|s| s.category).collect();
        total += scalar(&weighted_mse(&pred, &target, &cats, weights)?)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Train one fold. The kept weights are those of the epoch minimizing the
/// trailing mean of the last five validation losses (training loss when
/// there is no validation set).
pub fn train_pose_regressor(
    model: &PoseRegressor,
    train: &[PoseSample],
    val: &[PoseSample],
    cfg: &PoseTrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no pose training samples".into()));
    }
    let weights = training_class_weights(train);
    let mut opt = adam(model.store.trainable_vars(), cfg.learning_rate)?;
    let mut selector = TrailingSelector::new(SELECTION_WINDOW, cfg.epochs);
    if selector.degenerate() {
        tracing::warn!(
            epochs = cfg.epochs,
            "fewer epochs than the selection window; keeping the best single epoch"
        );
    }
    let mut log = TrainLog {
        degenerate_selection: selector.degenerate(),
        ..Default::default()
    };
    let mut best = None;
    let mut step = 0;
    let [h, w] = model.config.input_hw;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((step as u64 + 1) << 24));
            let batch: Vec<PoseSample> = chunk
                .iter()
                .map(|&i| match &cfg.augment {
                    Some(r) => train[i].augmented(&AugmentParams::sample_with(r, w, h, &mut rng)),
                    None => train[i].clone(),
                })
                .collect();
            let refs: Vec<&PoseSample> = batch.iter().collect();
            let x = batch_tensor(&refs, model.store.device())?;
            let pred = model.forward_t(&x, true)?;
            let target: Vec<f32> = batch.iter().map(|s| s.score as f32).collect();
            let target = Tensor::from_vec(target, batch.len(), model.store.device())?;
            let cats: Vec<PoseCategory> = batch.iter().map(|s| s.category).collect();
            let loss = weighted_mse(&pred, &target, &cats, &weights)?;
            let value = check_finite(scalar(&loss)?, step)?;
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
            log.record_step(value, cfg.log_every);
            sum += value * batch.len() as f64;
            n += batch.len();
            step += 1;
        }
        let train_loss = sum / n as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(check_finite(regression_loss(model, val, &weights, cfg.batch_size)?, step)?)
        };
        tracing::info!(epoch, train_loss, ?val_loss, "pose epoch");
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if selector.push(val_loss.unwrap_or(train_loss)) {
            best = Some(model.store.snapshot()?);
        }
    }
    log.finish();
    if let Some(snapshot) = best {
        model.store.restore(&snapshot)?;
    }
    log.selected_epoch = selector.selected();
    if let Some(dir) = out_dir {
        model.save(dir)?;
        write_json(&dir.join(LOG_FILE), &log)?;
    }
    Ok(log)
}

/// Fold metrics of a trained regressor on labeled samples.
pub fn evaluate_pose_regressor(
    model: &PoseRegressor,
    fold_index: usize,
    samples: &[PoseSample],
    batch_size: usize,
) -> Result<FoldResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no pose test samples".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PoseSample> = chunk.iter().collect();
        scores.extend(model.predict(&refs)?.into_iter().map(|s| s.value()));
    }
    let truth: Vec<PoseCategory> = samples.iter().map(|s| s.category).collect();
    Ok(evaluate_scores(fold_index, &truth, &scores)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn scalar_head_shape_and_clamp() {
        let cfg = PoseModelConfig::new(ScorerMode::ImagesAndLandmarks, 0.125, 32, 32);
        let model = PoseRegressor::new(cfg, 0, &Device::Cpu).unwrap();
        let x = Tensor::zeros((3, 7, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(model.forward_t(&x, false).unwrap().dims(), &[3]);
        let bad = Tensor::zeros((3, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.forward_t(&bad, false), Err(Error::Shape(_))));
    }

    #[test]
    fn landmark_modes_need_predictions() {
        let f = Frame::zeros(32, 32);
        assert!(PoseSample::new(ScorerMode::LandmarksOnly, &f, None, 2.0, 0.0, PoseCategory::Green).is_err());
        let s = PoseSample::new(ScorerMode::ImagesOnly, &f, None, 2.0, 0.0, PoseCategory::Green).unwrap();
        assert_eq!(s.channels.len(), 1);
    }

    #[test]
    fn empty_sets_rejected() {
        let cfg = PoseModelConfig::new(ScorerMode::ImagesOnly, 0.125, 32, 32);
        let model = PoseRegressor::new(cfg, 0, &Device::Cpu).unwrap();
        assert!(train_pose_regressor(&model, &[], &[], &PoseTrainConfig::default(), None).is_err());
        assert!(evaluate_pose_regressor(&model, 0, &[], 4).is_err());
    }
}
