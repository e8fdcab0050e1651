//! Heatmap landmark detector: residual encoder, five-stage upsampling
//! decoder, one logit map per landmark.

use std::path::Path;

use candle_core::{Device, Module, ModuleT, Tensor};
use candle_nn::{batch_norm, conv2d, conv2d_no_bias, BatchNorm, Conv2d, Conv2dConfig, VarBuilder};
use echoguide_core::ingest::augment::{augment_frame, AugmentParams, AugmentRanges};
use echoguide_core::ingest::echonet::LandmarkAnnotation;
use echoguide_core::landmarks::{
    encode_target_index, evaluate_landmark_error, predict_landmarks, spatial_softmax, AnnotationBatch,
    LandmarkErrorConfig, LandmarkErrorReport, LandmarkPrediction, UncertaintyRule, VisWeightMap, VisibilityGate,
    NUM_LANDMARKS,
};
use echoguide_core::Frame;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::masked_weighted_nll;
use crate::params::ParamStore;
use crate::resnet::{scaled, Features, ResNet, ResNetConfig};
use crate::tensor::{frames_to_tensor, scalar, to_heatmap_logits};
use crate::train::{adam, check_finite, epoch_order, read_config, save_checkpoint, write_json, TrainLog, LOG_FILE, WEIGHTS_FILE};

pub const LANDMARK_SCHEMA_VERSION: u32 = 1;
const DECODER_CHANNELS: [usize; 5] = [512, 256, 128, 64, 64];

/// Self-describing checkpoint config. Field set is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkModelConfig {
    pub schema_version: u32,
    pub encoder_depth: usize,
    pub width_multiplier: f64,
    /// `[height, width]`.
    pub input_hw: [usize; 2],
    pub num_landmarks: usize,
    pub vis_weight_map: VisWeightMap,
    pub tau: f64,
    pub r_vis: f64,
    pub p_vis: f64,
}

impl LandmarkModelConfig {
    /// Defaults for a given resolution: uniform-level tau and the scaled
    /// visibility gate.
    pub fn new(encoder_depth: usize, width_multiplier: f64, height: usize, width: usize) -> Self {
        let gate = VisibilityGate::for_resolution(height, width);
        Self {
            schema_version: LANDMARK_SCHEMA_VERSION,
            encoder_depth,
            width_multiplier,
            input_hw: [height, width],
            num_landmarks: NUM_LANDMARKS,
            vis_weight_map: VisWeightMap::default(),
            tau: 1.0 / (height * width) as f64,
            r_vis: gate.r_vis,
            p_vis: gate.p_vis,
        }
    }

    pub fn gate(&self) -> VisibilityGate {
        VisibilityGate {
            r_vis: self.r_vis,
            p_vis: self.p_vis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != LANDMARK_SCHEMA_VERSION {
            return Err(Error::Config(format!("unknown schema_version {}", self.schema_version)));
        }
        if self.num_landmarks != NUM_LANDMARKS {
            return Err(Error::Config(format!("num_landmarks must be {NUM_LANDMARKS}")));
        }
        let [h, w] = self.input_hw;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty input size {h}x{w}")));
        }
        if !(self.width_multiplier > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("width_multiplier and tau must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LandmarkModelConfig {
    fn default() -> Self {
        Self::new(34, 1.0, 112, 112)
    }
}

struct DecoderBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

pub struct LandmarkModel {
    encoder: ResNet,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl LandmarkModel {
    pub fn new(config: &LandmarkModelConfig, vb: VarBuilder) -> Result<Self> {
        let m = config.width_multiplier;
        let encoder = ResNet::new(ResNetConfig::new(config.encoder_depth, m, 3), vb.pp("encoder"))?;
        let skips = encoder.feature_channels();
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut decoder = Vec::with_capacity(5);
        let mut cin = skips[4];
        for (i, &c) in DECODER_CHANNELS.iter().enumerate() {
            let cout = scaled(c, m);
            // Blocks 0..4 concatenate the encoder level of matching scale.
            let skip = if i < 4 { skips[3 - i] } else { 0 };
            let bvb = vb.pp(format!("decoder.{i}"));
            decoder.push(DecoderBlock {
                conv: conv2d_no_bias(cin + skip, cout, 3, pad1, bvb.pp("conv"))?,
                bn: batch_norm(cout, candle_nn::BatchNormConfig::default(), bvb.pp("bn"))?,
            });
            cin = cout;
        }
        let head = conv2d(cin, config.num_landmarks, 1, Default::default(), vb.pp("head"))?;
        Ok(Self { encoder, decoder, head })
    }

    /// `(B, 1 or 3, H, W)` frames to `(B, 47, H, W)` logits.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let x = match c {
            1 => x.broadcast_as((b, 3, h, w))?.contiguous()?,
            3 => x.clone(),
            _ => return Err(Error::Shape(format!("expected 1 or 3 input channels, got {c}"))),
        };
        let Features([f1, f2, f3, f4, f5]) = self.encoder.features(&x, train)?;
        let skips = [f4, f3, f2, f1];
        let mut y = f5;
        for (i, block) in self.decoder.iter().enumerate() {
            let (_, _, yh, yw) = y.dims4()?;
            y = y.upsample_nearest2d(yh * 2, yw * 2)?;
            if let Some(s) = skips.get(i) {
                y = Tensor::cat(&[&y, s], 1)?;
            }
            y = block.bn.forward_t(&block.conv.forward(&y)?, train)?.relu()?;
        }
        // Drop the encoder's alignment padding.
        Ok(self.head.forward(&y)?.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

/// Model plus its parameters and config: what a checkpoint holds.
pub struct LandmarkDetector {
    pub config: LandmarkModelConfig,
    pub store: ParamStore,
    pub model: LandmarkModel,
}

impl LandmarkDetector {
    pub fn new(config: LandmarkModelConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, device);
        let model = LandmarkModel::new(&config, store.var_builder())?;
        Ok(Self { config, store, model })
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let config: LandmarkModelConfig = read_config(dir)?;
        let det = Self::new(config, 0, device)?;
        det.store.load(&dir.join(WEIGHTS_FILE))?;
        Ok(det)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.config, &self.store)
    }

    /// Load converted ImageNet encoder weights (torchvision names).
    pub fn load_pretrained_encoder(&self, path: &Path) -> Result<usize> {
        self.store.load_matching(path, "", "encoder.")
    }

    fn check_frame(&self, f: &Frame) -> Result<()> {
        let [h, w] = self.config.input_hw;
        if f.width() != w || f.height() != h {
            return Err(Error::Shape(format!(
                "frame {}x{} does not match the detector's {w}x{h}",
                f.width(),
                f.height()
            )));
        }
        Ok(())
    }

    /// Inference-mode logits.
    pub fn logits(&self, frames: &[&Frame]) -> Result<Tensor> {
        for f in frames {
            self.check_frame(f)?;
        }
        let x = frames_to_tensor(frames, self.store.device())?;
        self.model.forward_t(&x, false)
    }

    /// Decoded, gated predictions for every landmark of every frame.
    pub fn predict(&self, frames: &[&Frame]) -> Result<Vec<Vec<LandmarkPrediction>>> {
        let logits = to_heatmap_logits(&self.logits(frames)?)?;
        if !logits.is_finite() {
            return Err(Error::InvariantViolation("non-finite landmark logits".into()));
        }
        let maps = spatial_softmax(&logits);
        let rule = UncertaintyRule::AboveThreshold {
            tau: Some(self.config.tau),
        };
        let gate = self.config.gate();
        Ok((0..frames.len())
            .map(|b| predict_landmarks(&maps, b, rule, &gate))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSample {
    pub frame: Frame,
    pub annotation: LandmarkAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Random photometric/geometric augmentation; `None` trains on the raw
    /// frames.
    pub augment: Option<AugmentRanges>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub log_every: usize,
}

impl Default for LandmarkTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 512,
            learning_rate: 1e-3,
            seed: 0,
            augment: Some(AugmentRanges::default()),
            max_steps: None,
            log_every: 10,
        }
    }
}

/// Frames and annotation batch for a list of samples, optionally augmented.
pub fn prepare_batch(
    samples: &[&LandmarkSample],
    vis_map: &VisWeightMap,
    augment: Option<(&AugmentRanges, u64)>,
) -> Result<(Vec<Frame>, AnnotationBatch)> {
    let mut frames = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * NUM_LANDMARKS);
    let mut mask = Vec::with_capacity(samples.len() * NUM_LANDMARKS);
    let mut vis_w = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (w, h) = (s.frame.width(), s.frame.height());
        let dense = s.annotation.targets();
        let (frame, dense) = match augment {
            Some((ranges, seed)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let params = AugmentParams::sample_with(ranges, w, h, &mut rng);
                let (f, t) = augment_frame(&s.frame, Some(&dense), &params);
                (f, t.expect("targets were supplied"))
            }
            None => (s.frame.clone(), dense),
        };
        vis_w.push(vis_map.sample_weight(s.annotation.visibility.values()));
        for t in &dense {
            match t {
                Some(t) if t.in_bounds => {
                    targets.push(encode_target_index(t.point.x, t.point.y, w, h));
                    mask.push(true);
                }
                _ => {
                    targets.push(0);
                    mask.push(false);
                }
            }
        }
        frames.push(frame);
    }
    let batch = AnnotationBatch::new(samples.len(), NUM_LANDMARKS, targets, mask, vis_w)?;
    Ok((frames, batch))
}

/// Mean loss over a dataset in inference mode.
pub fn dataset_loss(det: &LandmarkDetector, samples: &[LandmarkSample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&LandmarkSample> = chunk.iter().collect();
        let (frames, batch) = prepare_batch(&refs, &det.config.vis_weight_map, None)?;
        let frame_refs: Vec<&Frame> = frames.iter().collect();
        let logits = det.logits(&frame_refs)?;
        total += scalar(&masked_weighted_nll(&logits, &batch)?)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Train with Adam on the masked weighted NLL. Writes a checkpoint (config,
/// weights, loss log) to `out_dir` when given.
pub fn train_landmark_detector(
    det: &LandmarkDetector,
    train: &[LandmarkSample],
    val: &[LandmarkSample],
    cfg: &LandmarkTrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no landmark training samples".into()));
    }
    for s in train.iter().chain(val) {
        det.check_frame(&s.frame)?;
    }
    let mut opt = adam(det.store.trainable_vars(), cfg.learning_rate)?;
    let mut log = TrainLog::default();
    let batch_size = cfg.batch_size.max(1);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        for chunk in order.chunks(batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let refs: Vec<&LandmarkSample> = chunk.iter().map(|&i| &train[i]).collect();
            let aug_seed = cfg.seed ^ ((step as u64 + 1) << 20);
            let augment = cfg.augment.as_ref().map(|r| (r, aug_seed));
            let (frames, batch) = prepare_batch(&refs, &det.config.vis_weight_map, augment)?;
            let frame_refs: Vec<&Frame> = frames.iter().collect();
            let x = frames_to_tensor(&frame_refs, det.store.device())?;
            let logits = det.model.forward_t(&x, true)?;
            let loss = masked_weighted_nll(&logits, &batch)?;
            let value = check_finite(scalar(&loss)?, step)?;
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
            log.record_step(value, cfg.log_every);
            epoch_sum += value * chunk.len() as f64;
            epoch_n += chunk.len();
            step += 1;
        }
        if epoch_n == 0 {
            break 'epochs;
        }
        let train_loss = epoch_sum / epoch_n as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(check_finite(dataset_loss(det, val, batch_size)?, step)?)
        };
        tracing::info!(epoch, train_loss, ?val_loss, "landmark epoch");
        log.epochs.push(crate::train::EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
    }
    log.finish();
    log.selected_epoch = log.epochs.last().map(|e| e.epoch);
    if let Some(dir) = out_dir {
        det.save(dir)?;
        write_json(&dir.join(LOG_FILE), &log)?;
    }
    Ok(log)
}

/// Landmark error of the detector over annotated samples.
pub fn evaluate_detector(
    det: &LandmarkDetector,
    samples: &[LandmarkSample],
    cfg: &LandmarkErrorConfig,
    batch_size: usize,
) -> Result<LandmarkErrorReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let frames: Vec<&Frame> = chunk.iter().map(|s| &s.frame).collect();
        for (pred, s) in det.predict(&frames)?.into_iter().zip(chunk) {
            pairs.push((pred, s.annotation.clone()));
        }
    }
    Ok(evaluate_landmark_error(&pairs, cfg)?)
}
