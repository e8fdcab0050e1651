//! Prompt-adapter pose classifier.
//!
//! A frozen decoder-only language backbone reads a fixed task instruction.
//! Learnable adaption prompts, shifted by a projection of the image
//! encoder's features, are attended to by every adapted layer through a
//! zero-initialized tanh gate. A linear head maps the final hidden state of
//! the last token to the three categories. Only the image encoder, the
//! projections, the prompts, the gates and the head train.

use std::path::Path;

use candle_core::{Device, Module, Tensor, D};
use candle_nn::init::Init;
use candle_nn::{embedding, linear, linear_no_bias, Embedding, Linear, VarBuilder};
use echoguide_core::ingest::augment::{AugmentParams, AugmentRanges};
use echoguide_core::pose::{evaluate_categories, ClassWeights, FoldResult, ScorerMode};
use echoguide_core::PoseCategory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::weighted_cross_entropy;
use crate::params::ParamStore;
use crate::pose::{batch_tensor, training_class_weights, PoseSample, SELECTION_WINDOW};
use crate::resnet::{ResNet, ResNetConfig};
use crate::tensor::scalar;
use crate::train::{
    adamw, check_finite, epoch_order, read_config, write_json, CyclicLr, EpochRecord, TrailingSelector, TrainLog,
    CONFIG_FILE, LOG_FILE, WEIGHTS_FILE,
};

pub const ADAPTER_SCHEMA_VERSION: u32 = 1;
pub const BACKBONE_FILE: &str = "backbone.safetensors";
pub const DEFAULT_INSTRUCTION: &str =
    "Rate the transducer pose of this apical four-chamber frame as green, yellow or red.";

/// Byte-level tokenizer: one token per UTF-8 byte after a BOS token.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: u32 = 256;
    pub const VOCAB_SIZE: usize = 257;

    pub fn encode(&self, text: &str) -> Vec<u32> {
        std::iter::once(Self::BOS)
            .chain(text.bytes().map(u32::from))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub norm_eps: f64,
    pub rope_theta: f64,
}

impl BackboneConfig {
    /// Two layers, 64 dims: small enough for the test suite.
    pub fn tiny() -> Self {
        Self {
            vocab_size: ByteTokenizer::VOCAB_SIZE,
            dim: 64,
            layers: 2,
            heads: 4,
            hidden_dim: 172,
            norm_eps: 1e-5,
            rope_theta: 10_000.0,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

struct FeedForward {
    w1: Linear,
    w2: Linear,
    w3: Linear,
}

struct Block {
    attention_norm: RmsNorm,
    attention: Attention,
    ffn_norm: RmsNorm,
    feed_forward: FeedForward,
}

/// RMS normalization built from differentiable primitives; candle's fused
/// kernel has no backward pass, which would cut the adapter off from the
/// loss.
struct RmsNorm {
    weight: Tensor,
    eps: f32,
}

impl RmsNorm {
    fn new(size: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(size, "weight", Init::Const(1.0))?,
            eps: eps as f32,
        })
    }
}

impl Module for RmsNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        candle_nn::ops::rms_norm_slow(x, &self.weight, self.eps)
    }
}

/// Frozen LLaMA-style decoder. Parameter names follow the original LLaMA
/// checkpoints so real weights can be dropped in.
pub struct Backbone {
    pub config: BackboneConfig,
    pub store: ParamStore,
    tok_embeddings: Embedding,
    layers: Vec<Block>,
    norm: RmsNorm,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64, device: &Device) -> Result<Self> {
        if config.heads == 0 || config.dim % config.heads != 0 || config.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "dim {} must split into an even head size over {} heads",
                config.dim, config.heads
            )));
        }
        let store = ParamStore::new(seed, device);
        let vb = store.var_builder();
        let d = config.dim;
        let tok_embeddings = embedding(config.vocab_size, d, vb.pp("tok_embeddings"))?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let lvb = vb.pp(format!("layers.{i}"));
            let avb = lvb.pp("attention");
            let fvb = lvb.pp("feed_forward");
            layers.push(Block {
                attention_norm: RmsNorm::new(d, config.norm_eps, lvb.pp("attention_norm"))?,
                attention: Attention {
                    wq: linear_no_bias(d, d, avb.pp("wq"))?,
                    wk: linear_no_bias(d, d, avb.pp("wk"))?,
                    wv: linear_no_bias(d, d, avb.pp("wv"))?,
                    wo: linear_no_bias(d, d, avb.pp("wo"))?,
                },
                ffn_norm: RmsNorm::new(d, config.norm_eps, lvb.pp("ffn_norm"))?,
                feed_forward: FeedForward {
                    w1: linear_no_bias(d, config.hidden_dim, fvb.pp("w1"))?,
                    w2: linear_no_bias(config.hidden_dim, d, fvb.pp("w2"))?,
                    w3: linear_no_bias(d, config.hidden_dim, fvb.pp("w3"))?,
                },
            });
        }
        let norm = RmsNorm::new(d, config.norm_eps, vb.pp("norm"))?;
        Ok(Self {
            config,
            store,
            tok_embeddings,
            layers,
            norm,
        })
    }

    /// Backbone with pretrained weights from a safetensors file.
    pub fn from_file(config: BackboneConfig, path: &Path, device: &Device) -> Result<Self> {
        let b = Self::new(config, 0, device)?;
        b.store.load(path)?;
        Ok(b)
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    fn rope_tables(&self, t: usize, device: &Device) -> Result<(Tensor, Tensor)> {
        let half = self.config.head_dim() / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for pos in 0..t {
            for i in 0..half {
                let freq = self.config.rope_theta.powf(-(2.0 * i as f64) / self.config.head_dim() as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok((
            Tensor::from_vec(cos, (t, half), device)?,
            Tensor::from_vec(sin, (t, half), device)?,
        ))
    }
}

/// Rotate the two halves of the head dimension: `x` is `(B, H, T, hd)`.
fn apply_rope(x: &Tensor, cos: &Tensor, sin: &Tensor) -> candle_core::Result<Tensor> {
    let hd = x.dim(D::Minus1)?;
    let x1 = x.narrow(D::Minus1, 0, hd / 2)?;
    let x2 = x.narrow(D::Minus1, hd / 2, hd / 2)?;
    let a = (x1.broadcast_mul(cos)? - x2.broadcast_mul(sin)?)?;
    let b = (x1.broadcast_mul(sin)? + x2.broadcast_mul(cos)?)?;
    Tensor::cat(&[&a, &b], D::Minus1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub schema_version: u32,
    pub mode: ScorerMode,
    pub encoder_depth: usize,
    pub width_multiplier: f64,
    pub input_hw: [usize; 2],
    pub blob_sigma: f64,
    pub backbone: BackboneConfig,
    /// Adaption prompt length per adapted layer.
    pub prompt_len: usize,
    /// How many of the top backbone layers carry prompts.
    pub adapted_layers: usize,
    pub instruction: String,
}

impl AdapterConfig {
    pub fn new(mode: ScorerMode, width_multiplier: f64, height: usize, width: usize) -> Self {
        let backbone = BackboneConfig::tiny();
        Self {
            schema_version: ADAPTER_SCHEMA_VERSION,
            mode,
            encoder_depth: 18,
            width_multiplier,
            input_hw: [height, width],
            blob_sigma: 2.0,
            adapted_layers: backbone.layers,
            backbone,
            prompt_len: 10,
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

/// Trainable adapter parameters for one backbone.
pub struct AdapterScorer {
    pub config: AdapterConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    encoder: ResNet,
    visual_proj: Linear,
    prompts: Vec<Tensor>,
    gates: Vec<Tensor>,
    head: Linear,
    tokens: Tensor,
}

impl AdapterScorer {
    pub fn new(config: AdapterConfig, backbone: Backbone, seed: u64) -> Result<Self> {
        if config.backbone != backbone.config {
            return Err(Error::Config("adapter and backbone configs disagree".into()));
        }
        if config.adapted_layers > backbone.config.layers {
            return Err(Error::Config(format!(
                "cannot adapt {} of {} layers",
                config.adapted_layers, backbone.config.layers
            )));
        }
        let device = backbone.store.device().clone();
        let store = ParamStore::new(seed, &device);
        let vb = store.var_builder();
        let d = backbone.config.dim;
        let enc_cfg = ResNetConfig::new(config.encoder_depth, config.width_multiplier, config.mode.input_channels());
        let encoder = ResNet::new(enc_cfg, vb.pp("encoder"))?;
        let visual_proj = linear(encoder.out_channels(), d, vb.pp("visual_proj"))?;
        let mut prompts = Vec::new();
        let mut gates = Vec::new();
        for i in 0..config.adapted_layers {
            prompts.push(vb.get_with_hints(
                (config.prompt_len, d),
                &format!("prompts.{i}"),
                Init::Randn { mean: 0.0, stdev: 0.02 },
            )?);
            gates.push(vb.get_with_hints(backbone.config.heads, &format!("gates.{i}"), Init::Const(0.0))?);
        }
        let head = linear(d, 3, vb.pp("head"))?;
        let ids = ByteTokenizer.encode(&config.instruction);
        let tokens = Tensor::from_vec(ids.clone(), (1, ids.len()), &device)?;
        Ok(Self {
            config,
            store,
            backbone,
            encoder,
            visual_proj,
            prompts,
            gates,
            head,
            tokens,
        })
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let config: AdapterConfig = read_config(dir)?;
        let backbone = Backbone::from_file(config.backbone.clone(), &dir.join(BACKBONE_FILE), device)?;
        let model = Self::new(config, backbone, 0)?;
        model.store.load(&dir.join(WEIGHTS_FILE))?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(CONFIG_FILE), &self.config)?;
        self.store.save(&dir.join(WEIGHTS_FILE))?;
        self.backbone.store.save(&dir.join(BACKBONE_FILE))
    }

    /// Category logits `(B, 3)` for `(B, C, H, W)` inputs.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.config.mode.input_channels() || [h, w] != self.config.input_hw {
            return Err(Error::Shape(format!(
                "adapter expects ({}, {:?}), got ({c}, [{h}, {w}])",
                self.config.mode.input_channels(),
                self.config.input_hw
            )));
        }
        let cfg = &self.backbone.config;
        let (nh, hd, d) = (cfg.heads, cfg.head_dim(), cfg.dim);
        let device = x.device();
        let visual = self.visual_proj.forward(&self.encoder.pooled(x, train)?)?;

        let t = self.tokens.dim(1)?;
        let (cos, sin) = self.backbone.rope_tables(t, device)?;
        let mask: Vec<f32> = (0..t)
            .flat_map(|i| (0..t).map(move |j| if j > i { -1e9 } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (t, t), device)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let heads = |y: Tensor, len: usize| -> candle_core::Result<Tensor> {
            y.reshape((b, len, nh, hd))?.transpose(1, 2)?.contiguous()
        };

        let mut hidden = self
            .backbone
            .tok_embeddings
            .forward(&self.tokens)?
            .broadcast_as((b, t, d))?
            .contiguous()?;
        let first_adapted = cfg.layers - self.config.adapted_layers;
        for (li, block) in self.backbone.layers.iter().enumerate() {
            let attn = &block.attention;
            let xn = block.attention_norm.forward(&hidden)?;
            let q = apply_rope(&heads(attn.wq.forward(&xn)?, t)?, &cos, &sin)?;
            let k = apply_rope(&heads(attn.wk.forward(&xn)?, t)?, &cos, &sin)?;
            let v = heads(attn.wv.forward(&xn)?, t)?;
            let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?.broadcast_add(&mask)?;
            let mut out = candle_nn::ops::softmax(&scores, D::Minus1)?.matmul(&v)?;
            if li >= first_adapted {
                let ai = li - first_adapted;
                let p = self.prompts[ai]
                    .unsqueeze(0)?
                    .broadcast_add(&visual.unsqueeze(1)?)?;
                let len = self.config.prompt_len;
                let pk = heads(attn.wk.forward(&p)?, len)?;
                let pv = heads(attn.wv.forward(&p)?, len)?;
                let ps = (q.matmul(&pk.transpose(2, 3)?.contiguous()?)? * scale)?;
                let pa = candle_nn::ops::softmax(&ps, D::Minus1)?.matmul(&pv)?;
                let gate = self.gates[ai].tanh()?.reshape((1, nh, 1, 1))?;
                out = (out + pa.broadcast_mul(&gate)?)?;
            }
            let out = out.transpose(1, 2)?.reshape((b, t, d))?;
            hidden = (hidden + attn.wo.forward(&out)?)?;
            let ff = &block.feed_forward;
            let xn = block.ffn_norm.forward(&hidden)?;
            let act = (candle_nn::ops::silu(&ff.w1.forward(&xn)?)? * ff.w3.forward(&xn)?)?;
            hidden = (hidden + ff.w2.forward(&act)?)?;
        }
        let last = self.backbone.norm.forward(&hidden)?.narrow(1, t - 1, 1)?.squeeze(1)?;
        Ok(self.head.forward(&last)?)
    }

    pub fn predict(&self, samples: &[&PoseSample]) -> Result<Vec<PoseCategory>> {
        let x = batch_tensor(samples, self.store.device())?;
        let idx = self.forward_t(&x, false)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
        Ok(idx
            .into_iter()
            .map(|i| PoseCategory::from_index(i as usize).expect("three logits"))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: CyclicLr,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: Option<AugmentRanges>,
    pub log_every: usize,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            schedule: CyclicLr::default(),
            weight_decay: 0.02,
            seed: 0,
            augment: Some(AugmentRanges::default()),
            log_every: 10,
        }
    }
}

fn classification_loss(model: &AdapterScorer, samples: &[PoseSample], weights: &ClassWeights, bs: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(bs.max(1)) {
        let refs: Vec<&PoseSample> = chunk.iter().collect();
        let x = batch_tensor(&refs, model.store.device())?;
        let cats: Vec<PoseCategory> = chunk.iter().map(|s| s.category).collect();
        let loss = weighted_cross_entropy(&model.forward_t(&x, false)?, &cats, weights)?;
        total += scalar(&loss)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Train the adapter with AdamW under a triangular cyclical schedule. The
/// backbone digest is compared before and after; any drift is an error.
pub fn train_adapter_scorer(
    model: &AdapterScorer,
    train: &[PoseSample],
    val: &[PoseSample],
    cfg: &AdapterTrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no adapter training samples".into()));
    }
    let before = model.backbone.digest()?;
    let weights = training_class_weights(train);
    let mut opt = adamw(model.store.trainable_vars(), cfg.schedule.at(0), cfg.weight_decay)?;
    let mut selector = TrailingSelector::new(SELECTION_WINDOW, cfg.epochs);
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
            cfg.schedule.apply(&mut opt, step);
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
            let cats: Vec<PoseCategory> = batch.iter().map(|s| s.category).collect();
            let loss = weighted_cross_entropy(&model.forward_t(&x, true)?, &cats, &weights)?;
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
            Some(check_finite(classification_loss(model, val, &weights, cfg.batch_size)?, step)?)
        };
        tracing::info!(epoch, train_loss, ?val_loss, "adapter epoch");
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
    let after = model.backbone.digest()?;
    if before != after {
        return Err(Error::InvariantViolation(format!(
            "backbone parameters changed during adapter training ({before} -> {after})"
        )));
    }
    if let Some(dir) = out_dir {
        model.save(dir)?;
        write_json(&dir.join(LOG_FILE), &log)?;
    }
    Ok(log)
}

pub fn evaluate_adapter(model: &AdapterScorer, fold_index: usize, samples: &[PoseSample], bs: usize) -> Result<FoldResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no pose test samples".into()));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(bs.max(1)) {
        let refs: Vec<&PoseSample> = chunk.iter().collect();
        preds.extend(model.predict(&refs)?);
    }
    let truth: Vec<PoseCategory> = samples.iter().map(|s| s.category).collect();
    Ok(evaluate_categories(fold_index, &truth, &preds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn tiny_model() -> AdapterScorer {
        let backbone = Backbone::new(BackboneConfig::tiny(), 1, &Device::Cpu).unwrap();
        AdapterScorer::new(AdapterConfig::new(ScorerMode::ImagesOnly, 0.125, 32, 32), backbone, 2).unwrap()
    }

    #[test]
    fn logits_shape() {
        let m = tiny_model();
        let x = Tensor::zeros((4, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.forward_t(&x, false).unwrap().dims(), &[4, 3]);
    }

    #[test]
    fn gates_start_closed() {
        // With zero gates the image cannot change the output.
        let m = tiny_model();
        let a = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::ones((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let la = m.forward_t(&a, false).unwrap().to_vec2::<f32>().unwrap();
        let lb = m.forward_t(&b, false).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn every_adapter_parameter_receives_gradient() {
        let m = tiny_model();
        let x = Tensor::rand(0f32, 1f32, (2, 1, 32, 32), &Device::Cpu).unwrap();
        let logits = m.forward_t(&x, true).unwrap();
        let cats = [PoseCategory::Green, PoseCategory::Red];
        let loss = weighted_cross_entropy(&logits, &cats, &ClassWeights::default()).unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in m.store.named_vars() {
            if name.ends_with("running_mean") || name.ends_with("running_var") {
                continue;
            }
            assert!(grads.get(var.as_tensor()).is_some(), "{name} is cut off from the loss");
        }
    }

    #[test]
    fn tokenizer_is_bytes_after_bos() {
        assert_eq!(ByteTokenizer.encode("ab"), vec![256, 97, 98]);
    }

    #[test]
    fn backbone_names_follow_llama() {
        let b = Backbone::new(BackboneConfig::tiny(), 0, &Device::Cpu).unwrap();
        let names: Vec<String> = b.store.named_vars().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layers.1.attention.wq.weight".to_string()));
        assert!(names.contains(&"tok_embeddings.weight".to_string()));
    }
}
