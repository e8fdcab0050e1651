//! Conversions between core frame types and candle tensors.

use candle_core::{DType, Device, Tensor};
use echoguide_core::landmarks::{AnnotationBatch, HeatmapLogits};
use echoguide_core::Frame;

use crate::error::{Error, Result};

/// Stack single-channel frames into `(B, 1, H, W)`.
pub fn frames_to_tensor(frames: &[&Frame], device: &Device) -> Result<Tensor> {
    let channels: Vec<Vec<&Frame>> = frames.iter().map(|f| vec![*f]).collect();
    channel_stacks_to_tensor(&channels, device)
}

/// Stack per-sample channel lists into `(B, C, H, W)`. Every sample must
/// have the same channel count and frame size.
pub fn channel_stacks_to_tensor(samples: &[Vec<&Frame>], device: &Device) -> Result<Tensor> {
    let first = samples
        .first()
        .and_then(|s| s.first())
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let c = samples[0].len();
    let mut data = Vec::with_capacity(samples.len() * c * w * h);
    for sample in samples {
        if sample.len() != c {
            return Err(Error::Shape(format!("expected {c} channels, got {}", sample.len())));
        }
        for f in sample {
            if f.width() != w || f.height() != h {
                return Err(Error::Shape(format!(
                    "frame {}x{} in a batch of {w}x{h}",
                    f.width(),
                    f.height()
                )));
            }
            data.extend_from_slice(f.pixels());
        }
    }
    Ok(Tensor::from_vec(data, (samples.len(), c, h, w), device)?)
}

/// Copy a `(B, L, H, W)` tensor out as core logits.
pub fn to_heatmap_logits(t: &Tensor) -> Result<HeatmapLogits> {
    let (b, l, h, w) = t.dims4()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(HeatmapLogits::new([b, l, h, w], data)?)
}

pub fn from_heatmap_logits(logits: &HeatmapLogits, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(logits.data(), logits.shape().to_vec(), device)?)
}

/// Annotation batch as `(targets u32 (B, L), mask f32 (B, L), vis_w f32 (B,))`.
pub fn annotation_tensors(batch: &AnnotationBatch, device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, l) = (batch.batch(), batch.landmarks());
    let targets: Vec<u32> = batch.targets().iter().map(|&t| t as u32).collect();
    let mask: Vec<f32> = batch.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let vis_w: Vec<f32> = batch.vis_w().iter().map(|&v| v as f32).collect();
    Ok((
        Tensor::from_vec(targets, (b, l), device)?,
        Tensor::from_vec(mask, (b, l), device)?,
        Tensor::from_vec(vis_w, b, device)?,
    ))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
