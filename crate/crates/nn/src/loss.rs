//! Differentiable training losses.

use candle_core::{DType, Tensor, D};
use echoguide_core::landmarks::AnnotationBatch;
use echoguide_core::pose::ClassWeights;
use echoguide_core::PoseCategory;

use crate::error::{Error, Result};
use crate::tensor::annotation_tensors;

/// Masked, visibility-weighted heatmap NLL on a `(B, L, H, W)` logits
/// tensor: `-(1/B) sum_b vis_w[b] sum_l mask[b,l] log softmax(logits[b,l])[target[b,l]]`.
pub fn masked_weighted_nll(logits: &Tensor, batch: &AnnotationBatch) -> Result<Tensor> {
    let (b, l, h, w) = logits.dims4()?;
    if b != batch.batch() || l != batch.landmarks() {
        return Err(Error::Shape(format!(
            "logits ({b}, {l}) vs annotations ({}, {})",
            batch.batch(),
            batch.landmarks()
        )));
    }
    if let Some(t) = batch.targets().iter().find(|&&t| t >= h * w) {
        return Err(Error::Shape(format!("target index {t} outside a {h}x{w} map")));
    }
    let (targets, mask, vis_w) = annotation_tensors(batch, logits.device())?;
    let logp = candle_nn::ops::log_softmax(&logits.reshape((b, l, h * w))?, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(2)?, 2)?.squeeze(2)?;
    let per_sample = (picked * mask)?.sum(1)?;
    let total = (per_sample * vis_w)?.sum_all()?;
    Ok((total.neg()? / b as f64)?)
}

/// Mean over samples of `w[category] * (pred - target)^2`.
pub fn weighted_mse(pred: &Tensor, target: &Tensor, categories: &[PoseCategory], weights: &ClassWeights) -> Result<Tensor> {
    let n = pred.elem_count();
    if target.elem_count() != n || categories.len() != n {
        return Err(Error::Shape(format!(
            "weighted_mse over {n} predictions, {} targets, {} categories",
            target.elem_count(),
            categories.len()
        )));
    }
    let w: Vec<f32> = categories.iter().map(|c| weights.get(*c) as f32).collect();
    let w = Tensor::from_vec(w, n, pred.device())?;
    let diff = (pred.flatten_all()? - target.flatten_all()?)?;
    Ok((diff.sqr()? * w)?.mean_all()?)
}

/// Class-weighted cross-entropy over `(B, 3)` logits.
pub fn weighted_cross_entropy(logits: &Tensor, categories: &[PoseCategory], weights: &ClassWeights) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != categories.len() || k != 3 {
        return Err(Error::Shape(format!("logits ({b}, {k}) for {} labels", categories.len())));
    }
    let device = logits.device();
    let idx: Vec<u32> = categories.iter().map(|c| c.index() as u32).collect();
    let w: Vec<f32> = categories.iter().map(|c| weights.get(*c) as f32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), device)?;
    let w = Tensor::from_vec(w, b, device)?;
    let logp = candle_nn::ops::log_softmax(&logits.to_dtype(DType::F32)?, D::Minus1)?;
    let picked = logp.gather(&idx, 1)?.squeeze(1)?;
    Ok(((picked * w)?.mean_all()?.neg())?)
}
