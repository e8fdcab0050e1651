//! Masked, visibility-weighted negative log-likelihood over spatial softmax
//! maps, with its analytic gradient.
//!
//! For logits of shape `(B, L, H, W)` the loss is
//! `(1/B) * sum_b vis_w[b] * sum_l mask[b,l] * -log softmax(logits[b,l])[target[b,l]]`.

use crate::error::{Error, Result};

use super::heatmap::HeatmapLogits;

/// Targets, annotation mask and per-sample visibility weights for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationBatch {
    batch: usize,
    landmarks: usize,
    targets: Vec<usize>,
    mask: Vec<bool>,
    vis_w: Vec<f64>,
}

impl AnnotationBatch {
    /// `targets` and `mask` are `(B, L)` row-major; `vis_w` is `(B,)`.
    pub fn new(
        batch: usize,
        landmarks: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        vis_w: Vec<f64>,
    ) -> Result<Self> {
        if targets.len() != batch * landmarks || mask.len() != batch * landmarks {
            return Err(Error::Shape(format!(
                "targets/mask must hold {batch}x{landmarks} entries, got {} and {}",
                targets.len(),
                mask.len()
            )));
        }
        if vis_w.len() != batch {
            return Err(Error::Shape(format!(
                "vis_w must hold {batch} entries, got {}",
                vis_w.len()
            )));
        }
        if let Some(w) = vis_w.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Domain(format!("visibility weights must be positive, got {w}")));
        }
        Ok(Self {
            batch,
            landmarks,
            targets,
            mask,
            vis_w,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn vis_w(&self) -> &[f64] {
        &self.vis_w
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    pub fn vis_w_mut(&mut self) -> &mut [f64] {
        &mut self.vis_w
    }

    fn check_against(&self, logits: &HeatmapLogits) -> Result<usize> {
        let [b, l, h, w] = logits.shape();
        if b != self.batch || l != self.landmarks {
            return Err(Error::Shape(format!(
                "logits are {b}x{l} but annotations are {}x{}",
                self.batch, self.landmarks
            )));
        }
        let hw = h * w;
        if let Some(t) = self.targets.iter().find(|&&t| t >= hw) {
            return Err(Error::Shape(format!("target index {t} outside 0..{hw}")));
        }
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(hw)
    }
}

/// Log-sum-exp of one channel, max-subtracted.
fn log_sum_exp(channel: &[f32]) -> f64 {
    let max = channel.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = channel.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

pub fn masked_weighted_nll(logits: &HeatmapLogits, batch: &AnnotationBatch) -> Result<f64> {
    batch.check_against(logits)?;
    let mut total = 0.0;
    for b in 0..batch.batch {
        let mut sample = 0.0;
        for l in 0..batch.landmarks {
            let k = b * batch.landmarks + l;
            if !batch.mask[k] {
                continue;
            }
            let channel = logits.channel(b, l);
            sample += log_sum_exp(channel) - channel[batch.targets[k]] as f64;
        }
        total += sample * batch.vis_w[b];
    }
    Ok(total / batch.batch as f64)
}

/// Loss together with `d loss / d logits`, laid out like the logits.
///
/// For an annotated channel the gradient is
/// `vis_w[b] / B * (softmax - onehot(target))`; unannotated channels get zero.
pub fn masked_weighted_nll_with_grad(
    logits: &HeatmapLogits,
    batch: &AnnotationBatch,
) -> Result<(f64, Vec<f64>)> {
    let hw = batch.check_against(logits)?;
    let mut grad = vec![0.0f64; logits.data().len()];
    let mut total = 0.0;
    let inv_b = 1.0 / batch.batch as f64;
    for b in 0..batch.batch {
        for l in 0..batch.landmarks {
            let k = b * batch.landmarks + l;
            if !batch.mask[k] {
                continue;
            }
            let channel = logits.channel(b, l);
            let lse = log_sum_exp(channel);
            let target = batch.targets[k];
            total += (lse - channel[target] as f64) * batch.vis_w[b];
            let scale = batch.vis_w[b] * inv_b;
            let g = &mut grad[k * hw..(k + 1) * hw];
            for (gi, &v) in g.iter_mut().zip(channel) {
                *gi = (v as f64 - lse).exp() * scale;
            }
            g[target] -= scale;
        }
    }
    Ok((total * inv_b, grad))
}
