//! Clip admission and LVEF value handling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Minimum frame count that admits a clip regardless of duration.
pub const MIN_GATE_FRAMES: usize = 26;
/// Minimum duration in seconds that admits a clip regardless of frame count.
pub const MIN_GATE_SECONDS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Domain(format!("fps must be positive, got {fps}")));
        }
        if let Some(first) = frames.first() {
            if frames
                .iter()
                .any(|f| f.width() != first.width() || f.height() != first.height())
            {
                return Err(Error::Shape("clip frames differ in size".into()));
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }
}

/// A clip qualifies with at least 26 frames or at least one second of video.
pub fn gate_frames(n: usize, fps: f64) -> bool {
    n >= MIN_GATE_FRAMES || (fps > 0.0 && n as f64 / fps >= MIN_GATE_SECONDS)
}

pub fn gate_clip(clip: &VideoClip) -> bool {
    gate_frames(clip.len(), clip.fps)
}

/// Clamp a raw regression output to `[0, 100]`; NaN becomes 0.
pub fn clamp_lvef(raw: f64) -> f64 {
    if raw.is_nan() {
        0.0
    } else {
        raw.clamp(0.0, 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvefEstimate {
    pub value: f64,
    pub clip_id: String,
    /// Inclusive `[start, end]` frame indices the estimate was computed from.
    pub frame_range: [usize; 2],
}

/// Serialized LVEF report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvefReport {
    pub clip_id: String,
    pub frame_range: [usize; 2],
    pub lvef: f64,
    pub model_version: String,
}

impl LvefReport {
    pub fn new(estimate: &LvefEstimate, model_version: impl Into<String>) -> Self {
        Self {
            clip_id: estimate.clip_id.clone(),
            frame_range: estimate.frame_range,
            lvef: estimate.value,
            model_version: model_version.into(),
        }
    }
}

/// How frames are picked from a clip for the video model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSampling {
    pub length: usize,
    pub stride: usize,
}

impl Default for ClipSampling {
    fn default() -> Self {
        Self {
            length: 32,
            stride: 1,
        }
    }
}

impl ClipSampling {
    /// Indices of the frames fed to the model: `0, stride, 2*stride, ...`
    /// from the start of the clip. Short clips repeat their last frame.
    pub fn indices(&self, clip_len: usize) -> Vec<usize> {
        assert!(clip_len > 0, "cannot sample an empty clip");
        let stride = self.stride.max(1);
        (0..self.length)
            .map(|i| (i * stride).min(clip_len - 1))
            .collect()
    }
}
