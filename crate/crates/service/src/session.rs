//! Per-stream cascade state: detector, visibility gate, scorer, green-frame
//! buffer and LVEF.

use std::time::Instant;

use echoguide_core::cascade::{timer_resolution, GreenBuffer, GuidanceFrameResult, ThroughputStats};
use echoguide_core::lvef::{VideoClip, MIN_GATE_FRAMES};
use echoguide_core::pose::scorer_channels;
use echoguide_core::Frame;
use echoguide_nn::video::estimate_lvef;

use crate::error::{Error, Result};
use crate::models::CascadeModels;

pub struct Session {
    id: String,
    models: CascadeModels,
    buffer: GreenBuffer<Frame>,
    processed: usize,
}

impl Session {
    pub fn new(id: impl Into<String>, models: CascadeModels, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Session(format!("fps must be positive, got {fps}")));
        }
        let sampling = models.lvef.sampling();
        let capacity = (sampling.length * sampling.stride.max(1)).max(MIN_GATE_FRAMES);
        Ok(Self {
            id: id.into(),
            models,
            buffer: GreenBuffer::new(fps, capacity),
            processed: 0,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn models(&self) -> &CascadeModels {
        &self.models
    }

    pub fn frames_processed(&self) -> usize {
        self.processed
    }

    /// Run the whole cascade on one frame.
    pub fn process_frame(&mut self, frame_index: usize, frame: &Frame) -> Result<GuidanceFrameResult> {
        let start = Instant::now();
        let models = &self.models;
        let landmarks = models
            .detector
            .predict(&[frame])?
            .pop()
            .expect("one prediction per frame");
        let mode = models.scorer.mode();
        let channels = scorer_channels(mode, frame, Some(&landmarks), models.scorer.blob_sigma())?;
        let score = models.scorer.score(channels)?;

        let update = self.buffer.update(frame_index, score.category(), frame.clone());
        let lvef = if update.fire {
            let frames: Vec<Frame> = match models.lvef_input_hw {
                Some([h, w]) => self.buffer.items().map(|f| f.resize_nearest(w, h)).collect(),
                None => self.buffer.items().cloned().collect(),
            };
            let first = frame_index + 1 - frames.len();
            let clip = VideoClip::new(frames, self.buffer.fps())?;
            let clip_id = format!("{}:{first}-{frame_index}", self.id);
            Some(estimate_lvef(models.lvef.as_ref(), &clip, &clip_id, first)?)
        } else {
            None
        };
        self.processed += 1;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(GuidanceFrameResult::new(frame_index, score, landmarks, lvef, latency_ms))
    }
}

/// End-to-end frame rate of the cascade over `frames`, model loading
/// excluded.
pub fn measure_throughput(session: &mut Session, frames: &[Frame]) -> Result<ThroughputStats> {
    if frames.is_empty() {
        return Err(Error::Session("throughput needs at least one frame".into()));
    }
    let resolution = timer_resolution();
    let start = Instant::now();
    let base = session.frames_processed();
    for (i, f) in frames.iter().enumerate() {
        session.process_frame(base + i, f)?;
    }
    Ok(ThroughputStats::new(frames.len(), start.elapsed(), resolution))
}
