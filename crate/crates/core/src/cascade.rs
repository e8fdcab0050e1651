//! Model-free parts of the real-time cascade: the green-frame buffer that
//! decides when LVEF estimation fires, per-frame results, and throughput.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::landmarks::LandmarkPrediction;
use crate::lvef::{gate_frames, LvefEstimate, MIN_GATE_FRAMES};
use crate::pose::{score_to_category, PoseScore};
use crate::rubric::PoseCategory;

/// Frames between repeated LVEF emissions within one green run.
pub const REFIRE_INTERVAL: usize = MIN_GATE_FRAMES;

/// Contiguous run of green frames.
///
/// The buffer fires when the run first satisfies the clip gate and then
/// once per additional [`REFIRE_INTERVAL`] frames. Any non-green frame clears
/// it. Only the most recent `capacity` payloads are retained; the run length
/// keeps counting.
#[derive(Debug, Clone)]
pub struct GreenBuffer<T> {
    fps: f64,
    capacity: usize,
    items: VecDeque<T>,
    run_len: usize,
    run_start: usize,
    next_fire: Option<usize>,
    emitted_count: usize,
}

/// Outcome of one buffer update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferUpdate {
    pub fire: bool,
    /// Inclusive frame range of the current run (when non-empty).
    pub run: Option<[usize; 2]>,
}

impl<T> GreenBuffer<T> {
    pub fn new(fps: f64, capacity: usize) -> Self {
        Self {
            fps,
            capacity: capacity.max(1),
            items: VecDeque::new(),
            run_len: 0,
            run_start: 0,
            next_fire: None,
            emitted_count: 0,
        }
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn run_len(&self) -> usize {
        self.run_len
    }

    pub fn emitted_count(&self) -> usize {
        self.emitted_count
    }

    /// Retained payloads, oldest first.
    pub fn items(&self) -> impl ExactSizeIterator<Item = &T> {
        self.items.iter()
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.run_len = 0;
        self.next_fire = None;
    }

    /// Feed one classified frame.
    pub fn update(&mut self, frame_index: usize, category: PoseCategory, item: T) -> BufferUpdate {
        if category != PoseCategory::Green {
            self.clear();
            return BufferUpdate { fire: false, run: None };
        }
        if self.run_len == 0 {
            self.run_start = frame_index;
        }
        self.run_len += 1;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);

        let fire = match self.next_fire {
            None if gate_frames(self.run_len, self.fps) => true,
            Some(at) if self.run_len == at => true,
            _ => false,
        };
        if fire {
            self.next_fire = Some(self.run_len + REFIRE_INTERVAL);
            self.emitted_count += 1;
        }
        BufferUpdate {
            fire,
            run: Some([self.run_start, frame_index]),
        }
    }
}

/// Functional form of [`GreenBuffer::update`].
pub fn update_green_buffer<T>(
    mut buffer: GreenBuffer<T>,
    frame_index: usize,
    category: PoseCategory,
    item: T,
) -> (GreenBuffer<T>, bool) {
    let fire = buffer.update(frame_index, category, item).fire;
    (buffer, fire)
}

/// Per-frame output of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceFrameResult {
    pub frame_index: usize,
    pub category: PoseCategory,
    pub score: PoseScore,
    pub landmarks: Vec<LandmarkPrediction>,
    pub lvef: Option<LvefEstimate>,
    pub latency_ms: f64,
    pub dropped_count: usize,
}

impl GuidanceFrameResult {
    /// The category is always derived from the score.
    pub fn new(
        frame_index: usize,
        score: PoseScore,
        landmarks: Vec<LandmarkPrediction>,
        lvef: Option<LvefEstimate>,
        latency_ms: f64,
    ) -> Self {
        Self {
            frame_index,
            category: score_to_category(score.value()),
            score,
            landmarks,
            lvef,
            latency_ms,
            dropped_count: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    pub frames_processed: usize,
    pub elapsed_seconds: f64,
    pub fps: f64,
}

impl ThroughputStats {
    /// Elapsed time below `resolution` is raised to it so the rate stays
    /// finite.
    pub fn new(frames_processed: usize, elapsed: Duration, resolution: Duration) -> Self {
        let elapsed_seconds = elapsed.max(resolution).as_secs_f64().max(f64::MIN_POSITIVE);
        Self {
            frames_processed,
            elapsed_seconds,
            fps: frames_processed as f64 / elapsed_seconds,
        }
    }
}

/// Smallest non-zero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let start = std::time::Instant::now();
    loop {
        let d = start.elapsed();
        if !d.is_zero() {
            return d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use PoseCategory::*;

    fn fires(seq: &[PoseCategory], fps: f64) -> Vec<usize> {
        let mut buf = GreenBuffer::new(fps, 64);
        seq.iter()
            .enumerate()
            .filter_map(|(i, &c)| buf.update(i, c, ()).fire.then_some(i))
            .collect()
    }

    #[test]
    fn fires_on_twenty_sixth_green() {
        let mut seq = vec![Green; 25];
        assert!(fires(&seq, 30.0).is_empty());
        seq.push(Green);
        assert_eq!(fires(&seq, 30.0), vec![25]);
    }

    #[test]
    fn refires_every_twenty_six() {
        assert_eq!(fires(&vec![Green; 52], 30.0), vec![25, 51]);
    }

    #[test]
    fn reset_on_non_green() {
        let mut seq = vec![Green; 10];
        seq.push(Red);
        seq.extend(vec![Green; 26]);
        assert_eq!(fires(&seq, 30.0), vec![36]);
    }

    #[test]
    fn duration_branch_fires_early() {
        // 20 frames at 20 fps is one second.
        assert_eq!(fires(&vec![Green; 20], 20.0), vec![19]);
        assert_eq!(fires(&vec![Green; 46], 20.0), vec![19, 45]);
    }

    #[test]
    fn capacity_bounds_payloads() {
        let mut buf = GreenBuffer::new(30.0, 4);
        for i in 0..10 {
            buf.update(i, Green, i);
        }
        assert_eq!(buf.run_len(), 10);
        assert_eq!(buf.items().copied().collect::<Vec<_>>(), vec![6, 7, 8, 9]);
    }

    #[test]
    fn throughput_examples() {
        let s = ThroughputStats::new(140, Duration::from_secs(10), Duration::from_nanos(1));
        assert_eq!(s.fps, 14.0);
        let z = ThroughputStats::new(5, Duration::ZERO, Duration::from_millis(1));
        assert_eq!(z.elapsed_seconds, 0.001);
        assert!(z.fps.is_finite());
        assert!(!timer_resolution().is_zero());
    }

    #[test]
    fn result_category_follows_score() {
        let r = GuidanceFrameResult::new(3, PoseScore::new(0.4), vec![], None, 1.0);
        assert_eq!(r.category, Green);
        assert!(r.lvef.is_none());
    }
}
