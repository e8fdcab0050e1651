//! Heatmap decoding: target indexing, spatial softmax, argmax decoding,
//! uncertainty radii and the visibility gate.

use serde::{Deserialize, Serialize};

use super::schema::{LandmarkId, NUM_LANDMARKS};
use crate::error::{Error, Result};

/// Flat `(y * W + x)` index of a pixel coordinate, rounded to the nearest
/// pixel and clamped into the frame.
pub fn encode_target_index(x: f64, y: f64, width: usize, height: usize) -> usize {
    debug_assert!(width > 0 && height > 0);
    let clamp = |v: f64, hi: usize| -> usize {
        if v.is_nan() {
            return 0;
        }
        v.round().clamp(0.0, (hi - 1) as f64) as usize
    };
    clamp(y, height) * width + clamp(x, width)
}

/// Inverse of [`encode_target_index`] for in-bounds integer coordinates.
pub fn decode_index(index: usize, width: usize) -> (usize, usize) {
    (index % width, index / width)
}

/// Dense `(B, L, H, W)` score tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapLogits {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl HeatmapLogits {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized heatmap shape {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::Shape(format!(
                "heatmap shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Logits of one `(b, l)` channel, flattened row-major.
    pub fn channel(&self, b: usize, l: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + l) * hw;
        &self.data[start..start + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Softmax over a single spatial channel, max-subtracted for stability.
pub fn softmax_channel(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / sum) as f32).collect()
}

/// Per-channel spatial probability maps with the same layout as the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl ProbabilityMaps {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn channel(&self, b: usize, l: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + l) * hw;
        &self.data[start..start + hw]
    }
}

pub fn spatial_softmax(logits: &HeatmapLogits) -> ProbabilityMaps {
    let hw = logits.height() * logits.width();
    let mut data = Vec::with_capacity(logits.data.len());
    for chunk in logits.data.chunks_exact(hw) {
        data.extend(softmax_channel(chunk));
    }
    ProbabilityMaps {
        shape: logits.shape,
        data,
    }
}

/// Argmax of a probability map; ties go to the lowest index.
pub fn argmax(map: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    best
}

/// Argmax coordinates `(x, y)` of every channel of batch item `b`.
pub fn decode_landmarks(maps: &ProbabilityMaps, b: usize) -> Vec<(usize, usize)> {
    (0..maps.shape[1])
        .map(|l| decode_index(argmax(maps.channel(b, l)), maps.width()))
        .collect()
}

/// How the "non-zero" support of a probability map is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UncertaintyRule {
    /// Count pixels strictly above `tau`; `None` means the uniform level
    /// `1 / (H * W)`.
    AboveThreshold { tau: Option<f64> },
    /// Smallest set of pixels holding at least `mass` of the probability.
    TopMass { mass: f64 },
}

impl Default for UncertaintyRule {
    fn default() -> Self {
        UncertaintyRule::AboveThreshold { tau: None }
    }
}

/// Radius of the circle with the same area as `n` pixels.
pub fn equivalent_radius(n: usize) -> f64 {
    (n as f64 / std::f64::consts::PI).sqrt()
}

/// Largest reportable radius for a `height x width` map.
pub fn max_radius(height: usize, width: usize) -> f64 {
    equivalent_radius(height * width)
}

/// Equivalent-circle radius of the above-threshold region. A map with no
/// pixel above the threshold reports the maximal radius.
pub fn uncertainty_radius(map: &[f32], tau: f64) -> f64 {
    let n = map.iter().filter(|&&p| p as f64 > tau).count();
    if n == 0 {
        equivalent_radius(map.len())
    } else {
        equivalent_radius(n)
    }
}

pub fn uncertainty_radius_top_mass(map: &[f32], mass: f64) -> f64 {
    let mut sorted: Vec<f32> = map.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0f64;
    let mut n = 0;
    for p in sorted {
        acc += p as f64;
        n += 1;
        if acc >= mass {
            break;
        }
    }
    equivalent_radius(n)
}

pub fn radius_with_rule(map: &[f32], rule: UncertaintyRule) -> f64 {
    match rule {
        UncertaintyRule::AboveThreshold { tau } => {
            uncertainty_radius(map, tau.unwrap_or(1.0 / map.len() as f64))
        }
        UncertaintyRule::TopMass { mass } => uncertainty_radius_top_mass(map, mass),
    }
}

/// Thresholds deciding whether a predicted landmark is shown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityGate {
    /// Radius ceiling in pixels.
    pub r_vis: f64,
    /// Peak-probability floor.
    pub p_vis: f64,
}

impl VisibilityGate {
    /// Defaults for a `height x width` map: 12 px at 112 rows scaled by
    /// `height / 112`, and a peak floor of five times the uniform level.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        Self {
            r_vis: 12.0 * height as f64 / 112.0,
            p_vis: 5.0 / (height * width) as f64,
        }
    }

    pub fn is_visible(&self, radius: f64, peak: f64) -> bool {
        radius <= self.r_vis && peak >= self.p_vis
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPrediction {
    pub id: LandmarkId,
    pub x: f64,
    pub y: f64,
    pub peak: f64,
    pub radius: f64,
    pub visible: bool,
}

pub fn landmark_visibility_gate(prediction: &LandmarkPrediction, gate: &VisibilityGate) -> bool {
    gate.is_visible(prediction.radius, prediction.peak)
}

/// Full per-landmark decode of batch item `b`: argmax location, peak
/// probability, uncertainty radius and the visibility decision.
pub fn predict_landmarks(
    maps: &ProbabilityMaps,
    b: usize,
    rule: UncertaintyRule,
    gate: &VisibilityGate,
) -> Vec<LandmarkPrediction> {
    let channels = maps.shape[1].min(NUM_LANDMARKS);
    (0..channels)
        .map(|l| {
            let map = maps.channel(b, l);
            let idx = argmax(map);
            let (x, y) = decode_index(idx, maps.width());
            let peak = map[idx] as f64;
            let radius = radius_with_rule(map, rule);
            LandmarkPrediction {
                id: LandmarkId::new(l).expect("channel below NUM_LANDMARKS"),
                x: x as f64,
                y: y as f64,
                peak,
                radius,
                visible: gate.is_visible(radius, peak),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_target_index(3.0, 2.0, 4, 4), 11);
        assert_eq!(encode_target_index(200.0, 5.0, 112, 112), 671);
        assert_eq!(encode_target_index(0.0, 0.0, 9, 7), 0);
        assert_eq!(encode_target_index(-4.0, -1.0, 9, 7), 0);
        assert_eq!(encode_target_index(2.6, 1.4, 4, 4), 7);
    }

    #[test]
    fn decode_inverts_encode() {
        for y in 0..6 {
            for x in 0..5 {
                let idx = encode_target_index(x as f64, y as f64, 5, 6);
                assert_eq!(decode_index(idx, 5), (x, y));
            }
        }
    }

    #[test]
    fn softmax_saturates() {
        let mut logits = vec![0.0f32; 64];
        logits[17] = 50.0;
        let p = softmax_channel(&logits);
        assert!(p[17] > 0.999);
        let sum: f32 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn delta_decodes_to_its_position() {
        let (w, h) = (64, 48);
        let mut data = vec![0.0f32; w * h];
        data[40 * w + 30] = 1.0;
        let maps = ProbabilityMaps {
            shape: [1, 1, h, w],
            data,
        };
        assert_eq!(decode_landmarks(&maps, 0), vec![(30, 40)]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let mut map = vec![0.0f32; 16];
        map[5] = 0.5;
        map[9] = 0.5;
        assert_eq!(argmax(&map), 5);
    }

    #[test]
    fn radius_examples() {
        let mut map = vec![0.0f32; 100];
        map[3] = 1.0;
        assert!((uncertainty_radius(&map, 0.01) - 0.5641895835).abs() < 1e-9);

        let uniform = vec![1.0f32 / 12544.0; 12544];
        let r = uncertainty_radius(&uniform, 1.0 / 12544.0);
        assert!((r - (12544.0f64 / std::f64::consts::PI).sqrt()).abs() < 1e-9);
        assert!((r - 63.19).abs() < 0.01);

        let mut hundred = vec![0.0f32; 400];
        for p in hundred.iter_mut().take(100) {
            *p = 0.01;
        }
        assert!((uncertainty_radius(&hundred, 1.0 / 400.0) - 5.6418958354).abs() < 1e-9);
    }

    #[test]
    fn top_mass_radius() {
        let mut map = vec![0.0f32; 100];
        map[0] = 0.5;
        map[1] = 0.3;
        map[2] = 0.2;
        assert_eq!(uncertainty_radius_top_mass(&map, 0.75), equivalent_radius(2));
    }

    #[test]
    fn gate_examples() {
        let gate = VisibilityGate::for_resolution(112, 112);
        assert_eq!(gate.r_vis, 12.0);
        assert!(gate.is_visible(3.0, 0.4));
        assert!(!gate.is_visible(40.0, 0.4));
        assert!(!gate.is_visible(3.0, gate.p_vis * 0.5));
        let half = VisibilityGate::for_resolution(56, 56);
        assert_eq!(half.r_vis, 6.0);
    }
}
