//! Training-time augmentation: brightness, contrast, uniform scaling and
//! translation. Landmarks follow the same geometric transform as the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::echonet::{LandmarkTarget, Point};
use crate::frame::Frame;

/// Sampling ranges for [`AugmentParams::sample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Brightness offset drawn from `[-b, b]`, as a fraction of the `[0, 1]`
    /// intensity range.
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub scale: (f64, f64),
    /// Translation drawn from `[-t, t]` times each dimension.
    pub translate: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: (0.8, 1.2),
            scale: (0.9, 1.1),
            translate: 0.1,
        }
    }
}

/// One concrete augmentation draw.
///
/// A point `p` maps to `center + scale * (p - center) + (tx, ty)`; each
/// intensity `v` maps to `clamp(contrast * v + brightness, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    /// Scaling center; `None` means the image center.
    pub center: Option<(f64, f64)>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        brightness: 0.0,
        contrast: 1.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
        center: None,
    };

    pub fn sample(ranges: &AugmentRanges, width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(ranges, width, height, &mut rng)
    }

    pub fn sample_with<R: Rng>(ranges: &AugmentRanges, width: usize, height: usize, rng: &mut R) -> Self {
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            brightness: uniform(-ranges.brightness, ranges.brightness),
            contrast: uniform(ranges.contrast.0, ranges.contrast.1),
            scale: uniform(ranges.scale.0, ranges.scale.1),
            tx: uniform(-ranges.translate, ranges.translate) * width as f64,
            ty: uniform(-ranges.translate, ranges.translate) * height as f64,
            center: None,
        }
    }

    fn center_for(&self, width: usize, height: usize) -> (f64, f64) {
        self.center
            .unwrap_or(((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0))
    }

    fn is_geometric_identity(&self) -> bool {
        self.scale == 1.0 && self.tx == 0.0 && self.ty == 0.0
    }

    fn is_photometric_identity(&self) -> bool {
        self.contrast == 1.0 && self.brightness == 0.0
    }

    /// Forward geometric map of one point.
    pub fn transform_point(&self, p: Point, width: usize, height: usize) -> Point {
        let (cx, cy) = self.center_for(width, height);
        Point {
            x: cx + self.scale * (p.x - cx) + self.tx,
            y: cy + self.scale * (p.y - cy) + self.ty,
        }
    }

    fn inverse_point(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        (
            cx + (x - self.tx - cx) / self.scale,
            cy + (y - self.ty - cy) / self.scale,
        )
    }
}

/// True when `p` rounds onto a pixel of a `width x height` frame.
pub fn point_in_bounds(p: Point, width: usize, height: usize) -> bool {
    let inside = |v: f64, n: usize| v.is_finite() && v.round() >= 0.0 && v.round() <= (n - 1) as f64;
    inside(p.x, width) && inside(p.y, height)
}

/// Apply `params` to a frame and, when given, its dense landmark targets.
/// Landmarks pushed outside the frame keep their transformed coordinates and
/// are flagged `in_bounds = false`.
pub fn augment_frame(
    frame: &Frame,
    landmarks: Option<&[Option<LandmarkTarget>]>,
    params: &AugmentParams,
) -> (Frame, Option<Vec<Option<LandmarkTarget>>>) {
    let (w, h) = (frame.width(), frame.height());
    let mut out = if params.is_geometric_identity() {
        frame.clone()
    } else {
        let (cx, cy) = params.center_for(w, h);
        Frame::from_fn(w, h, |x, y| {
            let (sx, sy) = params.inverse_point(x as f64, y as f64, cx, cy);
            frame.sample_bilinear(sx, sy)
        })
    };
    if !params.is_photometric_identity() {
        let (gain, offset) = (params.contrast as f32, params.brightness as f32);
        for v in out.pixels_mut() {
            *v = (gain * *v + offset).clamp(0.0, 1.0);
        }
    }
    let landmarks = landmarks.map(|targets| {
        targets
            .iter()
            .map(|t| {
                t.map(|t| {
                    let point = params.transform_point(t.point, w, h);
                    LandmarkTarget {
                        point,
                        visibility: t.visibility,
                        in_bounds: t.in_bounds && point_in_bounds(point, w, h),
                    }
                })
            })
            .collect()
    });
    (out, landmarks)
}

/// Draw parameters from `seed` and apply them.
pub fn augment_frame_seeded(
    frame: &Frame,
    landmarks: Option<&[Option<LandmarkTarget>]>,
    ranges: &AugmentRanges,
    seed: u64,
) -> (Frame, Option<Vec<Option<LandmarkTarget>>>) {
    let params = AugmentParams::sample(ranges, frame.width(), frame.height(), seed);
    augment_frame(frame, landmarks, &params)
}
