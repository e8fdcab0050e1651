//! Procedural stand-ins for the clinical datasets.
//!
//! The generators here draw cartoon four-chamber frames with known landmark
//! positions, per-category textures, and clips whose EF label is readable
//! from their brightness. They back the tests, the acceptance suite and
//! `--synthetic` CLI runs when no real data is present.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frame::{save_frame_dir, Frame};
use crate::ingest::echonet::{LandmarkAnnotation, Point};
use crate::ingest::sweep::SweepManifestEntry;
use crate::landmarks::schema::{LandmarkId, Visibility, NUM_CONTOUR};
use crate::rubric::{PoseCategory, RubricCriterion};

/// Geometry of one cartoon heart, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeartGeometry {
    pub cx: f64,
    pub cy: f64,
    /// LV half-width.
    pub a: f64,
    /// LV half-length, apex to mitral plane.
    pub b: f64,
    pub tilt: f64,
}

impl HeartGeometry {
    pub fn sample<R: Rng>(width: usize, height: usize, rng: &mut R) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self {
            cx: w * rng.random_range(0.36..0.46),
            cy: h * rng.random_range(0.36..0.44),
            a: w * rng.random_range(0.11..0.15),
            b: h * rng.random_range(0.22..0.28),
            tilt: rng.random_range(-0.2..0.2),
        }
    }

    fn rotate(&self, dx: f64, dy: f64) -> Point {
        let (s, c) = self.tilt.sin_cos();
        Point {
            x: self.cx + c * dx - s * dy,
            y: self.cy + s * dx + c * dy,
        }
    }

    /// All 47 landmark positions.
    pub fn landmarks(&self) -> Vec<(LandmarkId, Point)> {
        let mut out = Vec::with_capacity(47);
        out.push((LandmarkId::LV_APEX, self.rotate(0.0, -self.b)));
        out.push((LandmarkId::MV, self.rotate(0.0, self.b)));
        // Remaining contour points walk down both walls in pairs.
        let pairs = (NUM_CONTOUR - 2) / 2;
        for k in 0..pairs {
            let t = -PI / 2.0 + PI * (k + 1) as f64 / (pairs + 1) as f64;
            let dy = self.b * t.sin();
            let dx = self.a * t.cos();
            out.push((LandmarkId::new(2 + 2 * k).unwrap(), self.rotate(-dx, dy)));
            out.push((LandmarkId::new(3 + 2 * k).unwrap(), self.rotate(dx, dy)));
        }
        let a = self.a;
        let b = self.b;
        out.push((LandmarkId::RV, self.rotate(2.1 * a, -0.1 * b)));
        out.push((LandmarkId::RA, self.rotate(2.0 * a, 1.55 * b)));
        out.push((LandmarkId::LA, self.rotate(0.0, 1.6 * b)));
        out.push((LandmarkId::TV, self.rotate(1.9 * a, 1.05 * b)));
        out.push((LandmarkId::TVA, self.rotate(2.8 * a, 1.0 * b)));
        out
    }

    /// Render the frame. `dropout` dims the right heart and atria, which is
    /// how off-axis frames look.
    pub fn render<R: Rng>(&self, width: usize, height: usize, dropout: f64, rng: &mut R) -> Frame {
        let (s, c) = self.tilt.sin_cos();
        let (a, b) = (self.a, self.b);
        let chambers = [
            // (centre dx, dy, half-axes, brightness scale)
            (0.0, 0.0, a, b, 1.0),
            (2.1 * a, -0.1 * b, 0.8 * a, 0.9 * b, 1.0 - dropout),
            (0.0, 1.6 * b, 0.9 * a, 0.5 * b, 1.0 - 0.7 * dropout),
            (2.0 * a, 1.55 * b, 0.75 * a, 0.45 * b, 1.0 - dropout),
        ];
        let mut frame = Frame::from_fn(width, height, |x, y| {
            let px = x as f64 - self.cx;
            let py = y as f64 - self.cy;
            let u = c * px + s * py;
            let v = -s * px + c * py;
            let mut value: f64 = 0.08;
            for &(ox, oy, ra, rb, gain) in &chambers {
                let r = (((u - ox) / ra).powi(2) + ((v - oy) / rb).powi(2)).sqrt();
                // Bright wall ring around a dark cavity.
                let wall = (-((r - 1.0) / 0.12).powi(2)).exp();
                value = value.max(0.08 + 0.85 * gain * wall);
                if r < 0.9 {
                    value = value.min(0.05);
                }
            }
            value as f32
        });
        for p in frame.pixels_mut() {
            let n: f32 = rng.random_range(-0.03..0.03);
            *p = (*p + n).clamp(0.0, 1.0);
        }
        frame
    }
}

/// `n` annotated frames of cartoon hearts, all landmarks graded high.
pub fn landmark_frames(n: usize, width: usize, height: usize, seed: u64) -> Vec<(Frame, LandmarkAnnotation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let geom = HeartGeometry::sample(width, height, &mut rng);
            let frame = geom.render(width, height, 0.0, &mut rng);
            let mut ann = LandmarkAnnotation::new(format!("synthetic{i:04}"), 0);
            for (id, p) in geom.landmarks() {
                ann.insert(id, p, Visibility::High)
                    .expect("generated ids are unique");
            }
            (frame, ann)
        })
        .collect()
}

/// A frame whose texture identifies its category: horizontal stripes for
/// green, a checkerboard for yellow, vertical stripes for red. Phase and
/// contrast are randomized.
pub fn category_texture<R: Rng>(category: PoseCategory, width: usize, height: usize, rng: &mut R) -> Frame {
    let period = rng.random_range(4..7) as f64;
    let phase = rng.random_range(0.0..period);
    let contrast = rng.random_range(0.35..0.5);
    let mut frame = Frame::from_fn(width, height, |x, y| {
        let (x, y) = (x as f64 + phase, y as f64 + phase);
        let wave = |t: f64| (2.0 * PI * t / period).sin();
        let v = match category {
            PoseCategory::Green => wave(y),
            PoseCategory::Yellow => wave(x) * wave(y),
            PoseCategory::Red => wave(x),
        };
        (0.5 + contrast * v) as f32
    });
    for p in frame.pixels_mut() {
        let n: f32 = rng.random_range(-0.05..0.05);
        *p = (*p + n).clamp(0.0, 1.0);
    }
    frame
}

/// Balanced labeled texture set, categories interleaved.
pub fn category_dataset(n: usize, width: usize, height: usize, seed: u64) -> Vec<(Frame, PoseCategory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = PoseCategory::ALL[i % 3];
            (category_texture(c, width, height, &mut rng), c)
        })
        .collect()
}

/// Clip whose mean brightness is an affine function of its EF label, with a
/// beating disc so consecutive frames differ.
pub fn lvef_clip(ef: f64, frames: usize, width: usize, height: usize, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 0.15 + 0.7 * (ef / 100.0);
    (0..frames)
        .map(|t| {
            let phase = 2.0 * PI * t as f64 / 16.0;
            let radius = (width.min(height) as f64) * (0.2 + 0.05 * phase.sin());
            let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
            let mut f = Frame::from_fn(width, height, |x, y| {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let ring = if d < radius { -0.1 } else { 0.0 };
                (base + ring) as f32
            });
            for p in f.pixels_mut() {
                let n: f32 = rng.random_range(-0.02..0.02);
                *p = (*p + n).clamp(0.0, 1.0);
            }
            f
        })
        .collect()
}

/// Rubric deductions typical of a frame of the given category.
fn deductions_for(category: PoseCategory) -> Vec<RubricCriterion> {
    match category {
        PoseCategory::Green => vec![],
        PoseCategory::Yellow => vec![RubricCriterion::RvFreeWallNotVisible, RubricCriterion::RaNotVisible],
        PoseCategory::Red => vec![RubricCriterion::LaEntirelyOut, RubricCriterion::AortaVisible5ch],
    }
}

/// Label sequence of a sweep that starts on target and drifts away:
/// green, then yellow, then red, with the given run lengths.
pub fn sweep_labels(green: usize, yellow: usize, red: usize) -> Vec<PoseCategory> {
    let mut v = vec![PoseCategory::Green; green];
    v.extend(std::iter::repeat_n(PoseCategory::Yellow, yellow));
    v.extend(std::iter::repeat_n(PoseCategory::Red, red));
    v
}

/// Frames for a labeled sweep: the same heart with right-heart dropout
/// growing with distance from the optimal pose.
pub fn sweep_frames(labels: &[PoseCategory], width: usize, height: usize, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = HeartGeometry::sample(width, height, &mut rng);
    labels
        .iter()
        .map(|c| {
            let dropout = match c {
                PoseCategory::Green => 0.0,
                PoseCategory::Yellow => 0.5,
                PoseCategory::Red => 0.95,
            };
            geom.render(width, height, dropout, &mut rng)
        })
        .collect()
}

/// Write a one-sweep manifest plus its frame directory under `dir` and
/// return the manifest path.
pub fn write_sweep_fixture(
    dir: &Path,
    sweep_id: &str,
    labels: &[PoseCategory],
    fps: f64,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<std::path::PathBuf> {
    let frames = sweep_frames(labels, width, height, seed);
    save_frame_dir(&frames, &dir.join(sweep_id))?;
    let entry = SweepManifestEntry {
        subject_id: format!("subject-{sweep_id}"),
        sweep_id: sweep_id.to_string(),
        device: "synthetic".into(),
        fps,
        video: sweep_id.to_string(),
        labels: labels.to_vec(),
        deductions: Some(labels.iter().map(|c| deductions_for(*c)).collect()),
    };
    let path = dir.join(format!("{sweep_id}.json"));
    let json = crate::ingest::sweep::serialize_sweep_manifest(&[entry])?;
    std::fs::write(&path, json).map_err(|e| crate::error::Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::sweep::parse_sweep_manifest;
    use crate::rubric::categorize_criteria;

    #[test]
    fn landmarks_are_complete_and_in_frame() {
        for (frame, ann) in landmark_frames(6, 64, 64, 1) {
            assert_eq!(ann.points.len(), 47);
            for p in ann.points.values() {
                assert!(p.x >= 0.0 && p.x < 64.0 && p.y >= 0.0 && p.y < 64.0, "{p:?}");
            }
            assert_eq!(frame.width(), 64);
        }
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(landmark_frames(2, 32, 32, 5), landmark_frames(2, 32, 32, 5));
        assert_eq!(category_dataset(6, 16, 16, 2), category_dataset(6, 16, 16, 2));
    }

    #[test]
    fn deductions_agree_with_labels() {
        for c in PoseCategory::ALL {
            assert_eq!(categorize_criteria(&deductions_for(c)).unwrap(), c);
        }
    }

    #[test]
    fn sweep_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let labels = sweep_labels(4, 3, 2);
        let path = write_sweep_fixture(dir.path(), "s1", &labels, 30.0, 32, 32, 3).unwrap();
        let sweeps = parse_sweep_manifest(&path).unwrap();
        assert_eq!(sweeps.len(), 1);
        assert_eq!(sweeps[0].frames.len(), 9);
    }

    #[test]
    fn lvef_brightness_tracks_label() {
        let mean = |f: &Frame| f.pixels().iter().sum::<f32>() / f.pixels().len() as f32;
        let lo = lvef_clip(30.0, 4, 16, 16, 0);
        let hi = lvef_clip(70.0, 4, 16, 16, 0);
        assert!(mean(&hi[0]) > mean(&lo[0]) + 0.2);
    }
}
