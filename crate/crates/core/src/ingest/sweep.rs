//! Sweep manifests: per-sweep metadata and per-frame traffic-light labels.
//!
//! A manifest is a JSON object describing one sweep, or an array of them:
//!
//! ```json
//! {"subject_id": "s01", "sweep_id": "s01-007", "device": "clarius",
//!  "fps": 30, "video": "s01/007", "labels": ["green", "green", "yellow"],
//!  "deductions": [[], [], ["LA_PARTIALLY_OUT"]]}
//! ```
//!
//! `video` names a directory of PNG frames, relative to the manifest file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{load_frame_dir, Frame};
use crate::rubric::{categorize_criteria, PoseCategory, RubricCriterion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifestEntry {
    pub subject_id: String,
    pub sweep_id: String,
    pub device: String,
    pub fps: f64,
    pub video: String,
    pub labels: Vec<PoseCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deductions: Option<Vec<Vec<RubricCriterion>>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestDoc {
    Many(Vec<SweepManifestEntry>),
    One(SweepManifestEntry),
}

impl SweepManifestEntry {
    /// Check the entry on its own, without touching the video.
    pub fn validate(&self) -> Result<()> {
        let invalid = |detail: String| Error::InvalidSweep {
            sweep_id: self.sweep_id.clone(),
            detail,
        };
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(invalid(format!("fps must be positive, got {}", self.fps)));
        }
        if self.labels.is_empty() {
            return Err(invalid("empty label list".into()));
        }
        if let Some(deductions) = &self.deductions {
            if deductions.len() != self.labels.len() {
                return Err(invalid(format!(
                    "{} deduction lists for {} labels",
                    deductions.len(),
                    self.labels.len()
                )));
            }
            for (frame, (criteria, &labeled)) in deductions.iter().zip(&self.labels).enumerate() {
                let expected = categorize_criteria(criteria).map_err(|e| {
                    invalid(format!("frame {frame}: {e}"))
                })?;
                if expected != labeled {
                    return Err(Error::InconsistentCategory {
                        sweep_id: self.sweep_id.clone(),
                        frame,
                        labeled: labeled.to_string(),
                        expected: expected.to_string(),
                    });
                }
            }
        }
        if self.labels[0] != PoseCategory::Green {
            return Err(invalid(format!(
                "sweep must start at the optimal pose (green), first label is {}",
                self.labels[0]
            )));
        }
        Ok(())
    }
}

/// Parse and validate a manifest document.
pub fn parse_sweep_manifest_str(json: &str) -> Result<Vec<SweepManifestEntry>> {
    let doc: ManifestDoc =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("sweep manifest: {e}")))?;
    let entries = match doc {
        ManifestDoc::Many(v) => v,
        ManifestDoc::One(e) => vec![e],
    };
    for e in &entries {
        e.validate()?;
    }
    Ok(entries)
}

pub fn serialize_sweep_manifest(entries: &[SweepManifestEntry]) -> Result<String> {
    serde_json::to_string_pretty(entries).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecording {
    pub subject_id: String,
    pub sweep_id: String,
    pub device: String,
    pub fps: f64,
    pub frames: Vec<Frame>,
    pub frame_categories: Vec<PoseCategory>,
    pub frame_deductions: Option<Vec<Vec<RubricCriterion>>>,
}

impl SweepRecording {
    /// Build a recording from an entry and already-decoded frames.
    pub fn from_entry(entry: &SweepManifestEntry, frames: Vec<Frame>) -> Result<Self> {
        entry.validate()?;
        if frames.len() != entry.labels.len() {
            return Err(Error::InvalidSweep {
                sweep_id: entry.sweep_id.clone(),
                detail: format!("{} labels for {} frames", entry.labels.len(), frames.len()),
            });
        }
        Ok(Self {
            subject_id: entry.subject_id.clone(),
            sweep_id: entry.sweep_id.clone(),
            device: entry.device.clone(),
            fps: entry.fps,
            frames,
            frame_categories: entry.labels.clone(),
            frame_deductions: entry.deductions.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn resolve_video_path(manifest_dir: &Path, video: &str) -> PathBuf {
    let p = Path::new(video);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

/// Load a sweep's frames, resolving its video path against `manifest_dir`.
pub fn load_sweep(entry: &SweepManifestEntry, manifest_dir: &Path) -> Result<SweepRecording> {
    let frames = load_frame_dir(&resolve_video_path(manifest_dir, &entry.video))?;
    SweepRecording::from_entry(entry, frames)
}

/// Read a manifest file and load every sweep it lists.
pub fn parse_sweep_manifest(manifest: &Path) -> Result<Vec<SweepRecording>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    parse_sweep_manifest_str(&text)?
        .iter()
        .map(|e| load_sweep(e, dir))
        .collect()
}
