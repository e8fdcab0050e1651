use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::heatmap::LandmarkPrediction;
use super::schema::{key_landmark_name, LandmarkId, Visibility, KEY_LANDMARKS};
use crate::error::{Error, Result};
use crate::ingest::LandmarkAnnotation;

/// Mean and sample standard deviation of a set of distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkErrorConfig {
    /// Annotated points with a worse (larger) visibility grade are skipped.
    pub max_visibility: Visibility,
    /// Skip landmarks the detector itself gated out.
    pub require_predicted_visible: bool,
}

impl Default for LandmarkErrorConfig {
    fn default() -> Self {
        Self {
            max_visibility: Visibility::Low,
            require_predicted_visible: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkErrorReport {
    pub overall: ErrorStats,
    pub per_landmark: BTreeMap<LandmarkId, ErrorStats>,
    /// Key landmarks by display name (LV apex, MV, RV, TV, RA, LA).
    pub key: BTreeMap<String, ErrorStats>,
}

/// Euclidean pixel error between predictions and annotations, per landmark,
/// overall and for the key subset.
pub fn evaluate_landmark_error(
    samples: &[(Vec<LandmarkPrediction>, LandmarkAnnotation)],
    config: &LandmarkErrorConfig,
) -> Result<LandmarkErrorReport> {
    let mut per: BTreeMap<LandmarkId, Vec<f64>> = BTreeMap::new();
    for (predictions, annotation) in samples {
        for pred in predictions {
            let Some(point) = annotation.points.get(&pred.id) else {
                continue;
            };
            let vis = annotation
                .visibility
                .get(&pred.id)
                .copied()
                .unwrap_or(Visibility::High);
            if vis > config.max_visibility || (config.require_predicted_visible && !pred.visible) {
                continue;
            }
            let d = ((pred.x - point.x).powi(2) + (pred.y - point.y).powi(2)).sqrt();
            per.entry(pred.id).or_default().push(d);
        }
    }
    let all: Vec<f64> = per.values().flatten().copied().collect();
    let overall = ErrorStats::from_values(&all).ok_or_else(|| {
        Error::EmptyEvaluation("no annotated landmark overlaps a prediction".into())
    })?;
    let per_landmark: BTreeMap<_, _> = per
        .iter()
        .filter_map(|(id, v)| ErrorStats::from_values(v).map(|s| (*id, s)))
        .collect();
    let key = KEY_LANDMARKS
        .iter()
        .filter_map(|id| per_landmark.get(id).map(|s| (key_landmark_name(*id).to_string(), *s)))
        .collect();
    Ok(LandmarkErrorReport {
        overall,
        per_landmark,
        key,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Point;

    fn pred(id: LandmarkId, x: f64, y: f64) -> LandmarkPrediction {
        LandmarkPrediction {
            id,
            x,
            y,
            peak: 1.0,
            radius: 0.5,
            visible: true,
        }
    }

    fn annotation(points: &[(LandmarkId, f64, f64, Visibility)]) -> LandmarkAnnotation {
        let mut a = LandmarkAnnotation::new("clip", 0);
        for &(id, x, y, v) in points {
            a.points.insert(id, Point { x, y });
            a.visibility.insert(id, v);
        }
        a
    }

    #[test]
    fn exact_prediction_scores_zero() {
        let a = annotation(&[(LandmarkId::RV, 10.0, 12.0, Visibility::High)]);
        let r = evaluate_landmark_error(&[(vec![pred(LandmarkId::RV, 10.0, 12.0)], a)], &Default::default())
            .unwrap();
        assert_eq!(r.overall.mean, 0.0);
        assert_eq!(r.key["RV"].mean, 0.0);
    }

    #[test]
    fn three_four_five() {
        let a = annotation(&[(LandmarkId::LA, 10.0, 10.0, Visibility::High)]);
        let r = evaluate_landmark_error(&[(vec![pred(LandmarkId::LA, 13.0, 14.0)], a)], &Default::default())
            .unwrap();
        assert_eq!(r.overall.mean, 5.0);
        assert_eq!(r.per_landmark[&LandmarkId::LA].count, 1);
    }

    #[test]
    fn visibility_filter_and_empty_error() {
        let a = annotation(&[(LandmarkId::LA, 10.0, 10.0, Visibility::Low)]);
        let cfg = LandmarkErrorConfig {
            max_visibility: Visibility::Moderate,
            ..Default::default()
        };
        let r = evaluate_landmark_error(&[(vec![pred(LandmarkId::LA, 13.0, 14.0)], a)], &cfg);
        assert!(matches!(r, Err(Error::EmptyEvaluation(_))));
    }

    #[test]
    fn stats_use_sample_std() {
        let s = ErrorStats::from_values(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
    }
}
