//! Pose scores, the class-weighted regression loss, fold metrics and the
//! landmark conditioning channels fed to the pose scorer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::landmarks::{LandmarkPrediction, KEY_LANDMARKS};
use crate::rubric::PoseCategory;

pub const MIN_SCORE: f64 = -2.0;
pub const MAX_SCORE: f64 = 1.0;

/// Continuous pose score, clamped to `[-2, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseScore(f64);

impl PoseScore {
    /// Clamp a raw regression output. NaN maps to the bottom of the range.
    pub fn new(raw: f64) -> Self {
        if raw.is_nan() {
            PoseScore(MIN_SCORE)
        } else {
            PoseScore(raw.clamp(MIN_SCORE, MAX_SCORE))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn category(self) -> PoseCategory {
        score_to_category(self.0)
    }
}

/// Green for `s >= 0`, yellow for `-1 <= s < 0`, red below -1.
pub fn score_to_category(s: f64) -> PoseCategory {
    if s >= 0.0 {
        PoseCategory::Green
    } else if s >= -1.0 {
        PoseCategory::Yellow
    } else {
        PoseCategory::Red
    }
}

/// Per-category loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            green: 1.0,
            yellow: 1.0,
            red: 1.0,
        }
    }
}

impl ClassWeights {
    pub fn get(&self, c: PoseCategory) -> f64 {
        match c {
            PoseCategory::Green => self.green,
            PoseCategory::Yellow => self.yellow,
            PoseCategory::Red => self.red,
        }
    }
}

/// Inverse-frequency weights `N / (3 * N_c)` from `(green, yellow, red)`
/// frame counts.
pub fn compute_class_weights(counts: [usize; 3]) -> Result<ClassWeights> {
    if counts.contains(&0) {
        return Err(Error::Domain(format!(
            "every category needs at least one frame, got {counts:?}"
        )));
    }
    let total: usize = counts.iter().sum();
    let w = |c: usize| total as f64 / (3.0 * c as f64);
    Ok(ClassWeights {
        green: w(counts[0]),
        yellow: w(counts[1]),
        red: w(counts[2]),
    })
}

pub fn count_categories(categories: &[PoseCategory]) -> [usize; 3] {
    let mut counts = [0; 3];
    for c in categories {
        counts[c.index()] += 1;
    }
    counts
}

/// Mean of `w[cat_i] * (pred_i - target_i)^2`.
pub fn weighted_mse(
    pred: &[f64],
    target: &[f64],
    categories: &[PoseCategory],
    weights: &ClassWeights,
) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != categories.len() {
        return Err(Error::Shape(format!(
            "weighted_mse lengths differ: {} predictions, {} targets, {} categories",
            pred.len(),
            target.len(),
            categories.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .zip(categories)
        .map(|((p, t), c)| weights.get(*c) * (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Epoch whose weights are kept: the one minimizing the mean of the trailing
/// `window` validation losses. With fewer than `window` epochs the best
/// single epoch is used and the second value is `true`.
pub fn select_checkpoint_epoch(val_losses: &[f64], window: usize) -> Option<(usize, bool)> {
    if val_losses.is_empty() {
        return None;
    }
    let window = window.max(1);
    if val_losses.len() < window {
        let best = (0..val_losses.len())
            .min_by(|&a, &b| val_losses[a].total_cmp(&val_losses[b]))
            .expect("non-empty");
        return Some((best, true));
    }
    let best = (window - 1..val_losses.len())
        .map(|e| {
            let mean = val_losses[e + 1 - window..=e].iter().sum::<f64>() / window as f64;
            (e, mean)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(e, _)| e)
        .expect("at least one full window");
    Some((best, false))
}

/// Which inputs the scorer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerMode {
    ImagesOnly,
    LandmarksOnly,
    ImagesAndLandmarks,
}

impl ScorerMode {
    pub const ALL: [ScorerMode; 3] = [
        ScorerMode::ImagesAndLandmarks,
        ScorerMode::ImagesOnly,
        ScorerMode::LandmarksOnly,
    ];

    pub fn uses_landmarks(self) -> bool {
        !matches!(self, ScorerMode::ImagesOnly)
    }

    pub fn uses_image(self) -> bool {
        !matches!(self, ScorerMode::LandmarksOnly)
    }

    /// Image channel plus one channel per key landmark when landmarks are used.
    pub fn input_channels(self) -> usize {
        if self.uses_landmarks() {
            1 + KEY_LANDMARKS.len()
        } else {
            1
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerMode::ImagesOnly => "images_only",
            ScorerMode::LandmarksOnly => "landmarks_only",
            ScorerMode::ImagesAndLandmarks => "images_and_landmarks",
        }
    }
}

impl fmt::Display for ScorerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "images_only" => Ok(ScorerMode::ImagesOnly),
            "landmarks_only" => Ok(ScorerMode::LandmarksOnly),
            "images_and_landmarks" => Ok(ScorerMode::ImagesAndLandmarks),
            other => Err(Error::Parse(format!("unknown scorer mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerArchitecture {
    Regression,
    Adapter,
}

impl ScorerArchitecture {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerArchitecture::Regression => "regression",
            ScorerArchitecture::Adapter => "adapter",
        }
    }
}

/// Render key-landmark conditioning channels: a unit-height isotropic
/// Gaussian of width `sigma` at each visible key landmark, a zero channel
/// for hidden or missing ones. Predictions are in frame pixel coordinates.
pub fn render_landmark_channels(
    predictions: &[LandmarkPrediction],
    width: usize,
    height: usize,
    sigma: f64,
) -> Vec<Frame> {
    let denom = 2.0 * sigma * sigma;
    KEY_LANDMARKS
        .iter()
        .map(|id| match predictions.iter().find(|p| p.id == *id && p.visible) {
            Some(p) => Frame::from_fn(width, height, |x, y| {
                let d2 = (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2);
                (-d2 / denom).exp() as f32
            }),
            None => Frame::zeros(width, height),
        })
        .collect()
}

/// Assemble the scorer's input channels for `mode`.
pub fn scorer_channels(
    mode: ScorerMode,
    frame: &Frame,
    predictions: Option<&[LandmarkPrediction]>,
    sigma: f64,
) -> Result<Vec<Frame>> {
    let (w, h) = (frame.width(), frame.height());
    let mut channels = vec![if mode.uses_image() {
        frame.clone()
    } else {
        Frame::zeros(w, h)
    }];
    if mode.uses_landmarks() {
        let preds = predictions.ok_or_else(|| {
            Error::Domain(format!("mode {mode} needs landmark predictions"))
        })?;
        channels.extend(render_landmark_channels(preds, w, h, sigma));
    }
    Ok(channels)
}

/// 3x3 confusion counts, rows = truth, columns = prediction, in the order
/// green, yellow, red.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(pub [[u64; 3]; 3]);

impl ConfusionMatrix {
    pub fn add(&mut self, truth: PoseCategory, pred: PoseCategory) {
        self.0[truth.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.0[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Recall of one category (diagonal over row sum).
    pub fn recall(&self, c: PoseCategory) -> Option<f64> {
        let row = self.0[c.index()];
        let n: u64 = row.iter().sum();
        (n > 0).then(|| row[c.index()] as f64 / n as f64)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..3 {
            for j in 0..3 {
                self.0[i][j] += other.0[i][j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate_categories(
    fold_index: usize,
    truth: &[PoseCategory],
    predicted: &[PoseCategory],
) -> Result<FoldResult> {
    if truth.is_empty() {
        return Err(Error::EmptyEvaluation("empty test set".into()));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} ground-truth labels for {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut confusion = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion.add(t, p);
    }
    Ok(FoldResult {
        fold_index,
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// Regression outputs are categorized through [`score_to_category`] after
/// clamping.
pub fn evaluate_scores(fold_index: usize, truth: &[PoseCategory], scores: &[f64]) -> Result<FoldResult> {
    let predicted: Vec<_> = scores.iter().map(|&s| PoseScore::new(s).category()).collect();
    evaluate_categories(fold_index, truth, &predicted)
}

/// Serialized per-fold report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub mode: ScorerMode,
    pub architecture: ScorerArchitecture,
    pub accuracy: f64,
    pub confusion: [[u64; 3]; 3],
}

impl FoldReport {
    pub fn new(result: &FoldResult, mode: ScorerMode, architecture: ScorerArchitecture) -> Self {
        Self {
            fold_index: result.fold_index,
            mode,
            architecture,
            accuracy: result.accuracy,
            confusion: result.confusion.0,
        }
    }
}

/// One column of the accuracy grid: a mode/architecture pair with per-fold
/// accuracies and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridColumn {
    pub mode: ScorerMode,
    pub architecture: ScorerArchitecture,
    pub fold_accuracy: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Aggregate fold reports into the modes x architectures x folds grid.
pub fn aggregate_reports(reports: &[FoldReport], num_folds: usize) -> Vec<GridColumn> {
    let mut columns = Vec::new();
    for mode in ScorerMode::ALL {
        for architecture in [ScorerArchitecture::Regression, ScorerArchitecture::Adapter] {
            let mut fold_accuracy = vec![None; num_folds];
            for r in reports
                .iter()
                .filter(|r| r.mode == mode && r.architecture == architecture)
            {
                if r.fold_index < num_folds {
                    fold_accuracy[r.fold_index] = Some(r.accuracy);
                }
            }
            let present: Vec<f64> = fold_accuracy.iter().flatten().copied().collect();
            let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
            columns.push(GridColumn {
                mode,
                architecture,
                fold_accuracy,
                mean,
            });
        }
    }
    columns
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::LandmarkId;
    use PoseCategory::*;

    #[test]
    fn category_mapping() {
        assert_eq!(score_to_category(0.3), Green);
        assert_eq!(score_to_category(0.0), Green);
        assert_eq!(score_to_category(-1.0), Yellow);
        assert_eq!(score_to_category(-1.7), Red);
        assert_eq!(score_to_category(-0.0), Green);
    }

    #[test]
    fn pose_score_clamps() {
        assert_eq!(PoseScore::new(3.0).value(), 1.0);
        assert_eq!(PoseScore::new(-9.0).value(), -2.0);
        assert_eq!(PoseScore::new(f64::NAN).value(), -2.0);
    }

    #[test]
    fn class_weight_examples() {
        let w = compute_class_weights([36238, 28017, 24269]).unwrap();
        assert!((w.green - 0.8143).abs() < 1e-4);
        assert!((w.yellow - 1.0532).abs() < 1e-4);
        assert!((w.red - 1.2159).abs() < 1e-4);
        assert_eq!(compute_class_weights([5, 5, 5]).unwrap(), ClassWeights::default());
        let w = compute_class_weights([1, 1, 2]).unwrap();
        assert_eq!((w.green, w.yellow, w.red), (4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0));
        assert!(compute_class_weights([1, 0, 2]).is_err());
    }

    #[test]
    fn weighted_mse_examples() {
        let w = ClassWeights::default();
        assert_eq!(weighted_mse(&[0.1, -1.2], &[0.1, -1.2], &[Green, Red], &w).unwrap(), 0.0);
        let w2 = ClassWeights { green: 2.0, ..w };
        assert_eq!(weighted_mse(&[0.5], &[1.0], &[Green], &w2).unwrap(), 0.5);
        assert!(weighted_mse(&[0.5], &[1.0, 2.0], &[Green], &w).is_err());
    }

    #[test]
    fn checkpoint_selection() {
        let losses = [5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25];
        assert_eq!(select_checkpoint_epoch(&losses, 5), Some((6, false)));
        assert_eq!(select_checkpoint_epoch(&[3.0, 1.0, 2.0], 5), Some((1, true)));
        assert_eq!(select_checkpoint_epoch(&[], 5), None);
        // A single lucky dip does not beat a consistently low stretch.
        let noisy = [1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 2.0, 2.0, 2.0, 2.0, 0.6, 0.6, 0.6, 0.6, 0.6];
        assert_eq!(select_checkpoint_epoch(&noisy, 5), Some((14, false)));
    }

    #[test]
    fn confusion_and_accuracy() {
        let truth = [Green, Yellow, Red, Red];
        let r = evaluate_categories(0, &truth, &truth).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion.0, [[1, 0, 0], [0, 1, 0], [0, 0, 2]]);
        let r = evaluate_categories(0, &truth, &[Yellow, Yellow, Red, Green]).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.confusion.recall(Red), Some(0.5));
        assert!(evaluate_categories(0, &[], &[]).is_err());
    }

    #[test]
    fn hidden_landmarks_render_blank() {
        let preds = vec![
            LandmarkPrediction { id: LandmarkId::RV, x: 4.0, y: 5.0, peak: 0.5, radius: 1.0, visible: true },
            LandmarkPrediction { id: LandmarkId::LA, x: 2.0, y: 2.0, peak: 0.5, radius: 1.0, visible: false },
        ];
        let ch = render_landmark_channels(&preds, 10, 10, 2.0);
        assert_eq!(ch.len(), 6);
        let rv = KEY_LANDMARKS.iter().position(|&i| i == LandmarkId::RV).unwrap();
        let la = KEY_LANDMARKS.iter().position(|&i| i == LandmarkId::LA).unwrap();
        assert_eq!(ch[rv].get(4, 5), 1.0);
        assert!(ch[la].pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_channels() {
        let frame = Frame::zeros(8, 8);
        assert_eq!(scorer_channels(ScorerMode::ImagesOnly, &frame, None, 2.0).unwrap().len(), 1);
        assert!(scorer_channels(ScorerMode::LandmarksOnly, &frame, None, 2.0).is_err());
        assert_eq!(
            scorer_channels(ScorerMode::ImagesAndLandmarks, &frame, Some(&[]), 2.0).unwrap().len(),
            7
        );
    }

    #[test]
    fn grid_aggregation() {
        let r = FoldResult { fold_index: 1, accuracy: 0.5, confusion: ConfusionMatrix::default() };
        let reports = vec![
            FoldReport::new(&r, ScorerMode::ImagesOnly, ScorerArchitecture::Regression),
            FoldReport::new(&FoldResult { fold_index: 0, accuracy: 0.7, ..r.clone() }, ScorerMode::ImagesOnly, ScorerArchitecture::Regression),
        ];
        let grid = aggregate_reports(&reports, 5);
        assert_eq!(grid.len(), 6);
        let col = grid
            .iter()
            .find(|c| c.mode == ScorerMode::ImagesOnly && c.architecture == ScorerArchitecture::Regression)
            .unwrap();
        assert!((col.mean.unwrap() - 0.6).abs() < 1e-12);
    }
}
