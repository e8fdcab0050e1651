//! Landmark schema, heatmap decoding, the training loss and error metrics.

pub mod eval;
pub mod heatmap;
pub mod loss;
pub mod schema;

pub use eval::{evaluate_landmark_error, ErrorStats, LandmarkErrorConfig, LandmarkErrorReport};
pub use heatmap::{
    argmax, decode_index, decode_landmarks, encode_target_index, landmark_visibility_gate,
    predict_landmarks, spatial_softmax, uncertainty_radius, HeatmapLogits, LandmarkPrediction,
    ProbabilityMaps, UncertaintyRule, VisibilityGate,
};
pub use loss::{masked_weighted_nll, masked_weighted_nll_with_grad, AnnotationBatch};
pub use schema::{LandmarkId, Visibility, VisWeightMap, KEY_LANDMARKS, NUM_CONTOUR, NUM_LANDMARKS};
