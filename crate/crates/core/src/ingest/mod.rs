//! Dataset ingestion: EchoNet tables, auxiliary landmarks, sweep manifests,
//! continuous pose scores, subject folds and augmentation.

pub mod augment;
pub mod echonet;
pub mod folds;
pub mod scores;
pub mod sweep;

pub use augment::{augment_frame, augment_frame_seeded, AugmentParams, AugmentRanges};
pub use echonet::{
    clip_id_from_filename, merge_annotations, parse_auxiliary_landmarks, parse_auxiliary_table,
    parse_echonet_annotations, parse_file_table, parse_tracing_table, EchoNetClip,
    LandmarkAnnotation, LandmarkTarget, Point, Split,
};
pub use folds::{make_subject_folds, FoldPlan};
pub use scores::{assign_continuous_scores, category_score_range};
pub use sweep::{
    load_sweep, parse_sweep_manifest, parse_sweep_manifest_str, serialize_sweep_manifest,
    SweepManifestEntry, SweepRecording,
};
