//! Core types and algorithms for apical 4-chamber echocardiography guidance:
//! dataset ingestion, the deduction rubric, heatmap landmark decoding and
//! loss, pose-score handling, LVEF clip gating, the cascade's buffering
//! logic and the service wire protocol.
//!
//! Everything here is model-free; the networks live in `echoguide-nn`.

pub mod cascade;
pub mod error;
pub mod frame;
pub mod ingest;
pub mod landmarks;
pub mod lvef;
pub mod pose;
pub mod protocol;
pub mod rubric;
pub mod synthetic;

pub use error::{Error, Result};
pub use frame::Frame;
pub use rubric::{PoseCategory, RubricCriterion};
