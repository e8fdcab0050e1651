//! Candle networks for the guidance cascade: the heatmap landmark
//! detector, the two pose scorers and the LVEF video regressor, with their
//! training loops and checkpoints.

pub mod adapter;
pub mod error;
pub mod landmark;
pub mod loss;
pub mod params;
pub mod pose;
pub mod resnet;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use params::ParamStore;
