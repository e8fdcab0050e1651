//! The real-time guidance cascade and its plumbing: per-session frame
//! processing, throughput metering, the streaming server and the command
//! implementations behind the `echoguide` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod models;
pub mod server;
pub mod session;

pub use error::{Error, Result};
pub use models::CascadeModels;
pub use session::{measure_throughput, Session};
