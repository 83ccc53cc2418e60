//! Pose-evolution encoding, pose-aware augmentation, joint-gated action
//! recognition models and clip selection for untrimmed videos.

pub mod augment;
pub mod clipselect;
pub mod config;
pub mod encoding;
pub mod error;
pub mod io;
pub mod joints;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod training;

pub use error::{CoreError, Result};
pub use pmk_tensor as tensor;
