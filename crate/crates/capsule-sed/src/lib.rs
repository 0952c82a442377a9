//! Capsule-routing polyphonic sound event detection.
//!
//! Everything runs on the CPU in `f64` on a scratch-built reverse-mode
//! autodiff core: log mel feature extraction, a convolutional feature
//! detector, capsule layers with routing-by-agreement, a bidirectional GRU
//! head, joint margin/cross-entropy training, dynamic-threshold decisions,
//! and segment-based evaluation. A synthetic corpus generator supplies
//! desk-scale data with exact ground truth.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `capsule-sed` binary for the end-to-end pipeline.

pub mod caps;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod roll;
pub mod train;
pub mod tensor;
pub mod threshold;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};
