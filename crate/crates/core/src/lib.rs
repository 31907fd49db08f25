//! Polyp segmentation and neoplasm detection with a HarDNet-68 encoder,
//! lightweight receptive field blocks and multi-scale feature aggregation.
//!
//! Modules:
//! - [`topology`]: harmonic block connectivity and the HarDNet-68 stage plan
//! - [`network`]: the model, its layers, checkpoints and complexity counting
//! - [`losses`]: BCE/CCE, (focal) Tversky, undefined-pixel masking, per-variant totals
//! - [`metrics`]: prediction decoding and micro-averaged Dice/IoU
//! - [`data`]: mask palette, manifests, oversampling, augmentation, resizing
//! - [`trainer`]: SGD with Nesterov momentum, warmup + cosine schedule, training loop
//! - [`bench`]: latency/FPS protocol and parameter/FLOP reports
//! - [`cli`]: run configuration and subcommand implementations

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
