//! Modality-agnostic multi-modal semantic segmentation, desk scale.
//!
//! The crate trains a tiny shared-weight patch encoder over four sensing
//! modalities (RGB, depth, event, LiDAR), fuses the per-modality features
//! with a similarity-guided fusion pipeline, and distils correlation
//! structure from a synthetic language-style teacher. Everything runs on
//! CPU with f64 precision and deterministic seeding so the numeric behaviour
//! is reproducible bit for bit.
//!
//! The main building blocks:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine.
//! - [`segnet`]: shared-weight patch encoder and segmentation head.
//! - [`mff`]: modality-agnostic feature fusion (anchor, reweight, select,
//!   aggregate).
//! - [`lscd`]: correlation and semantic distillation losses against a
//!   synthetic teacher.
//! - [`synthdata`]: seeded multi-modal scene generator with sensor
//!   corruptions.
//! - [`trainer`]: the supervised + distillation training loop.
//! - [`eval`]: confusion-matrix metrics plus modality-subset and
//!   sensor-failure evaluation protocols.
//! - [`cli`]: the `any2seg` command-line entry points.
//!
//! See the `examples/` directory for runnable walkthroughs of each part.

pub mod cli;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod label;
pub mod lscd;
pub mod mff;
pub mod par;
mod rng_util;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use label::{LabelMap, IGNORE_LABEL};
pub use tensor::{Gradients, Tape, Tensor};
