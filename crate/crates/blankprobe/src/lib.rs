//! Probe what an image classifier has learnt by asking it to fill in the
//! blanks of masked images.
//!
//! The pipeline: mask an image with patch-structured binary masks, read the
//! classifier's input-space loss gradient as an update direction for the
//! hidden pixels, restrict/normalize/binarize that update, and overlay it
//! on the masked input. Averaging updates over many random masks renders a
//! prototypical image of the class; walking a non-overlapping mask
//! sequence re-synthesizes an image pixel-region by pixel-region; scoring
//! the generated prototypes with the same classifier quantifies their
//! consistency.
//!
//! Entry points:
//!
//! * [`models::Model`] — build or load a classifier, train it with
//!   [`models::train`].
//! * [`masking`] — uniform mask sampling and progressive sequences.
//! * [`update`] — first-order and BFGS update directions, the threshold
//!   transform, and fill composition.
//! * [`probes`] — the random-mask expectation probe, the progressive
//!   probe, consistency metrics, and the ablation sweep.
//! * [`viz`] — grids, signed overlays, PNG/PGM output.
//!
//! The `blankprobe` binary wires these into reproducible runs; see the
//! crate examples for library usage.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod masking;
pub mod models;
pub mod ops;
pub mod parallel;
pub mod probes;
pub mod rng;
pub mod tensor;
pub mod update;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
