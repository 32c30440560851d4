//! Few-shot fingerprint recognition on a from-scratch deep-learning stack.
//!
//! The crate is organized around five subsystems:
//!
//! - [`tensor`]: dense n-dimensional float tensors with reverse-mode
//!   automatic differentiation, plus a finite-difference gradient checker.
//! - [`model`]: residual convolutional networks (basic and bottleneck
//!   blocks), head replacement for transfer learning, parameter freezing,
//!   and a bit-exact binary checkpoint format.
//! - [`trainer`]: cross-entropy + Frobenius-regularized loss, Adam/SGD,
//!   the training loop with validation-based epoch selection, and
//!   evaluation reports.
//! - [`data`]: dataset ingestion from directory-per-subject PGM/PPM trees,
//!   the seeded per-subject train/val/test split, the augmentation
//!   pipeline, preprocessing, and a synthetic ridge-image generator.
//! - [`saliency`]: occlusion-sensitivity sweeps and map rendering.
//!
//! The `ridgenet` binary exposes the whole pipeline as subcommands
//! (`synth`, `split`, `train`, `eval`, `saliency`).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
