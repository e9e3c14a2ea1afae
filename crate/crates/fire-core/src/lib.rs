//! Unsupervised bi-directional registration with cross-modality synthesis.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: n-D tensors with reverse-mode autodiff and Adam;
//! - [`warp`]: normalized-coordinate sampling grids, differentiable
//!   resampling, bending energy and Jacobian diagnostics;
//! - [`model`]: the shared encoder, the two synthesis decoders and the two
//!   factorised (affine + non-rigid) transformation networks;
//! - [`loss`]: the synthesis / registration / regularization objective;
//! - [`data`]: synthetic multi-modality phantoms, random perturbations and
//!   volume file I/O;
//! - [`trainer`]: the three-optimizer training loop with checkpointing;
//! - [`eval`]: Dice, inverse-consistency and Jacobian metrics plus a
//!   timing harness;
//! - [`config`]: the JSON run configuration shared with the CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{FireError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
