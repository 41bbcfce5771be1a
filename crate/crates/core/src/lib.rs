//! Binarized vision-MLP engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense float tensors, sign-packed bit tensors, record format.
//! * [`kernels`]: XNOR-popcount GEMM and convolution, the straight-through
//!   estimator and representation-ability accounting.
//! * [`layers`]: differentiable layers with hand-written backward passes.
//! * [`arch`]: multi-branch binary MLP blocks, downsampling, full models.
//! * [`complexity`]: FLOPs / BOPs / OPs analysis.
//! * [`train`]: distillation loss, AdamW, datasets, checkpoints, training loop.
//! * [`verify`]: the oracle suites behind `bimlp selftest`.

pub mod arch;
pub mod complexity;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
