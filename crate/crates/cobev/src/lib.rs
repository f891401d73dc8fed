//! Vehicle-infrastructure collaborative BEV perception at desk scale.
//!
//! The crate implements a full feature-level fusion pipeline for a two-sided
//! V2X setting (an ego vehicle plus roadside infrastructure): point clouds are
//! pillarized into bird's-eye-view feature grids, historical frames are warped
//! into the current ego frame and fused, the infrastructure features are
//! compensated toward the vehicle feature domain, and a collaborative fusion
//! block combines the agents with heterogeneous multi-head attention followed
//! by deformable attention. A frozen early-fusion teacher supervises the fused
//! student features, and a rotated-box detection head plus AP evaluation close
//! the loop. Everything differentiable runs on the crate's own reverse-mode
//! autodiff core ([`tensor`]), validated against central finite differences.
//!
//! Start with the runnable programs under `examples/` — each one demonstrates
//! a single capability — or with the `cobev` binary, which wraps the synthetic
//! training and evaluation harness behind subcommands.

pub mod bev;
pub mod compensation;
pub mod detection;
pub mod distill;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod pillar;
pub mod temporal;
pub mod tensor;

mod init;

mod error;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Scalar type for feature data and gradients.
///
/// Defaults to `f64`; the `f32` feature switches experiment runs to single
/// precision. Gradient-check tolerances in the test suite assume `f64`.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Name of the active precision, for config validation and run manifests.
pub const PRECISION: &str = if cfg!(feature = "f32") { "f32" } else { "f64" };
