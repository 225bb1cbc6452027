//! Differentiable dynamic-scene Gaussian splatting with spatio-temporal
//! decoupling.
//!
//! Each Gaussian carries a `K`-vector of mask logits, one per training
//! timestamp. The sigmoid of the entry for the current timestamp multiplies the
//! Gaussian's opacity, so Gaussians can learn when they exist. After a warm-up,
//! the softmax of the logits feeds a separated feature network whose spatial and
//! temporal features drive the deformation field. Two regularizers keep the
//! masks smooth in time and consistent between spatial neighbors.
//!
//! All math runs in `f64` with hand-written backward passes; see
//! [`gradcheck`] for the finite-difference utilities the tests use.

pub mod cloud;
pub mod deform;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod nets;
pub mod scenes;
pub mod splat;
pub mod stdr;
pub mod trainer;

pub use error::{Error, Result};
