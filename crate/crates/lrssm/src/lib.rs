//! Structured amortized variational inference for nonlinear Gaussian
//! state-space models.
//!
//! Posteriors and one-step predictives are held as low-rank-plus-diagonal
//! Gaussians ([`lowrank`]), the recursions in [`smoother`] run in time linear
//! in the latent dimension, and everything is written against the
//! [`ad::Backend`] trait so the same code evaluates eagerly or records a tape
//! for exact reverse-mode gradients ([`trainer`]).

pub mod ad;
pub mod container;
pub mod dynamics;
pub mod encoders;
pub mod error;
pub mod likelihoods;
pub mod lowrank;
pub mod model;
pub mod nn;
pub mod params;
pub mod sequence;
pub mod smoother;
pub mod trainer;

pub use error::{Error, Result};
