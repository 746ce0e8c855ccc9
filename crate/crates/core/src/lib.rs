//! Multimodal variational autoencoder (MVAE) with product-of-experts
//! posterior fusion, built on a small f64 reverse-mode autodiff engine.
//!
//! Layout:
//! - [`numerics`]: dense tensors, gradient tape, seeded RNG streams, Adam.
//! - [`gaussian`]: diagonal-Gaussian expert algebra (PoE, QoE, KL, densities).
//! - [`model`]: encoders/decoders, posterior fusion, ELBO terms, the
//!   sub-sampled training objective.
//! - [`training`]: optimization loop, beta annealing, weak-supervision splits.
//! - [`evaluation`]: importance-sampling log-likelihood estimators and
//!   log-weight variance diagnostics.
//! - [`data`]: IDX files, synthetic generators, and an analytically
//!   tractable linear-Gaussian family used as an estimator oracle.
//! - [`selfcheck`]: the fast oracle suite behind the `check` CLI command.

pub mod data;
pub mod evaluation;
pub mod gaussian;
pub mod model;
pub mod numerics;
pub mod selfcheck;
pub mod training;

pub use numerics::{GradTape, NodeId, RngStream, Tensor};
