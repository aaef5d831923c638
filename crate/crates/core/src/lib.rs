//! Flow-matching surrogate models for zero degree calorimeter (ZDC) responses.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`numerics`]: a small reverse-mode differentiable array core (NCHW
//!   convolutions, group normalization, attention) plus Adam.
//! - [`model`]: the conditional U-Net velocity network, the small VAE and the
//!   versioned checkpoint format.
//! - [`flow_matching`]: the conditional flow-matching objective, the Euler
//!   sampler and training loop.
//! - [`latent`]: VAE training with the gradient-normalized loss and flow
//!   matching in the VAE latent space.
//! - [`data`]: the `ZDC1` container, preprocessing and a synthetic shower
//!   generator that stands in for detector simulation.
//! - [`metrics`]: channel extraction, Wasserstein-1, MAE and histograms.
//! - [`baselines`]: direct channel-value regressors.
//! - [`tuning`]: seeded random-search campaigns and the Wasserstein CDF.
//! - [`bench`]: per-sample inference latency harness.

pub mod baselines;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod flow_matching;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod rng;
pub mod tuning;

pub use error::{Error, Result};
