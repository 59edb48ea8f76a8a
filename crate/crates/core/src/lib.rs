//! Latent-variable session recommender.
//!
//! Each session has a Gaussian latent state `omega ~ N(0, I_K)`; its views
//! are i.i.d. draws from `softmax(psi * omega + rho)`. The crate provides the
//! exact model quantities, Bouchard-bound variational EM, amortized
//! encoders trained by RMSProp on either the Bouchard or the
//! reparameterized bound, next-item prediction, leave-last-out metrics,
//! popularity and item-KNN baselines, and a simulator.

pub mod baselines;
pub mod bouchard;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod predict;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
