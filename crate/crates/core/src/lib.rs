//! Lossless compression with variational auto-encoders.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`],
//! [`adam`]), an MLP VAE with Bernoulli or discretized-logistic observations
//! ([`model`]), encoder-training objectives that differ in where the encoder's
//! training inputs come from ([`objectives`]), an rANS entropy coder
//! ([`ans`]) and bits-back coding on top of it ([`bits_back`]).

pub mod adam;
pub mod ans;
pub mod autodiff;
pub mod bits_back;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use adam::{AdamConfig, AdamState, Param};
pub use autodiff::{Gradients, Tape, Var};
pub use data::{Dataset, Domain, Splits};
pub use error::{Error, Result};
pub use model::{Architecture, GaussianPosterior, ObsDistribution, ObsModel, VaeModel};
pub use tensor::Tensor;
