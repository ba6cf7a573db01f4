//! Heat kernels on manifolds learned from point clouds, estimated by
//! simulating Brownian motion under the expected Riemannian metric of a
//! Gaussian-process latent variable model, and Gaussian-process regression
//! with those heat kernels as covariance.

pub mod analytic;
pub mod baselines;
pub mod bm;
pub mod csvio;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod gpr;
pub mod heat;
pub mod kernels;
pub mod linalg;
pub mod lvm;
pub mod manifest;
pub mod optim;

pub use error::{Error, Result};
