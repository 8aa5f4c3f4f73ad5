//! Minimal differentiable network core.
//!
//! Multilayer perceptrons built from `dense -> batch-norm -> activation -> dropout`
//! blocks with a hand-written reverse pass, the ADAM optimizer, reparameterized
//! Gaussian sampling and a central finite-difference gradient oracle.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod mlp;

pub use adam::{AdamConfig, AdamState, NamedVectors, Trainable};
pub use checkpoint::{read_tensors, write_tensors, NamedTensor};
pub use gradcheck::{central_difference, max_relative_error};
pub use mlp::{
    Activation, BatchNorm, ForwardCache, Layer, LayerGrads, LayerSpec, Mlp, MlpGrads, MlpSpec, Mode,
    BN_EPS, BN_MOMENTUM, DEFAULT_DROPOUT, LEAKY_SLOPE,
};

use crate::error::{Error, Result};

/// Smallest standard deviation accepted by [`sample_reparameterized`].
pub const SIGMA_FLOOR: f64 = 1e-8;

/// `mu + sigma * noise`, the reparameterized draw from `N(mu, sigma^2)`.
///
/// The sample is differentiable with `d/dmu = 1` and `d/dsigma = noise`.
/// Standard deviations in `[0, SIGMA_FLOOR)` are clamped to the floor;
/// negative or NaN values are rejected.
pub fn sample_reparameterized(mu: f64, sigma: f64, noise: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("standard deviation must be non-negative, got {sigma}")));
    }
    Ok(mu + sigma.max(SIGMA_FLOOR) * noise)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
