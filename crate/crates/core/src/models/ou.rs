//! Ornstein–Uhlenbeck process `dx = −θ x dt + σ dB` and its closed forms.

use std::sync::Arc;

use crate::error::Result;
use crate::sde::{DiffusionSpec, IsotropicNoise, LinearDrift};

pub fn ou_diffusion(theta: f64, sigma: f64) -> Result<DiffusionSpec> {
    DiffusionSpec::new(
        Arc::new(LinearDrift {
            matrix: nalgebra::DMatrix::from_element(1, 1, -theta),
        }),
        Arc::new(IsotropicNoise { dim: 1, scale: sigma }),
    )
}

/// `E[x(t) | x(0) = x0]`.
pub fn ou_mean(x0: f64, theta: f64, t: f64) -> f64 {
    x0 * (-theta * t).exp()
}

/// `Var[x(t) | x(0)]`.
pub fn ou_variance(theta: f64, sigma: f64, t: f64) -> f64 {
    sigma * sigma * (1.0 - (-2.0 * theta * t).exp()) / (2.0 * theta)
}

/// Mean and variance of `x(t)` given `x(0) = u` and `x(T) = v`, for the
/// continuous-time process.
pub fn ou_bridge_moments(theta: f64, sigma: f64, u: f64, v: f64, t: f64, horizon: f64) -> (f64, f64) {
    // Gaussian conditioning of (x(t), x(T)) given x(0) = u
    let m_t = ou_mean(u, theta, t);
    let m_big = ou_mean(u, theta, horizon);
    let var_t = ou_variance(theta, sigma, t);
    let var_big = ou_variance(theta, sigma, horizon);
    let cov = (-theta * (horizon - t)).exp() * var_t;
    let mean = m_t + cov / var_big * (v - m_big);
    let var = var_t - cov * cov / var_big;
    (mean, var)
}
