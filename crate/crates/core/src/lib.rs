//! Particle filtering and fixed-lag smoothing for continuous-discrete
//! state-space models.
//!
//! The hidden state follows a diffusion `dx = f(x) dt + σ dB` integrated with
//! Euler–Maruyama, and is observed at discrete times through `y = g(x) + γ`.
//! Two fixed-lag smoothers are provided on top of a sequential importance
//! resampling filter:
//!
//! - [`smoother::smooth_standard`] reweights the filter's own trajectories with
//!   the weights obtained at the next observation;
//! - [`smoother::smooth_conditional`] samples fresh trajectories between each
//!   pair of filter states with a diffusion bridge ([`bridge`]) and corrects
//!   them with Girsanov importance weights.
//!
//! [`models`] contains the sine diffusion, the stochastic 2D Navier-Stokes
//! vorticity model, and linear-Gaussian models with an exact Kalman/RTS
//! oracle. [`harness`] drives twin experiments and writes CSV/JSON outputs.

pub mod bridge;
pub mod error;
pub mod filter;
pub mod harness;
pub mod models;
pub mod rng;
pub mod sde;
pub mod smoother;
pub mod weights;

pub use error::{Error, Result};
