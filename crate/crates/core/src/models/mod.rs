//! Concrete models: the sine diffusion, the vorticity model and the
//! Ornstein–Uhlenbeck / linear-Gaussian models used as exact references.

pub mod grf;
pub mod linear_gaussian;
pub mod navier_stokes;
pub mod ou;
pub mod precision;
pub mod sine;
pub mod spectral;
