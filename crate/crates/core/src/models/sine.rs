//! `dx = sin(x) dt + σ_x dB`, observed directly with Gaussian noise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::{
    DiffusionSpec, FnDrift, IdentityObservation, IsotropicNoise, ObservationNoise, ObservationSpec,
    StateSpaceModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SineParams {
    pub sigma_x2: f64,
    pub sigma_y2: f64,
    pub dt: f64,
    pub obs_stride: usize,
}

impl Default for SineParams {
    fn default() -> Self {
        Self {
            sigma_x2: 0.5,
            sigma_y2: 0.01,
            dt: 0.005,
            obs_stride: 20,
        }
    }
}

pub fn sine_drift(x: &[f64], out: &mut [f64]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o = xi.sin();
    }
}

pub fn sine_diffusion(sigma_x2: f64) -> Result<DiffusionSpec> {
    if !(sigma_x2 >= 0.0 && sigma_x2.is_finite()) {
        return Err(Error::InvalidModel(format!("sigma_x2 must be non-negative, got {sigma_x2}")));
    }
    DiffusionSpec::new(
        Arc::new(FnDrift::new(1, sine_drift)),
        Arc::new(IsotropicNoise {
            dim: 1,
            scale: sigma_x2.sqrt(),
        }),
    )
}

pub fn sine_model(p: &SineParams) -> Result<StateSpaceModel> {
    let obs = ObservationSpec::new(
        Arc::new(IdentityObservation { dim: 1 }),
        ObservationNoise::diagonal(vec![p.sigma_y2])?,
    )?;
    StateSpaceModel::new(sine_diffusion(p.sigma_x2)?, obs, p.dt, p.obs_stride)
}
