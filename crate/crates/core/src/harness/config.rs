//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterConfig, Proposal};
use crate::harness::io;
use crate::models::linear_gaussian::LinearGaussian;
use crate::models::navier_stokes::{NsModel, NsParams};
use crate::models::sine::{sine_model, SineParams};
use crate::sde::StateSpaceModel;
use crate::smoother::{PrecisionSource, SmootherConfig};

/// Scalar linear-Gaussian model `dx = a x dt + √q dB`, `y = x + γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalarLinearParams {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub dt: f64,
    pub obs_stride: usize,
}

impl Default for ScalarLinearParams {
    fn default() -> Self {
        Self {
            a: -1.0,
            q: 1.0,
            r: 0.1,
            dt: 0.01,
            obs_stride: 20,
        }
    }
}

impl ScalarLinearParams {
    pub fn linear_gaussian(&self) -> Result<LinearGaussian> {
        LinearGaussian::scalar(self.a, self.q, self.r, self.dt, self.obs_stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Sine(SineParams),
    NavierStokes(NsParams),
    LinearGaussian(ScalarLinearParams),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Sine(_) => "sine",
            ModelConfig::NavierStokes(_) => "navier_stokes",
            ModelConfig::LinearGaussian(_) => "linear_gaussian",
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            ModelConfig::Sine(p) => p.dt,
            ModelConfig::NavierStokes(p) => p.dt,
            ModelConfig::LinearGaussian(p) => p.dt,
        }
    }

    pub fn obs_stride(&self) -> usize {
        match self {
            ModelConfig::Sine(p) => p.obs_stride,
            ModelConfig::NavierStokes(p) => p.obs_stride,
            ModelConfig::LinearGaussian(p) => p.obs_stride,
        }
    }

    /// Side of the vorticity grid, if this is a field model.
    pub fn field_grid(&self) -> Option<usize> {
        match self {
            ModelConfig::NavierStokes(p) => Some(p.grid),
            _ => None,
        }
    }
}

/// A model ready to run, with the pieces some stages need beyond the
/// state-space form.
pub struct BuiltModel {
    pub state_space: StateSpaceModel,
    pub ns: Option<NsModel>,
}

impl BuiltModel {
    pub fn dim(&self) -> usize {
        self.state_space.dim()
    }
}

/// Starting state of the simulated truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthConfig {
    /// Initial state for low-dimensional models.
    pub x0: Option<Vec<f64>>,
    /// RMS of the smooth random initial vorticity.
    pub field_rms: f64,
    /// Highest Fourier mode of the initial vorticity.
    pub field_max_mode: i64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            x0: None,
            field_rms: 0.5,
            field_max_mode: 4,
        }
    }
}

/// Initial ensemble: Gaussian around the first observation (identity
/// observation models) or `mean` when given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub mean: Option<Vec<f64>>,
    pub sd: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { mean: None, sd: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub truth: u64,
    pub filter: u64,
    pub smoother: u64,
}

impl Seeds {
    /// Three distinct seeds derived from one.
    pub fn from_base(seed: u64) -> Self {
        Self {
            truth: crate::rng::derive_seed(seed, &[1]),
            filter: crate::rng::derive_seed(seed, &[2]),
            smoother: crate::rng::derive_seed(seed, &[3]),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Keep every `truth_stride`-th step in the truth CSV.
    pub truth_stride: usize,
    /// Write field dumps every this many steps (0 disables them).
    pub field_dump_stride: usize,
    /// At most this many state columns in mean traces.
    pub csv_max_dims: usize,
    /// Dump the smoother support every this many windows (0 disables it).
    pub support_window_stride: usize,
    /// Record wall-clock timings in reports (breaks byte reproducibility).
    pub record_timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            truth_stride: 1,
            field_dump_stride: 0,
            csv_max_dims: 16,
            support_window_stride: 0,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Length of the run in model time units; a whole number of
    /// observation intervals.
    pub horizon: f64,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub smoother: SmootherConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub truth: TruthConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Sine diffusion over 250 time units, 20 particles, 50 bridges.
    pub fn sine_default() -> Self {
        Self {
            model: ModelConfig::Sine(SineParams::default()),
            horizon: 250.0,
            filter: FilterConfig {
                n_particles: 20,
                ..FilterConfig::default()
            },
            smoother: SmootherConfig {
                bridges: 50,
                support_steps: vec![10],
                ..SmootherConfig::default()
            },
            seeds: Seeds::default(),
            truth: TruthConfig {
                x0: Some(vec![0.0]),
                ..TruthConfig::default()
            },
            init: InitConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Vorticity model on 32×32 over 10 observation windows, EnKF proposal.
    pub fn navier_stokes_default() -> Self {
        let ns = NsParams::default();
        let horizon = 10.0 * ns.obs_stride as f64 * ns.dt;
        Self {
            model: ModelConfig::NavierStokes(ns),
            horizon,
            filter: FilterConfig {
                n_particles: 100,
                proposal: Proposal::Enkf,
                ..FilterConfig::default()
            },
            smoother: SmootherConfig {
                bridges: 50,
                weight_floor: 1e-6,
                max_active_pairs: Some(20),
                precision: PrecisionSource::Empirical {
                    samples: 50,
                    rel_tol: crate::models::precision::DEFAULT_REL_TOL,
                },
                support_steps: Vec::new(),
            },
            seeds: Seeds::default(),
            truth: TruthConfig::default(),
            init: InitConfig { mean: None, sd: 0.1 },
            output: OutputConfig {
                field_dump_stride: 100,
                ..OutputConfig::default()
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path).map_err(|e| match e {
            Error::Parse { path, message } => Error::Config(format!("{}: {message}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Number of observation windows.
    pub fn windows(&self) -> Result<usize> {
        let interval = self.model.dt() * self.model.obs_stride() as f64;
        let w = self.horizon / interval;
        let rounded = w.round();
        if !(rounded >= 1.0) || (w - rounded).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "horizon {} is not a positive multiple of the observation interval {interval}",
                self.horizon
            )));
        }
        Ok(rounded as usize)
    }

    /// Total Euler steps.
    pub fn steps(&self) -> Result<usize> {
        Ok(self.windows()? * self.model.obs_stride())
    }

    pub fn validate(&self) -> Result<()> {
        self.windows()?;
        self.filter.validate()?;
        self.smoother.validate()?;
        let n = self.model.obs_stride();
        if let Some(s) = self.smoother.support_steps.iter().find(|&&s| s > n) {
            return Err(Error::Config(format!("support step {s} is beyond the window length {n}")));
        }
        if !(self.init.sd >= 0.0) {
            return Err(Error::Config("initial spread must be non-negative".into()));
        }
        if self.output.truth_stride == 0 {
            return Err(Error::Config("truth_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<BuiltModel> {
        let wrap = |e: Error| match e {
            Error::InvalidModel(m) => Error::Config(m),
            other => other,
        };
        match &self.model {
            ModelConfig::Sine(p) => Ok(BuiltModel {
                state_space: sine_model(p).map_err(wrap)?,
                ns: None,
            }),
            ModelConfig::NavierStokes(p) => {
                let ns = NsModel::new(p.clone()).map_err(wrap)?;
                Ok(BuiltModel {
                    state_space: ns.state_space().map_err(wrap)?,
                    ns: Some(ns),
                })
            }
            ModelConfig::LinearGaussian(p) => Ok(BuiltModel {
                state_space: p.linear_gaussian().and_then(|lg| lg.model()).map_err(wrap)?,
                ns: None,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        for cfg in [ExperimentConfig::sine_default(), ExperimentConfig::navier_stokes_default()] {
            cfg.validate().unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(ExperimentConfig::sine_default().windows().unwrap(), 2500);
        assert_eq!(ExperimentConfig::sine_default().steps().unwrap(), 50_000);
        assert_eq!(ExperimentConfig::navier_stokes_default().windows().unwrap(), 10);
        let mut c = ExperimentConfig::sine_default();
        c.horizon = 0.05;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"model": {"kind": "sine"}, "horizon": 1.0}"#).unwrap();
        assert_eq!(cfg.model, ModelConfig::Sine(SineParams::default()));
        assert_eq!(cfg.windows().unwrap(), 10);
        assert_eq!(cfg.filter, FilterConfig::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut c = ExperimentConfig::sine_default();
        c.filter.n_particles = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::sine_default();
        c.model = ModelConfig::Sine(SineParams {
            sigma_y2: -1.0,
            ..SineParams::default()
        });
        assert!(matches!(c.build_model(), Err(Error::Config(_))));
    }
}
