//! Sequential importance resampling filter over observation windows.
//!
//! The first observation sits at `t = 0`. Each call to
//! [`ParticleFilter::advance`] covers one window `[t_k, t_{k+1}]`:
//!
//! 1. resample the ensemble at `t_k` if its ESS fell below the threshold;
//! 2. extend every particle with an unconditional Euler path to `t_{k+1}`;
//! 3. correct at `t_{k+1}`, either by likelihood reweighting (bootstrap) or by
//!    a perturbed-observation EnKF shift followed by likelihood reweighting.
//!
//! The returned [`WindowSnapshot`] keeps the paths in lineage order, so
//! `paths[i].first()` and `paths[i].last()` form the filter pair
//! `(x_{t_k}^{(i)}, x_{t_{k+1}}^{(i)})` carrying weight `weights[i]`.
//!
//! With the EnKF proposal the weight increment is the observation
//! log-likelihood at the shifted particle. This is not the exact importance
//! weight of a weighted EnKF; it keeps weighted trajectories available to the
//! smoothers but should be read as an approximation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::sde::{simulate, ObservationNoise, StateSpaceModel, TimeGrid, Trajectory};
use crate::weights::normalize_log_weights;

pub use crate::weights::ess;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proposal {
    /// Transition prior; weights updated by the likelihood.
    Bootstrap,
    /// Ensemble Kalman shift towards the observation.
    Enkf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampler {
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub proposal: Proposal,
    /// Resample when `ESS < resample_threshold · N`.
    pub resample_threshold: f64,
    pub resampler: Resampler,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 100,
            proposal: Proposal::Bootstrap,
            resample_threshold: 0.5,
            resampler: Resampler::Systematic,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config("the filter needs at least two particles".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "resample threshold must lie in (0, 1], got {}",
                self.resample_threshold
            )));
        }
        Ok(())
    }
}

/// Independent Gaussian initial law `N(mean, diag(sd²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDistribution {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl InitialDistribution {
    pub fn isotropic(mean: Vec<f64>, sd: f64) -> Self {
        let sd = vec![sd; mean.len()];
        Self { mean, sd }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.sd)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// `N` weighted particles at one time, optionally with the paths that led
/// there since the previous observation.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    pub dim: usize,
    /// Global grid index of the current time.
    pub step: usize,
    pub time: f64,
    /// Row-major `N × dim` particle states.
    pub states: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub norm_weights: Vec<f64>,
    pub paths: Option<Vec<Trajectory>>,
}

impl WeightedEnsemble {
    pub fn uniform(dim: usize, step: usize, time: f64, states: Vec<f64>) -> Self {
        let n = states.len() / dim;
        Self {
            dim,
            step,
            time,
            states,
            log_weights: vec![-(n as f64).ln(); n],
            norm_weights: vec![1.0 / n as f64; n],
            paths: None,
        }
    }

    pub fn len(&self) -> usize {
        self.norm_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norm_weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ess(&self) -> f64 {
        ess(&self.norm_weights)
    }

    pub fn mean(&self) -> Vec<f64> {
        weighted_mean(self.dim, &self.states, &self.norm_weights)
    }

    fn renormalize(&mut self, obs_index: usize) -> Result<()> {
        self.norm_weights = normalize_log_weights(&self.log_weights).map_err(|e| match e {
            Error::DegenerateBatch | Error::Domain(_) => Error::FilterDegenerate { obs_index },
            other => other,
        })?;
        // keep log-weights normalized to avoid drift over thousands of steps
        self.log_weights = self.norm_weights.iter().map(|w| w.ln()).collect();
        Ok(())
    }
}

fn weighted_mean(dim: usize, flat: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for (x, w) in flat.chunks_exact(dim).zip(weights) {
        for (m, xi) in mean.iter_mut().zip(x) {
            *m += w * xi;
        }
    }
    mean
}

/// Extends every particle by an unconditional path over `window`
/// (particle `i` uses stream `(seed, PREDICT, i)`). Weights are untouched.
pub fn predict(
    ensemble: WeightedEnsemble,
    model: &StateSpaceModel,
    window: TimeGrid,
    seed: u64,
) -> Result<WeightedEnsemble> {
    if window.first_index() != ensemble.step {
        return Err(Error::Domain(format!(
            "window starts at {} but the ensemble is at {}",
            window.t_start(),
            ensemble.time
        )));
    }
    let dim = ensemble.dim;
    let paths: Vec<Trajectory> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[tag::PREDICT, i as u64]);
            simulate(&model.dynamics, ensemble.particle(i), window, &mut rng)
                .map_err(|e| e.with_particle(i))
        })
        .collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(ensemble.states.len());
    for p in &paths {
        states.extend_from_slice(p.last());
    }
    Ok(WeightedEnsemble {
        dim,
        step: window.first_index() + window.n_steps(),
        time: window.t_end(),
        states,
        log_weights: ensemble.log_weights,
        norm_weights: ensemble.norm_weights,
        paths: Some(paths),
    })
}

/// Multiplies weights by `p(y | x_i)` and renormalizes.
pub fn correct_bootstrap(
    mut ensemble: WeightedEnsemble,
    model: &StateSpaceModel,
    y: &[f64],
    obs_index: usize,
) -> Result<WeightedEnsemble> {
    let obs = &model.observation;
    let loglik: Vec<f64> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| obs.log_likelihood(y, ensemble.particle(i)))
        .collect();
    for (lw, ll) in ensemble.log_weights.iter_mut().zip(&loglik) {
        *lw += ll;
    }
    ensemble.renormalize(obs_index)?;
    Ok(ensemble)
}

/// Outcome flags of an EnKF correction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnkfDiagnostics {
    /// The innovation covariance needed diagonal jitter.
    pub regularized: bool,
    pub jitter: f64,
}

/// Perturbed-observation EnKF shift, then reweighting by the likelihood at
/// the shifted particles. Perturbation `ε_i` uses stream `(seed, ENKF, i)`.
pub fn correct_enkf(
    mut ensemble: WeightedEnsemble,
    model: &StateSpaceModel,
    y: &[f64],
    seed: u64,
    obs_index: usize,
) -> Result<(WeightedEnsemble, EnkfDiagnostics)> {
    let obs = &model.observation;
    let n = ensemble.len();
    let m = obs.obs_dim();
    let predicted: Vec<Vec<f64>> = (0..n).map(|i| obs.apply(ensemble.particle(i))).collect();
    let innovations: Vec<Vec<f64>> = predicted
        .iter()
        .enumerate()
        .map(|(i, hx)| {
            let mut rng = rng::stream(seed, &[tag::ENKF, i as u64]);
            let mut eps = vec![0.0; m];
            obs.noise().sample(&mut rng, &mut eps);
            y.iter().zip(hx).zip(&eps).map(|((yi, h), e)| yi + e - h).collect()
        })
        .collect();
    let (shifts, diag) = enkf_shifts(
        ensemble.dim,
        &ensemble.states,
        &predicted,
        &innovations,
        obs.noise(),
    )?;
    for (x, s) in ensemble.states.chunks_exact_mut(ensemble.dim).zip(&shifts) {
        for (xi, si) in x.iter_mut().zip(s) {
            *xi += si;
        }
    }
    if let Some(paths) = ensemble.paths.as_mut() {
        for (p, s) in paths.iter_mut().zip(&shifts) {
            let last = p.grid().n_steps();
            for (xi, si) in p.state_mut(last).iter_mut().zip(s) {
                *xi += si;
            }
        }
    }
    if !ensemble.states.iter().all(|v| v.is_finite()) {
        return Err(Error::SimulationDiverged {
            time: ensemble.time,
            particle: None,
        });
    }
    let ensemble = correct_bootstrap(ensemble, model, y, obs_index)?;
    Ok((ensemble, diag))
}

/// Kalman shifts `K d_i` with `K = P Hᵀ (H P Hᵀ + R)⁻¹` estimated from the
/// ensemble. `predicted[i]` is `g(x_i)` and `innovations[i]` is
/// `y + ε_i − g(x_i)`.
pub fn enkf_shifts(
    dim: usize,
    states: &[f64],
    predicted: &[Vec<f64>],
    innovations: &[Vec<f64>],
    noise: &ObservationNoise,
) -> Result<(Vec<Vec<f64>>, EnkfDiagnostics)> {
    let n = predicted.len();
    let m = noise.dim();
    if n < 2 {
        return Err(Error::Domain("EnKF needs at least two members".into()));
    }
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let x_mean = weighted_mean(dim, states, &vec![1.0 / n as f64; n]);
    let mut h_mean = vec![0.0; m];
    for hx in predicted {
        for (a, b) in h_mean.iter_mut().zip(hx) {
            *a += b / n as f64;
        }
    }
    // state anomalies (dim × n) and observed anomalies (m × n)
    let a = DMatrix::from_fn(dim, n, |r, c| (states[c * dim + r] - x_mean[r]) * scale);
    let b = DMatrix::from_fn(m, n, |r, c| (predicted[c][r] - h_mean[r]) * scale);
    let d = DMatrix::from_fn(m, n, |r, c| innovations[c][r]);

    let mut diag = EnkfDiagnostics::default();
    let solved = match noise {
        ObservationNoise::Diagonal(vars) if vars.iter().all(|&v| v > 0.0) => {
            // Woodbury: (BBᵀ + R)⁻¹ = R⁻¹ − R⁻¹B (I + BᵀR⁻¹B)⁻¹ BᵀR⁻¹
            let rinv = DVector::from_iterator(m, vars.iter().map(|v| 1.0 / v));
            let rinv_b = DMatrix::from_fn(m, n, |r, c| rinv[r] * b[(r, c)]);
            let rinv_d = DMatrix::from_fn(m, n, |r, c| rinv[r] * d[(r, c)]);
            let inner = DMatrix::identity(n, n) + b.transpose() * &rinv_b;
            let chol = inner
                .cholesky()
                .ok_or_else(|| Error::Domain("EnKF inner matrix not positive definite".into()))?;
            let correction = chol.solve(&(b.transpose() * &rinv_d));
            rinv_d - rinv_b * correction
        }
        _ => {
            let s = &b * b.transpose() + noise.covariance();
            let (chol, jitter) = regularized_cholesky(s)?;
            if jitter > 0.0 {
                log::warn!("EnKF innovation covariance singular; added jitter {jitter:e}");
                diag = EnkfDiagnostics {
                    regularized: true,
                    jitter,
                };
            }
            chol.solve(&d)
        }
    };
    let shifts = a * (b.transpose() * solved);
    Ok((
        (0..n).map(|c| shifts.column(c).iter().copied().collect()).collect(),
        diag,
    ))
}

fn regularized_cholesky(s: DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    if let Some(c) = s.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let m = s.nrows();
    let base = (s.trace().abs() / m as f64).max(1e-300);
    let mut jitter = base * 1e-10;
    for _ in 0..20 {
        let shifted = &s + DMatrix::identity(m, m) * jitter;
        if let Some(c) = shifted.cholesky() {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Domain("innovation covariance could not be regularized".into()))
}

/// Systematic resampling indices for offset `u ∈ [0, 1)`: particle `i` is
/// selected once for every point `(u + j)/N` falling in its cumulative-weight
/// interval.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut i = 0;
    for j in 0..n {
        let point = (u + j as f64) / n as f64 * total;
        while i + 1 < n && cumulative + weights[i] <= point {
            cumulative += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

/// Systematic resampling; returns the new uniform-weight ensemble and the
/// ancestor index of every offspring.
pub fn resample_systematic<R: Rng + ?Sized>(
    ensemble: &WeightedEnsemble,
    rng: &mut R,
) -> (WeightedEnsemble, Vec<usize>) {
    let u: f64 = rng.random();
    let ancestors = systematic_indices(&ensemble.norm_weights, u);
    let mut states = Vec::with_capacity(ensemble.states.len());
    for &a in &ancestors {
        states.extend_from_slice(ensemble.particle(a));
    }
    let resampled = WeightedEnsemble::uniform(ensemble.dim, ensemble.step, ensemble.time, states);
    (resampled, ancestors)
}

/// Filter state after the first observation.
#[derive(Debug, Clone)]
pub struct InitialRecord {
    pub time: f64,
    pub states: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
    pub mean: Vec<f64>,
}

/// Everything the smoothers need about one window `[t_k, t_{k+1}]`.
#[derive(Debug, Clone)]
pub struct WindowSnapshot {
    /// Window index `k`.
    pub window: usize,
    pub grid: TimeGrid,
    pub proposal: Proposal,
    pub resampled: bool,
    /// Index into the previous analysis ensemble of each path's start.
    pub ancestors: Vec<usize>,
    /// Weights `w_{t_k}` carried along the paths.
    pub prior_weights: Vec<f64>,
    /// Paths from `x_{t_k}^{(i)}` to the corrected `x_{t_{k+1}}^{(i)}`.
    pub paths: Vec<Trajectory>,
    /// Corrected weights `w_{t_{k+1}}`.
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub ess: f64,
    /// Predictive mean `Σ w_{t_k} x_t` at every grid point; the last entry is
    /// the forecast mean before correction.
    pub predictive_mean: Vec<Vec<f64>>,
    pub analysis_mean: Vec<f64>,
    pub enkf: Option<EnkfDiagnostics>,
}

impl WindowSnapshot {
    pub fn n_particles(&self) -> usize {
        self.weights.len()
    }

    pub fn start(&self, i: usize) -> &[f64] {
        self.paths[i].first()
    }

    pub fn end(&self, i: usize) -> &[f64] {
        self.paths[i].last()
    }

    pub fn forecast_mean(&self) -> &[f64] {
        self.predictive_mean.last().expect("window has at least one step")
    }

    /// Filter trace: predictive mean on `[t_k, t_{k+1})`, analysis at `t_{k+1}`.
    pub fn filter_mean(&self, j: usize) -> &[f64] {
        if j == self.grid.n_steps() {
            &self.analysis_mean
        } else {
            &self.predictive_mean[j]
        }
    }
}

/// All windows of a filter run.
#[derive(Debug, Clone)]
pub struct FilterHistory {
    pub initial: InitialRecord,
    pub windows: Vec<WindowSnapshot>,
}

impl FilterHistory {
    pub fn window(&self, k: usize) -> Result<&WindowSnapshot> {
        self.windows.get(k).ok_or(Error::MissingHistory { window: k })
    }

    /// Analysis particle `i` at observation `k` (`k = 0` is the initial one).
    pub fn analysis_particle(&self, k: usize, i: usize) -> &[f64] {
        if k == 0 {
            let dim = self.initial.mean.len();
            &self.initial.states[i * dim..(i + 1) * dim]
        } else {
            self.windows[k - 1].end(i)
        }
    }

    /// Checks that every path starts at the analysis particle its ancestor
    /// index points to.
    pub fn lineage_consistent(&self) -> bool {
        self.windows.iter().all(|w| {
            w.ancestors
                .iter()
                .enumerate()
                .all(|(i, &a)| w.start(i) == self.analysis_particle(w.window, a))
        })
    }
}

/// Streaming particle filter producing one [`WindowSnapshot`] per window.
pub struct ParticleFilter<'a> {
    model: &'a StateSpaceModel,
    config: FilterConfig,
    seed: u64,
    ensemble: Option<WeightedEnsemble>,
    next_window: usize,
}

impl<'a> ParticleFilter<'a> {
    pub fn new(model: &'a StateSpaceModel, config: FilterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            seed,
            ensemble: None,
            next_window: 0,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    /// Draws the initial ensemble at `t = 0` and corrects it with the first
    /// observation when one is given.
    pub fn initialize(&mut self, init: &InitialDistribution, y0: Option<&[f64]>) -> Result<InitialRecord> {
        let dim = self.model.dim();
        if init.mean.len() != dim || init.sd.len() != dim {
            return Err(Error::Config(format!(
                "initial distribution has dimension {}, model has {dim}",
                init.mean.len()
            )));
        }
        let n = self.config.n_particles;
        let mut states = Vec::with_capacity(n * dim);
        for i in 0..n {
            let mut rng = rng::stream(self.seed, &[tag::INIT, i as u64]);
            states.extend(init.sample(&mut rng));
        }
        let mut ensemble = WeightedEnsemble::uniform(dim, 0, 0.0, states);
        if let Some(y) = y0 {
            ensemble = self.correct(ensemble, y, 0)?.0;
        }
        let record = InitialRecord {
            time: 0.0,
            states: ensemble.states.clone(),
            weights: ensemble.norm_weights.clone(),
            ess: ensemble.ess(),
            mean: ensemble.mean(),
        };
        self.ensemble = Some(ensemble);
        self.next_window = 0;
        Ok(record)
    }

    fn correct(
        &self,
        ensemble: WeightedEnsemble,
        y: &[f64],
        obs_index: usize,
    ) -> Result<(WeightedEnsemble, Option<EnkfDiagnostics>)> {
        if y.len() != self.model.observation.obs_dim() {
            return Err(Error::Domain(format!(
                "observation {obs_index} has {} values, expected {}",
                y.len(),
                self.model.observation.obs_dim()
            )));
        }
        match self.config.proposal {
            Proposal::Bootstrap => Ok((correct_bootstrap(ensemble, self.model, y, obs_index)?, None)),
            Proposal::Enkf => {
                let seed = rng::derive_seed(self.seed, &[tag::ENKF, obs_index as u64]);
                let (e, d) = correct_enkf(ensemble, self.model, y, seed, obs_index)?;
                Ok((e, Some(d)))
            }
        }
    }

    /// Runs one window and corrects with `y` (the observation at its end)
    /// when present.
    pub fn advance(&mut self, y: Option<&[f64]>) -> Result<WindowSnapshot> {
        let ensemble = self
            .ensemble
            .take()
            .ok_or_else(|| Error::Domain("filter not initialized".into()))?;
        let k = self.next_window;
        let n = ensemble.len();
        let (ensemble, ancestors, resampled) =
            if ensemble.ess() < self.config.resample_threshold * n as f64 {
                let mut rng = rng::stream(self.seed, &[tag::RESAMPLE, k as u64]);
                let (e, a) = resample_systematic(&ensemble, &mut rng);
                (e, a, true)
            } else {
                (ensemble, (0..n).collect(), false)
            };
        let prior_weights = ensemble.norm_weights.clone();
        let grid = self.model.window_grid(k);
        let predict_seed = rng::derive_seed(self.seed, &[tag::PREDICT, k as u64]);
        let predicted = predict(ensemble, self.model, grid, predict_seed)?;

        let dim = predicted.dim;
        let paths = predicted.paths.as_ref().expect("predict stores paths");
        let predictive_mean: Vec<Vec<f64>> = (0..grid.n_points())
            .map(|j| {
                let mut mean = vec![0.0; dim];
                for (p, w) in paths.iter().zip(&prior_weights) {
                    for (m, x) in mean.iter_mut().zip(p.state(j)) {
                        *m += w * x;
                    }
                }
                mean
            })
            .collect();

        let (mut corrected, enkf) = match y {
            Some(y) => self.correct(predicted, y, k + 1)?,
            None => (predicted, None),
        };
        let analysis_mean = corrected.mean();
        let paths = corrected.paths.take().expect("paths kept through correction");
        let snapshot = WindowSnapshot {
            window: k,
            grid,
            proposal: self.config.proposal,
            resampled,
            ancestors,
            prior_weights,
            paths,
            weights: corrected.norm_weights.clone(),
            log_weights: corrected.log_weights.clone(),
            ess: corrected.ess(),
            predictive_mean,
            analysis_mean,
            enkf,
        };
        self.ensemble = Some(corrected);
        self.next_window += 1;
        Ok(snapshot)
    }
}

/// Filters `observations[0..K]` (observation `k` at step `k·obs_interval`)
/// and keeps every window.
pub fn run_filter(
    model: &StateSpaceModel,
    config: &FilterConfig,
    observations: &[Vec<f64>],
    init: &InitialDistribution,
    seed: u64,
) -> Result<FilterHistory> {
    let with_gaps: Vec<Option<&[f64]>> = observations.iter().map(|y| Some(y.as_slice())).collect();
    run_filter_with_gaps(model, config, &with_gaps, init, seed)
}

/// Like [`run_filter`], with `None` marking times where no observation is
/// available (pure prediction).
pub fn run_filter_with_gaps(
    model: &StateSpaceModel,
    config: &FilterConfig,
    observations: &[Option<&[f64]>],
    init: &InitialDistribution,
    seed: u64,
) -> Result<FilterHistory> {
    let mut filter = ParticleFilter::new(model, config.clone(), seed)?;
    let Some((first, rest)) = observations.split_first() else {
        let initial = filter.initialize(init, None)?;
        return Ok(FilterHistory {
            initial,
            windows: Vec::new(),
        });
    };
    let initial = filter.initialize(init, *first)?;
    let windows = rest
        .iter()
        .map(|y| filter.advance(*y))
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterHistory { initial, windows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{
        DiffusionSpec, FnDrift, IdentityObservation, IsotropicNoise, ObservationSpec,
    };
    use std::sync::Arc;

    fn model(drift: f64, sigma: f64, obs_var: f64) -> StateSpaceModel {
        let dynamics = DiffusionSpec::new(
            Arc::new(FnDrift::new(1, move |x: &[f64], out: &mut [f64]| out[0] = drift * x[0])),
            Arc::new(IsotropicNoise { dim: 1, scale: sigma }),
        )
        .unwrap();
        let obs = ObservationSpec::new(
            Arc::new(IdentityObservation { dim: 1 }),
            ObservationNoise::diagonal(vec![obs_var]).unwrap(),
        )
        .unwrap();
        StateSpaceModel::new(dynamics, obs, 0.01, 10).unwrap()
    }

    fn ensemble(states: Vec<f64>) -> WeightedEnsemble {
        WeightedEnsemble::uniform(1, 0, 0.0, states)
    }

    #[test]
    fn prediction_without_dynamics_keeps_particles_and_weights() {
        let m = model(0.0, 0.0, 1.0);
        let mut e = ensemble(vec![0.5, -1.0, 2.0]);
        e.log_weights = vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        e.norm_weights = vec![0.2, 0.3, 0.5];
        let p = predict(e.clone(), &m, m.window_grid(0), 1).unwrap();
        assert_eq!(p.states, e.states);
        assert_eq!(p.norm_weights, e.norm_weights);
        assert_eq!(p.step, 10);
    }

    #[test]
    fn bootstrap_two_particles_by_hand() {
        let m = model(0.0, 1.0, 1.0);
        let e = correct_bootstrap(ensemble(vec![0.0, 10.0]), &m, &[0.0], 1).unwrap();
        let ratio = (-50.0f64).exp();
        assert!((e.norm_weights[0] - 1.0 / (1.0 + ratio)).abs() < 1e-15);
        assert!(e.norm_weights[1] < 1e-21);
    }

    #[test]
    fn flat_likelihood_keeps_weights() {
        let m = model(0.0, 1.0, 1e12);
        let e = correct_bootstrap(ensemble(vec![0.0, 1.0, 5.0, -3.0]), &m, &[0.3], 1).unwrap();
        assert!(e.norm_weights.iter().all(|w| (w - 0.25).abs() < 1e-6));
    }

    #[test]
    fn degenerate_likelihood_reports_observation() {
        let m = model(0.0, 1.0, 0.0);
        let err = correct_bootstrap(ensemble(vec![0.0, 1.0]), &m, &[0.5], 7).unwrap_err();
        assert!(matches!(err, Error::FilterDegenerate { obs_index: 7 }));
    }

    #[test]
    fn scalar_enkf_gain_is_p_over_p_plus_r() {
        let states = vec![0.0, 1.0, 2.0, 5.0];
        let mean = 2.0;
        let p = states.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        let r = 0.7;
        let predicted: Vec<Vec<f64>> = states.iter().map(|&x| vec![x]).collect();
        let innovations = vec![vec![1.0], vec![-2.0], vec![0.5], vec![3.0]];
        let (shifts, diag) = enkf_shifts(
            1,
            &states,
            &predicted,
            &innovations,
            &ObservationNoise::diagonal(vec![r]).unwrap(),
        )
        .unwrap();
        let gain = p / (p + r);
        for (s, d) in shifts.iter().zip(&innovations) {
            assert!((s[0] - gain * d[0]).abs() < 1e-12);
        }
        assert!(!diag.regularized);
    }

    #[test]
    fn enkf_leaves_matching_ensemble_in_place() {
        let m = model(0.0, 1.0, 1e-12);
        let (e, _) = correct_enkf(ensemble(vec![1.5; 5]), &m, &[1.5], 3, 1).unwrap();
        assert!(e.states.iter().all(|&x| (x - 1.5).abs() < 1e-9));
    }

    #[test]
    fn enkf_singular_innovation_is_regularized() {
        let states = vec![1.0; 4];
        let predicted = vec![vec![1.0]; 4];
        let innovations = vec![vec![0.0]; 4];
        let (shifts, diag) = enkf_shifts(
            1,
            &states,
            &predicted,
            &innovations,
            &ObservationNoise::diagonal(vec![0.0]).unwrap(),
        )
        .unwrap();
        assert!(diag.regularized);
        assert!(shifts.iter().all(|s| s[0] == 0.0));
    }

    #[test]
    fn systematic_one_hot() {
        let w = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(systematic_indices(&w, 0.37), vec![1, 1, 1, 1]);
        assert_eq!(systematic_indices(&[1.0, 0.0, 0.0], 0.0), vec![0, 0, 0]);
    }

    #[test]
    fn systematic_offspring_within_one_of_expectation() {
        // offspring counts of systematic resampling are floor or ceil of N·w_i
        for n in 1..=8usize {
            let weights: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let total: f64 = weights.iter().sum();
            let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
            for s in 0..200 {
                let u = s as f64 / 200.0;
                let idx = systematic_indices(&weights, u);
                assert_eq!(idx.len(), n);
                for (i, w) in weights.iter().enumerate() {
                    let count = idx.iter().filter(|&&a| a == i).count() as f64;
                    assert!((count - n as f64 * w).abs() < 1.0 + 1e-9, "n={n} u={u} i={i}");
                }
                let uniform = systematic_indices(&vec![1.0 / n as f64; n], u);
                for i in 0..n {
                    let count = uniform.iter().filter(|&&a| a == i).count();
                    assert!(count <= 2, "n={n} u={u} i={i}");
                }
            }
        }
    }

    #[test]
    fn systematic_is_unbiased() {
        let weights = [0.05, 0.4, 0.15, 0.3, 0.1];
        let n = weights.len();
        let reps = 10_000;
        let mut counts = vec![0.0; n];
        let mut rng = rng::stream(5, &[]);
        for _ in 0..reps {
            let u: f64 = rng.random();
            for a in systematic_indices(&weights, u) {
                counts[a] += 1.0;
            }
        }
        for (c, w) in counts.iter().zip(&weights) {
            let mean = c / reps as f64;
            let expected = n as f64 * w;
            // systematic counts take floor/ceil values: variance f(1-f)
            let frac = expected - expected.floor();
            let se = (frac * (1.0 - frac) / reps as f64).sqrt().max(1e-12);
            assert!((mean - expected).abs() <= 3.0 * se + 1e-12, "{mean} vs {expected}");
        }
    }

    #[test]
    fn resampling_resets_weights_and_records_ancestors() {
        let mut e = ensemble(vec![0.0, 1.0, 2.0, 3.0]);
        e.norm_weights = vec![0.0, 0.0, 1.0, 0.0];
        let (r, anc) = resample_systematic(&e, &mut rng::stream(0, &[]));
        assert_eq!(anc, vec![2, 2, 2, 2]);
        assert_eq!(r.states, vec![2.0; 4]);
        assert!(r.norm_weights.iter().all(|&w| w == 0.25));
    }

    #[test]
    fn no_observations_means_uniform_weights() {
        let m = model(-1.0, 1.0, 0.1);
        let cfg = FilterConfig {
            n_particles: 50,
            ..FilterConfig::default()
        };
        let obs: Vec<Option<&[f64]>> = vec![None; 5];
        let h = run_filter_with_gaps(&m, &cfg, &obs, &InitialDistribution::isotropic(vec![0.0], 1.0), 3)
            .unwrap();
        assert_eq!(h.windows.len(), 4);
        for w in &h.windows {
            assert!(w.weights.iter().all(|&x| (x - 0.02).abs() < 1e-15));
            assert!(!w.resampled);
        }
        let empty = run_filter(&m, &cfg, &[], &InitialDistribution::isotropic(vec![0.0], 1.0), 3).unwrap();
        assert!(empty.windows.is_empty());
    }

    #[test]
    fn history_is_lineage_consistent_and_normalized() {
        let m = model(-0.5, 1.0, 0.01);
        let cfg = FilterConfig {
            n_particles: 40,
            resample_threshold: 0.9,
            ..FilterConfig::default()
        };
        let obs: Vec<Vec<f64>> = (0..8).map(|k| vec![(k as f64 * 0.3).sin()]).collect();
        let h = run_filter(&m, &cfg, &obs, &InitialDistribution::isotropic(vec![0.0], 0.5), 21).unwrap();
        assert!(h.windows.iter().any(|w| w.resampled));
        assert!(h.lineage_consistent());
        for w in &h.windows {
            assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.ess >= 1.0 - 1e-9 && w.ess <= 40.0 + 1e-9);
        }
    }

    #[test]
    fn enkf_history_paths_end_at_shifted_states() {
        let m = model(0.0, 1.0, 0.01);
        let cfg = FilterConfig {
            n_particles: 30,
            proposal: Proposal::Enkf,
            ..FilterConfig::default()
        };
        let obs = vec![vec![0.0], vec![1.0], vec![-1.0]];
        let h = run_filter(&m, &cfg, &obs, &InitialDistribution::isotropic(vec![0.0], 0.5), 4).unwrap();
        assert!(h.lineage_consistent());
        let w = &h.windows[0];
        // the shift moves the ensemble mean towards the observation
        assert!((w.analysis_mean[0] - 1.0).abs() < (w.forecast_mean()[0] - 1.0).abs());
    }
}
