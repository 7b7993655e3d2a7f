//! Fixed-lag smoothing over one observation interval `(t_k, t_{k+1}]`.
//!
//! * Standard: the filter's own paths over the window, reweighted with the
//!   corrected weights `w_{t_{k+1}}`. The support never leaves the filter's.
//! * Conditional: for each retained filter pair `(x_{t_k}^(i), x_{t_{k+1}}^(i))`,
//!   `M` bridges between the two states with self-normalized Girsanov weights
//!   `α̃^(i)(j)`; bridge `j` of pair `i` carries weight `w^(i) · α̃^(i)(j)`.
//!
//! Per-step moments are accumulated pair by pair and merged in pair order, so
//! results do not depend on thread scheduling and bridge paths never need to
//! be held for all pairs at once.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{sample_bridge_batch, BridgeConstraint};
use crate::error::{Error, Result};
use crate::filter::{FilterHistory, Proposal, WindowSnapshot};
use crate::models::precision::EmpiricalPrecision;
use crate::rng::{self, tag};
use crate::sde::{LinearOperator, StateSpaceModel, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmootherMethod {
    Standard,
    Conditional,
}

impl SmootherMethod {
    pub fn name(self) -> &'static str {
        match self {
            SmootherMethod::Standard => "standard",
            SmootherMethod::Conditional => "conditional",
        }
    }
}

impl std::str::FromStr for SmootherMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SmootherMethod::Standard),
            "conditional" => Ok(SmootherMethod::Conditional),
            other => Err(Error::Config(format!("unknown smoothing method {other:?}"))),
        }
    }
}

/// Where the Girsanov weights get `Σ⁻¹` from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PrecisionSource {
    /// The model's own precision operator.
    Exact,
    /// Pseudo-inverse of the sample covariance of `samples` fresh noise
    /// draws `σz`, rebuilt for every pair.
    Empirical { samples: usize, rel_tol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmootherConfig {
    /// Bridges per pair (`M`).
    pub bridges: usize,
    /// Pairs whose filter weight is below this are not bridged.
    pub weight_floor: f64,
    /// Keep at most this many of the heaviest pairs.
    pub max_active_pairs: Option<usize>,
    pub precision: PrecisionSource,
    /// In-window step indices whose full weighted support is kept.
    pub support_steps: Vec<usize>,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            bridges: 50,
            weight_floor: 1e-6,
            max_active_pairs: None,
            precision: PrecisionSource::Exact,
            support_steps: Vec::new(),
        }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bridges == 0 {
            return Err(Error::Config("at least one bridge per pair is required".into()));
        }
        if !(0.0..1.0).contains(&self.weight_floor) {
            return Err(Error::Config(format!(
                "weight floor must lie in [0, 1), got {}",
                self.weight_floor
            )));
        }
        if self.max_active_pairs == Some(0) {
            return Err(Error::Config("max_active_pairs must be positive".into()));
        }
        if let PrecisionSource::Empirical { samples, rel_tol } = self.precision {
            if samples < 2 {
                return Err(Error::Config("empirical precision needs at least two samples".into()));
            }
            if !(0.0..1.0).contains(&rel_tol) {
                return Err(Error::Config(format!("precision rel_tol must lie in [0, 1), got {rel_tol}")));
            }
        }
        Ok(())
    }
}

/// Weighted states at one grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportCloud {
    /// In-window step index.
    pub step: usize,
    pub time: f64,
    pub dim: usize,
    /// Row-major points.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SupportCloud {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        weighted_moments(self.dim, &self.points, &self.weights)
    }

    /// Coordinate-wise `[min, max]` over points with positive weight.
    pub fn range(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim];
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                for (r, &x) in out.iter_mut().zip(self.point(i)) {
                    r.0 = r.0.min(x);
                    r.1 = r.1.max(x);
                }
            }
        }
        out
    }
}

/// Smoothed marginals over one window.
#[derive(Debug, Clone)]
pub struct SmoothingEstimate {
    pub window: usize,
    pub method: SmootherMethod,
    pub grid: TimeGrid,
    pub dim: usize,
    /// Mean and standard deviation per in-window step `0..=n`. Step 0 is
    /// `t_k`, which belongs to the previous window's interval.
    pub mean: Vec<Vec<f64>>,
    pub sd: Vec<Vec<f64>>,
    pub support: Vec<SupportCloud>,
    /// Pairs that were bridged and kept.
    pub active_pairs: usize,
    /// Pairs below the weight floor or beyond the cap.
    pub pruned_pairs: usize,
    /// Pairs whose bridge weights were degenerate.
    pub dropped_pairs: usize,
    /// The filter used the EnKF shift, so its paths are not model paths.
    pub enkf_paths: bool,
}

impl SmoothingEstimate {
    pub fn start(&self) -> f64 {
        self.grid.t_start()
    }

    pub fn end(&self) -> f64 {
        self.grid.t_end()
    }

    pub fn cloud(&self, step: usize) -> Option<&SupportCloud> {
        self.support.iter().find(|c| c.step == step)
    }
}

/// Mean and standard deviation at time `t ∈ (t_k, t_{k+1}]`.
pub fn smoothed_moments(est: &SmoothingEstimate, t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    if !(t > est.start() - 1e-12 && t <= est.end() + 1e-9) {
        return None;
    }
    let j = ((t - est.start()) / est.grid.dt()).round() as usize;
    if j > est.grid.n_steps() {
        return None;
    }
    Some((est.mean[j].clone(), est.sd[j].clone()))
}

/// Weighted mean and per-coordinate standard deviation of a point cloud.
/// Weights need not be normalized.
pub fn weighted_moments(dim: usize, points: &[f64], weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    let mut mean = vec![0.0; dim];
    for (x, w) in points.chunks_exact(dim).zip(weights) {
        for (m, xi) in mean.iter_mut().zip(x) {
            *m += w * xi;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; dim];
    for (x, w) in points.chunks_exact(dim).zip(weights) {
        for ((v, xi), m) in var.iter_mut().zip(x).zip(&mean) {
            *v += w * (xi - m) * (xi - m);
        }
    }
    let sd = var.iter().map(|v| (v / total).max(0.0).sqrt()).collect();
    (mean, sd)
}

/// Running weighted mean and sum of squared deviations for every step of a
/// window, mergeable with Chan's pairwise update.
#[derive(Debug, Clone)]
struct WindowMoments {
    dim: usize,
    weight: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WindowMoments {
    fn empty(n_points: usize, dim: usize) -> Self {
        Self {
            dim,
            weight: 0.0,
            mean: vec![0.0; n_points * dim],
            m2: vec![0.0; n_points * dim],
        }
    }

    fn merge(&mut self, other: &WindowMoments) {
        if other.weight == 0.0 {
            return;
        }
        if self.weight == 0.0 {
            *self = other.clone();
            return;
        }
        let total = self.weight + other.weight;
        let f = other.weight / total;
        let cross = self.weight * other.weight / total;
        for ((m, s), (om, os)) in self
            .mean
            .iter_mut()
            .zip(self.m2.iter_mut())
            .zip(other.mean.iter().zip(&other.m2))
        {
            let delta = om - *m;
            *m += delta * f;
            *s += os + delta * delta * cross;
        }
        self.weight = total;
    }

    fn finish(self, n_points: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let d = self.dim;
        let mean = (0..n_points).map(|j| self.mean[j * d..(j + 1) * d].to_vec()).collect();
        let sd = (0..n_points)
            .map(|j| {
                self.m2[j * d..(j + 1) * d]
                    .iter()
                    .map(|s| (s / self.weight).max(0.0).sqrt())
                    .collect()
            })
            .collect();
        (mean, sd)
    }
}

fn check_steps(steps: &[usize], grid: &TimeGrid) -> Result<()> {
    match steps.iter().find(|&&s| s > grid.n_steps()) {
        Some(s) => Err(Error::Config(format!(
            "support step {s} outside window of {} steps",
            grid.n_steps()
        ))),
        None => Ok(()),
    }
}

/// Reweights the filter paths of one window with `w_{t_{k+1}}`.
pub fn smooth_standard_window(snap: &WindowSnapshot, support_steps: &[usize]) -> Result<SmoothingEstimate> {
    let grid = snap.grid;
    check_steps(support_steps, &grid)?;
    let dim = snap.paths.first().map(|p| p.dim()).unwrap_or(0);
    let n_points = grid.n_points();
    let mut points = vec![0.0; snap.n_particles() * dim];
    let mut mean = Vec::with_capacity(n_points);
    let mut sd = Vec::with_capacity(n_points);
    let mut support = Vec::new();
    for j in 0..n_points {
        for (i, p) in snap.paths.iter().enumerate() {
            points[i * dim..(i + 1) * dim].copy_from_slice(p.state(j));
        }
        let (m, s) = weighted_moments(dim, &points, &snap.weights);
        mean.push(m);
        sd.push(s);
        if support_steps.contains(&j) {
            support.push(SupportCloud {
                step: j,
                time: grid.time(j),
                dim,
                points: points.clone(),
                weights: snap.weights.clone(),
            });
        }
    }
    Ok(SmoothingEstimate {
        window: snap.window,
        method: SmootherMethod::Standard,
        grid,
        dim,
        mean,
        sd,
        support,
        active_pairs: snap.n_particles(),
        pruned_pairs: 0,
        dropped_pairs: 0,
        enkf_paths: snap.proposal == Proposal::Enkf,
    })
}

/// Standard smoother for window `k` of a stored history.
pub fn smooth_standard(history: &FilterHistory, k: usize, support_steps: &[usize]) -> Result<SmoothingEstimate> {
    smooth_standard_window(history.window(k)?, support_steps)
}

/// Indices of the pairs that get bridged: weight at least `floor`, heaviest
/// first, at most `cap` of them. Ties keep index order.
pub fn select_pairs(weights: &[f64], floor: f64, cap: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] >= floor && weights[i] > 0.0).collect();
    if let Some(cap) = cap {
        if idx.len() > cap {
            idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
            idx.truncate(cap);
            idx.sort_unstable();
        }
    }
    idx
}

struct PairResult {
    moments: WindowMoments,
    clouds: Vec<(Vec<f64>, Vec<f64>)>,
}

fn precision_for_pair(
    model: &StateSpaceModel,
    source: PrecisionSource,
    seed: u64,
) -> Result<std::sync::Arc<dyn LinearOperator>> {
    match source {
        PrecisionSource::Exact => model.dynamics.precision().ok_or_else(|| {
            Error::PrecisionUnavailable("the model noise has no exact precision operator".into())
        }),
        PrecisionSource::Empirical { samples, rel_tol } => {
            let mut rng = rng::stream(seed, &[tag::PRECISION]);
            let p = EmpiricalPrecision::from_noise(model.dynamics.noise(), samples, rel_tol, &mut rng)?;
            Ok(std::sync::Arc::new(p))
        }
    }
}

fn bridge_pair(
    model: &StateSpaceModel,
    snap: &WindowSnapshot,
    config: &SmootherConfig,
    i: usize,
    seed: u64,
) -> Result<PairResult> {
    let pair_seed = rng::derive_seed(seed, &[i as u64]);
    let precision = precision_for_pair(model, config.precision, pair_seed)?;
    let c = BridgeConstraint::new(snap.start(i).to_vec(), snap.end(i).to_vec(), snap.grid)?;
    let batch = sample_bridge_batch(&model.dynamics, &c, config.bridges, pair_seed, precision.as_ref())?;
    let dim = c.dim();
    let n_points = snap.grid.n_points();
    let w = snap.weights[i];
    let mut moments = WindowMoments::empty(n_points, dim);
    moments.weight = w;
    for j in 0..n_points {
        let mean = &mut moments.mean[j * dim..(j + 1) * dim];
        for (traj, a) in batch.trajectories.iter().zip(&batch.norm_weights) {
            for (m, x) in mean.iter_mut().zip(traj.state(j)) {
                *m += a * x;
            }
        }
        let m2 = &mut moments.m2[j * dim..(j + 1) * dim];
        for (traj, a) in batch.trajectories.iter().zip(&batch.norm_weights) {
            for ((s, x), m) in m2.iter_mut().zip(traj.state(j)).zip(mean.iter()) {
                *s += w * a * (x - m) * (x - m);
            }
        }
    }
    let clouds = config
        .support_steps
        .iter()
        .map(|&j| {
            let mut pts = Vec::with_capacity(batch.len() * dim);
            for traj in &batch.trajectories {
                pts.extend_from_slice(traj.state(j));
            }
            let ws = batch.norm_weights.iter().map(|a| w * a).collect();
            (pts, ws)
        })
        .collect();
    Ok(PairResult { moments, clouds })
}

/// Conditional smoother for one window. Bridges of pair `i` draw from seeds
/// derived from `(seed, i)`.
pub fn smooth_conditional_window(
    snap: &WindowSnapshot,
    model: &StateSpaceModel,
    config: &SmootherConfig,
    seed: u64,
) -> Result<SmoothingEstimate> {
    config.validate()?;
    let grid = snap.grid;
    check_steps(&config.support_steps, &grid)?;
    let selected = select_pairs(&snap.weights, config.weight_floor, config.max_active_pairs);
    if selected.is_empty() {
        return Err(Error::SmootherFailed { window: snap.window });
    }
    let results: Vec<(usize, Result<PairResult>)> = selected
        .par_iter()
        .map(|&i| (i, bridge_pair(model, snap, config, i, seed)))
        .collect();

    let dim = model.dim();
    let n_points = grid.n_points();
    let mut total = WindowMoments::empty(n_points, dim);
    let mut clouds: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); config.support_steps.len()];
    let mut active = 0;
    let mut degenerate = 0;
    for (i, r) in results {
        match r {
            Ok(pair) => {
                total.merge(&pair.moments);
                for (acc, (pts, ws)) in clouds.iter_mut().zip(pair.clouds) {
                    acc.0.extend(pts);
                    acc.1.extend(ws);
                }
                active += 1;
            }
            Err(Error::DegenerateBatch) => {
                log::warn!("window {}: bridge weights of pair {i} degenerate; pair dropped", snap.window);
                degenerate += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if active == 0 || total.weight <= 0.0 {
        return Err(Error::SmootherFailed { window: snap.window });
    }
    let weight_sum = total.weight;
    let (mean, sd) = total.finish(n_points);
    let support = config
        .support_steps
        .iter()
        .zip(clouds)
        .map(|(&step, (points, weights))| SupportCloud {
            step,
            time: grid.time(step),
            dim,
            points,
            weights: weights.iter().map(|w| w / weight_sum).collect(),
        })
        .collect();
    Ok(SmoothingEstimate {
        window: snap.window,
        method: SmootherMethod::Conditional,
        grid,
        dim,
        mean,
        sd,
        support,
        active_pairs: active,
        pruned_pairs: snap.n_particles() - selected.len(),
        dropped_pairs: degenerate,
        enkf_paths: snap.proposal == Proposal::Enkf,
    })
}

/// Conditional smoother for window `k` of a stored history.
pub fn smooth_conditional(
    history: &FilterHistory,
    k: usize,
    model: &StateSpaceModel,
    config: &SmootherConfig,
    seed: u64,
) -> Result<SmoothingEstimate> {
    let window_seed = rng::derive_seed(seed, &[tag::BRIDGE, k as u64]);
    smooth_conditional_window(history.window(k)?, model, config, window_seed)
}

/// Smooths every window of a history in order. A failing window yields its
/// error and the remaining windows are still processed.
pub fn run_fixed_lag(
    history: &FilterHistory,
    model: &StateSpaceModel,
    method: SmootherMethod,
    config: &SmootherConfig,
    seed: u64,
) -> Vec<Result<SmoothingEstimate>> {
    (0..history.windows.len())
        .map(|k| match method {
            SmootherMethod::Standard => smooth_standard(history, k, &config.support_steps),
            SmootherMethod::Conditional => smooth_conditional(history, k, model, config, seed),
        })
        .collect()
}

/// Smooths one freshly produced window; used by streaming drivers that do not
/// keep the whole history.
pub fn smooth_window(
    snap: &WindowSnapshot,
    model: &StateSpaceModel,
    method: SmootherMethod,
    config: &SmootherConfig,
    seed: u64,
) -> Result<SmoothingEstimate> {
    match method {
        SmootherMethod::Standard => smooth_standard_window(snap, &config.support_steps),
        SmootherMethod::Conditional => {
            let window_seed = rng::derive_seed(seed, &[tag::BRIDGE, snap.window as u64]);
            smooth_conditional_window(snap, model, config, window_seed)
        }
    }
}
