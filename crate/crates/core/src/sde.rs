//! Diffusion and state-space model abstractions plus the Euler–Maruyama engine.
//!
//! States are plain `f64` slices. Trajectories are stored flat, one row of
//! `dim` values per grid point, so that million-step 1D runs and 4096-point
//! vorticity fields share the same code path without per-step allocation.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Uniform time grid. Grid points are computed by index multiplication,
/// `origin + (first_index + k)·dt`, never by accumulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    origin: f64,
    first_index: usize,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, dt: f64, n_steps: usize) -> Result<Self> {
        Self::validate(dt, n_steps)?;
        if !t_start.is_finite() {
            return Err(Error::Domain("grid start must be finite".into()));
        }
        Ok(Self {
            origin: t_start,
            first_index: 0,
            dt,
            n_steps,
        })
    }

    /// Sub-grid of the global grid `k·dt` covering steps
    /// `first_index ..= first_index + n_steps`.
    pub fn window(first_index: usize, n_steps: usize, dt: f64) -> Result<Self> {
        Self::validate(dt, n_steps)?;
        Ok(Self {
            origin: 0.0,
            first_index,
            dt,
            n_steps,
        })
    }

    fn validate(dt: f64, n_steps: usize) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("time step must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("time grid needs at least one step".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.origin + (self.first_index + k) as f64 * self.dt
    }

    pub fn t_start(&self) -> f64 {
        self.time(0)
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    /// Index of the first grid point on the global grid.
    pub fn first_index(&self) -> usize {
        self.first_index
    }

    pub fn duration(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    /// Time left until the end of the grid from point `k`.
    #[inline]
    pub fn remaining(&self, k: usize) -> f64 {
        (self.n_steps - k) as f64 * self.dt
    }

    /// Grid index of time `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let rel = (t - self.t_start()) / self.dt;
        let k = rel.round();
        if k < 0.0 || k > self.n_steps as f64 || (rel - k).abs() > 1e-6 {
            return None;
        }
        Some(k as usize)
    }
}

/// Drift function `f` of the diffusion.
pub trait Drift: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

/// Drift backed by a closure.
pub struct FnDrift<F> {
    dim: usize,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Drift for FnDrift<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Linear drift `f(x) = A x`.
pub struct LinearDrift {
    pub matrix: DMatrix<f64>,
}

impl Drift for LinearDrift {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.matrix, x, out);
    }
}

fn matvec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

/// A symmetric linear operator, used for `Σ⁻¹`.
pub trait LinearOperator: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);

    /// `aᵀ · Op · b`.
    fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut tmp = vec![0.0; self.dim()];
        self.apply(b, &mut tmp);
        dot(a, &tmp)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `scale · I`.
#[derive(Debug, Clone)]
pub struct ScaledIdentity {
    pub dim: usize,
    pub scale: f64,
}

impl LinearOperator for ScaledIdentity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(v) {
            *o = self.scale * x;
        }
    }

    fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        self.scale * dot(a, b)
    }
}

/// Dense symmetric operator.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        matvec(&self.0, v, out);
    }
}

/// The constant diffusion factor `σ`, applied as an operator so large models
/// never materialize it.
pub trait NoiseOperator: Send + Sync {
    fn dim(&self) -> usize;

    /// `out = σ·z`.
    fn apply_factor(&self, z: &[f64], out: &mut [f64]);

    /// Exact `Σ⁻¹` (pseudo-inverse) when it is cheap and well conditioned.
    fn precision(&self) -> Option<Arc<dyn LinearOperator>> {
        None
    }
}

/// `σ = scale · I`.
#[derive(Debug, Clone)]
pub struct IsotropicNoise {
    pub dim: usize,
    pub scale: f64,
}

impl NoiseOperator for IsotropicNoise {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply_factor(&self, z: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(z) {
            *o = self.scale * x;
        }
    }

    fn precision(&self) -> Option<Arc<dyn LinearOperator>> {
        (self.scale != 0.0).then(|| {
            Arc::new(ScaledIdentity {
                dim: self.dim,
                scale: 1.0 / (self.scale * self.scale),
            }) as Arc<dyn LinearOperator>
        })
    }
}

/// Dense factor `σ`; `Σ⁻¹` is the pseudo-inverse of `σσᵀ`.
#[derive(Debug, Clone)]
pub struct DenseNoise {
    factor: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl DenseNoise {
    pub fn new(factor: DMatrix<f64>) -> Result<Self> {
        if !factor.is_square() {
            return Err(Error::InvalidModel("noise factor must be square".into()));
        }
        let cov = &factor * factor.transpose();
        let precision = psd_pseudo_inverse(&cov, 1e-12);
        Ok(Self { factor, precision })
    }

    /// Builds `σ` as the symmetric square root of a PSD covariance `Σ`.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let root = psd_sqrt(cov)?;
        Self::new(root)
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }
}

impl NoiseOperator for DenseNoise {
    fn dim(&self) -> usize {
        self.factor.nrows()
    }

    fn apply_factor(&self, z: &[f64], out: &mut [f64]) {
        matvec(&self.factor, z, out);
    }

    fn precision(&self) -> Option<Arc<dyn LinearOperator>> {
        Some(Arc::new(DenseOperator(self.precision.clone())))
    }
}

/// Checks symmetry and non-negative spectrum.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidModel(format!("{what} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidModel(format!("{what} must be symmetric")));
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::InvalidModel(format!(
            "{what} must be positive semi-definite"
        )));
    }
    Ok(())
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_psd(m, "covariance")?;
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Moore–Penrose inverse of a symmetric PSD matrix, dropping eigenvalues
/// below `rel_tol · max`.
pub fn psd_pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let inv = eig
        .eigenvalues
        .map(|l| if max > 0.0 && l > rel_tol * max { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// `dx = f(x) dt + σ dB` with constant `σ`.
///
/// A state-dependent diffusion factor cannot be expressed: [`NoiseOperator`]
/// never sees the state.
#[derive(Clone)]
pub struct DiffusionSpec {
    dim: usize,
    drift: Arc<dyn Drift>,
    noise: Arc<dyn NoiseOperator>,
}

impl std::fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionSpec").field("dim", &self.dim).finish()
    }
}

impl DiffusionSpec {
    pub fn new(drift: Arc<dyn Drift>, noise: Arc<dyn NoiseOperator>) -> Result<Self> {
        let dim = drift.dim();
        if dim == 0 {
            return Err(Error::InvalidModel("state dimension must be positive".into()));
        }
        if noise.dim() != dim {
            return Err(Error::InvalidModel(format!(
                "noise dimension {} does not match drift dimension {dim}",
                noise.dim()
            )));
        }
        Ok(Self { dim, drift, noise })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &dyn Drift {
        self.drift.as_ref()
    }

    pub fn noise(&self) -> &dyn NoiseOperator {
        self.noise.as_ref()
    }

    pub fn precision(&self) -> Option<Arc<dyn LinearOperator>> {
        self.noise.precision()
    }

    /// Evaluates `f(x)` and rejects non-finite output.
    pub fn eval_drift(&self, x: &[f64], out: &mut [f64], time: f64) -> Result<()> {
        self.drift.eval(x, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::SimulationDiverged {
                time,
                particle: None,
            })
        }
    }
}

/// Scratch buffers for in-place stepping.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub drift: Vec<f64>,
    pub noise: Vec<f64>,
    pub z: Vec<f64>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            drift: vec![0.0; dim],
            noise: vec![0.0; dim],
            z: vec![0.0; dim],
        }
    }

    /// Fills `z` with standard normals.
    pub fn draw_normals<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for z in self.z.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
    }
}

/// One Euler–Maruyama step, `x + f(x)·dt + σ·dW`.
///
/// `dw` is the Brownian increment (distributed `N(0, dt·I)` when drawn by the
/// engine); `σ` is applied here. `time` is only used for error reporting.
pub fn euler_step(spec: &DiffusionSpec, x: &[f64], dt: f64, dw: &[f64], time: f64) -> Result<Vec<f64>> {
    let mut ws = Workspace::new(spec.dim());
    ws.z.copy_from_slice(dw);
    let mut out = x.to_vec();
    step_with_increment(spec, &mut out, dt, &mut ws, time)?;
    Ok(out)
}

/// In-place Euler step using `ws.z` as the Brownian increment.
pub(crate) fn step_with_increment(
    spec: &DiffusionSpec,
    x: &mut [f64],
    dt: f64,
    ws: &mut Workspace,
    time: f64,
) -> Result<()> {
    // a non-finite drift leaves a non-finite state, caught below
    spec.drift.eval(x, &mut ws.drift);
    spec.noise.apply_factor(&ws.z, &mut ws.noise);
    for ((xi, fi), ni) in x.iter_mut().zip(&ws.drift).zip(&ws.noise) {
        *xi += fi * dt + ni;
    }
    check_finite(x, time)
}

/// In-place Euler step drawing a fresh increment from `rng`.
pub fn step_in_place<R: Rng + ?Sized>(
    spec: &DiffusionSpec,
    x: &mut [f64],
    dt: f64,
    ws: &mut Workspace,
    rng: &mut R,
    time: f64,
) -> Result<()> {
    ws.draw_normals(rng);
    let sqrt_dt = dt.sqrt();
    ws.z.iter_mut().for_each(|z| *z *= sqrt_dt);
    step_with_increment(spec, x, dt, ws, time)
}

pub(crate) fn check_finite(x: &[f64], time: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SimulationDiverged {
            time,
            particle: None,
        })
    }
}

/// Simulates one path of the diffusion from `x0` over `grid`.
pub fn simulate<R: Rng + ?Sized>(
    spec: &DiffusionSpec,
    x0: &[f64],
    grid: TimeGrid,
    rng: &mut R,
) -> Result<Trajectory> {
    if x0.len() != spec.dim() {
        return Err(Error::Domain(format!(
            "initial state has dimension {}, expected {}",
            x0.len(),
            spec.dim()
        )));
    }
    check_finite(x0, grid.t_start())?;
    let dim = spec.dim();
    let mut data = vec![0.0; dim * grid.n_points()];
    data[..dim].copy_from_slice(x0);
    let mut ws = Workspace::new(dim);
    for k in 0..grid.n_steps() {
        let (done, rest) = data.split_at_mut((k + 1) * dim);
        let x = &mut rest[..dim];
        x.copy_from_slice(&done[k * dim..]);
        step_in_place(spec, x, grid.dt(), &mut ws, rng, grid.time(k))?;
    }
    Ok(Trajectory { grid, dim, data })
}

/// Sample path on a [`TimeGrid`], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn from_flat(grid: TimeGrid, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * grid.n_points() {
            return Err(Error::Domain(format!(
                "trajectory needs {} values, got {}",
                dim * grid.n_points(),
                data.len()
            )));
        }
        Ok(Self { grid, dim, data })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.n_points()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn state(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn state_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn first(&self) -> &[f64] {
        self.state(0)
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.grid.n_steps())
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Writes `t,x_0,...,x_{n-1}` rows, keeping every `stride`-th point.
    pub fn write_csv(&self, path: &Path, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let rows = (0..self.len())
            .step_by(stride)
            .map(|k| (self.grid.time(k), self.state(k).to_vec()));
        crate::harness::io::write_state_csv(path, "x", self.dim, rows)
    }
}

/// Observation operator `g`.
pub trait ObservationOperator: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

/// `g(x) = x`.
#[derive(Debug, Clone)]
pub struct IdentityObservation {
    pub dim: usize,
}

impl ObservationOperator for IdentityObservation {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn obs_dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
}

/// `g(x) = H x`.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    pub matrix: DMatrix<f64>,
}

impl ObservationOperator for LinearObservation {
    fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.matrix, x, out);
    }
}

/// Observation operator backed by a closure.
pub struct FnObservation<F> {
    state_dim: usize,
    obs_dim: usize,
    f: F,
}

impl<F> FnObservation<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(state_dim: usize, obs_dim: usize, f: F) -> Self {
        Self {
            state_dim,
            obs_dim,
            f,
        }
    }
}

impl<F> ObservationOperator for FnObservation<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Gaussian observation noise `N(0, R)`.
#[derive(Debug, Clone)]
pub enum ObservationNoise {
    /// Independent components with the given variances.
    Diagonal(Vec<f64>),
    /// Full covariance with its lower Cholesky factor.
    Full {
        cov: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
}

impl ObservationNoise {
    pub fn diagonal(variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidModel(
                "observation variances must be finite and non-negative".into(),
            ));
        }
        Ok(Self::Diagonal(variances))
    }

    pub fn full(cov: DMatrix<f64>) -> Result<Self> {
        check_psd(&cov, "observation covariance")?;
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| {
                Error::InvalidModel("full observation covariance must be positive definite".into())
            })?
            .l();
        Ok(Self::Full { cov, chol })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal(v) => v.len(),
            Self::Full { cov, .. } => cov.nrows(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            Self::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Self::Full { cov, .. } => cov.clone(),
        }
    }

    /// `log N(residual; 0, R)`.
    pub fn log_density(&self, residual: &[f64]) -> f64 {
        const LN_2PI: f64 = 1.837_877_066_409_345_5;
        match self {
            Self::Diagonal(vars) => residual
                .iter()
                .zip(vars)
                .map(|(r, v)| {
                    if *v > 0.0 {
                        -0.5 * (r * r / v + v.ln() + LN_2PI)
                    } else if *r == 0.0 {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .sum(),
            Self::Full { chol, .. } => {
                let r = DVector::from_column_slice(residual);
                let z = chol
                    .solve_lower_triangular(&r)
                    .expect("Cholesky factor is non-singular");
                let log_det: f64 = chol.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
                -0.5 * (z.norm_squared() + log_det + residual.len() as f64 * LN_2PI)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Self::Diagonal(vars) => {
                for (o, v) in out.iter_mut().zip(vars) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = v.sqrt() * z;
                }
            }
            Self::Full { chol, .. } => {
                let z = DVector::from_fn(out.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let e = chol * z;
                out.copy_from_slice(e.as_slice());
            }
        }
    }
}

/// `y = g(x) + γ`, `γ ~ N(0, R)`.
#[derive(Clone)]
pub struct ObservationSpec {
    operator: Arc<dyn ObservationOperator>,
    noise: ObservationNoise,
}

impl ObservationSpec {
    pub fn new(operator: Arc<dyn ObservationOperator>, noise: ObservationNoise) -> Result<Self> {
        if operator.obs_dim() != noise.dim() {
            return Err(Error::InvalidModel(format!(
                "observation operator outputs {} values but noise has dimension {}",
                operator.obs_dim(),
                noise.dim()
            )));
        }
        Ok(Self { operator, noise })
    }

    pub fn obs_dim(&self) -> usize {
        self.operator.obs_dim()
    }

    pub fn operator(&self) -> &dyn ObservationOperator {
        self.operator.as_ref()
    }

    pub fn noise(&self) -> &ObservationNoise {
        &self.noise
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_dim()];
        self.operator.apply(x, &mut out);
        out
    }

    /// `log N(y; g(x), R)`.
    pub fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        let mut residual = self.apply(x);
        for (r, yi) in residual.iter_mut().zip(y) {
            *r = yi - *r;
        }
        self.noise.log_density(&residual)
    }
}

/// Continuous-discrete state-space model: a diffusion observed every
/// `obs_interval` Euler steps of length `dt`.
#[derive(Clone)]
pub struct StateSpaceModel {
    pub dynamics: DiffusionSpec,
    pub observation: ObservationSpec,
    pub dt: f64,
    pub obs_interval: usize,
}

impl StateSpaceModel {
    pub fn new(
        dynamics: DiffusionSpec,
        observation: ObservationSpec,
        dt: f64,
        obs_interval: usize,
    ) -> Result<Self> {
        if obs_interval == 0 {
            return Err(Error::InvalidModel("observation interval must be at least one step".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidModel(format!("dt must be positive, got {dt}")));
        }
        if observation.operator.state_dim() != dynamics.dim() {
            return Err(Error::InvalidModel(format!(
                "observation operator expects dimension {}, dynamics has {}",
                observation.operator.state_dim(),
                dynamics.dim()
            )));
        }
        Ok(Self {
            dynamics,
            observation,
            dt,
            obs_interval,
        })
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    /// Grid of the `k`-th observation window `[t_k, t_{k+1}]`, with the first
    /// observation at `t = 0`.
    pub fn window_grid(&self, k: usize) -> TimeGrid {
        TimeGrid::window(k * self.obs_interval, self.obs_interval, self.dt)
            .expect("model guarantees a valid grid")
    }
}

/// Draws `g(x) + γ`.
pub fn observe<R: Rng + ?Sized>(model: &StateSpaceModel, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    check_finite(x, f64::NAN)
        .map_err(|_| Error::Domain("cannot observe a non-finite state".into()))?;
    let mut y = model.observation.apply(x);
    let mut noise = vec![0.0; y.len()];
    model.observation.noise.sample(rng, &mut noise);
    for (yi, e) in y.iter_mut().zip(&noise) {
        *yi += e;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sine_spec(sigma: f64) -> DiffusionSpec {
        DiffusionSpec::new(
            Arc::new(FnDrift::new(1, |x: &[f64], out: &mut [f64]| out[0] = x[0].sin())),
            Arc::new(IsotropicNoise { dim: 1, scale: sigma }),
        )
        .unwrap()
    }

    fn zero_spec(dim: usize, sigma: f64) -> DiffusionSpec {
        DiffusionSpec::new(
            Arc::new(FnDrift::new(dim, |_: &[f64], out: &mut [f64]| out.fill(0.0))),
            Arc::new(IsotropicNoise { dim, scale: sigma }),
        )
        .unwrap()
    }

    #[test]
    fn euler_step_zero_drift_zero_noise() {
        let spec = zero_spec(2, 1.0);
        let x = euler_step(&spec, &[1.0, 2.0], 0.1, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn euler_step_linear_decay() {
        let spec = DiffusionSpec::new(
            Arc::new(FnDrift::new(1, |x: &[f64], out: &mut [f64]| out[0] = -x[0])),
            Arc::new(IsotropicNoise { dim: 1, scale: 0.0 }),
        )
        .unwrap();
        let x = euler_step(&spec, &[1.0], 0.5, &[0.3], 0.0).unwrap();
        assert_eq!(x, vec![0.5]);
    }

    #[test]
    fn euler_step_sine_matches_scalar_arithmetic() {
        let spec = sine_spec(0.5f64.sqrt());
        let mut r = rng::stream(7, &[0]);
        let z: f64 = r.sample(StandardNormal);
        let dw = z * 0.005f64.sqrt();
        let x0 = 0.8;
        let got = euler_step(&spec, &[x0], 0.005, &[dw], 0.0).unwrap()[0];
        let expected = x0 + x0.sin() * 0.005 + 0.5f64.sqrt() * dw;
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn euler_step_reports_divergence_time() {
        let spec = DiffusionSpec::new(
            Arc::new(FnDrift::new(1, |_: &[f64], out: &mut [f64]| out[0] = f64::NAN)),
            Arc::new(IsotropicNoise { dim: 1, scale: 1.0 }),
        )
        .unwrap();
        match euler_step(&spec, &[0.0], 0.1, &[0.0], 3.5) {
            Err(Error::SimulationDiverged { time, .. }) => assert_eq!(time, 3.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn simulate_constant_without_drift_or_noise() {
        let spec = zero_spec(3, 0.0);
        let grid = TimeGrid::new(0.0, 0.1, 50).unwrap();
        let traj = simulate(&spec, &[1.0, -2.0, 0.5], grid, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(traj.len(), 51);
        assert!(traj.states().all(|s| s == [1.0, -2.0, 0.5]));
    }

    #[test]
    fn simulate_is_deterministic() {
        let spec = sine_spec(0.5f64.sqrt());
        let grid = TimeGrid::new(0.0, 0.005, 1000).unwrap();
        let a = simulate(&spec, &[0.0], grid, &mut rng::stream(9, &[1])).unwrap();
        let b = simulate(&spec, &[0.0], grid, &mut rng::stream(9, &[1])).unwrap();
        assert_eq!(a.as_flat(), b.as_flat());
    }

    #[test]
    fn grid_points_do_not_drift() {
        let grid = TimeGrid::new(0.0, 0.005, 50_000).unwrap();
        assert_eq!(grid.time(50_000), 50_000.0 * 0.005);
        assert_eq!(grid.t_end(), 250.0);
        assert_eq!(grid.time(12_345), 12_345.0 * 0.005);
        let w = TimeGrid::window(40, 20, 0.005).unwrap();
        assert_eq!(w.t_start(), 40.0 * 0.005);
        assert_eq!(w.index_of(w.time(7)), Some(7));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(TimeGrid::new(0.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 0).is_err());
    }

    fn identity_model(var: f64) -> StateSpaceModel {
        let obs = ObservationSpec::new(
            Arc::new(IdentityObservation { dim: 1 }),
            ObservationNoise::diagonal(vec![var]).unwrap(),
        )
        .unwrap();
        StateSpaceModel::new(sine_spec(1.0), obs, 0.005, 20).unwrap()
    }

    #[test]
    fn observe_noiseless_identity() {
        let model = identity_model(0.0);
        let y = observe(&model, &[1.25], &mut rng::stream(0, &[])).unwrap();
        assert_eq!(y, vec![1.25]);
    }

    #[test]
    fn observe_nonlinear_operator() {
        let obs = ObservationSpec::new(
            Arc::new(FnObservation::new(1, 1, |x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0])),
            ObservationNoise::diagonal(vec![0.0]).unwrap(),
        )
        .unwrap();
        let model = StateSpaceModel::new(sine_spec(1.0), obs, 0.1, 1).unwrap();
        assert_eq!(observe(&model, &[2.0], &mut rng::stream(0, &[])).unwrap(), vec![4.0]);
    }

    #[test]
    fn observe_noise_is_gaussian_with_given_variance() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let model = identity_model(0.01);
        let mut r = rng::stream(11, &[]);
        let mut residuals: Vec<f64> = (0..5000)
            .map(|_| observe(&model, &[0.3], &mut r).unwrap()[0] - 0.3)
            .collect();
        residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let normal = Normal::new(0.0, 0.1).unwrap();
        let n = residuals.len() as f64;
        let d = residuals
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = normal.cdf(x);
                (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov–Smirnov critical value at the 1% level
        assert!(d < 1.63 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn likelihood_depends_only_on_residual() {
        let model = identity_model(0.01);
        let a = model.observation.log_likelihood(&[1.0], &[0.9]);
        let b = model.observation.log_likelihood(&[5.0], &[4.9]);
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn full_noise_matches_diagonal_when_diagonal() {
        let diag = ObservationNoise::diagonal(vec![0.5, 2.0]).unwrap();
        let full = ObservationNoise::full(DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])))
            .unwrap();
        let r = [0.3, -1.2];
        assert!((diag.log_density(&r) - full.log_density(&r)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = DiffusionSpec::new(
            Arc::new(FnDrift::new(2, |_: &[f64], out: &mut [f64]| out.fill(0.0))),
            Arc::new(IsotropicNoise { dim: 3, scale: 1.0 }),
        );
        assert!(err.is_err());
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(DenseNoise::from_covariance(&m).is_err());
    }
}
