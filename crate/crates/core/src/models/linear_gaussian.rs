//! Linear-Gaussian diffusion `dx = A x dt + σ dB`, `y = H x + γ`, with an
//! exact Kalman filter and Rauch–Tung–Striebel smoother for its Euler
//! discretization `x_{k+1} = (I + A dt) x_k + w_k`, `w_k ~ N(0, Σ dt)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sde::{
    check_psd, psd_pseudo_inverse, DenseNoise, DiffusionSpec, LinearDrift, LinearObservation,
    ObservationNoise, ObservationSpec, StateSpaceModel,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// Diffusion covariance `Σ = σσᵀ` per unit time.
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub dt: f64,
    pub stride: usize,
}

impl LinearGaussian {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        dt: f64,
        stride: usize,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || q.shape() != (n, n) || h.ncols() != n || r.shape() != (h.nrows(), h.nrows()) {
            return Err(Error::InvalidModel("inconsistent linear-Gaussian dimensions".into()));
        }
        check_psd(&q, "diffusion covariance")?;
        check_psd(&r, "observation covariance")?;
        Ok(Self { a, h, q, r, dt, stride })
    }

    /// Scalar model `dx = a x dt + √q dB`, `y = x + γ`, `γ ~ N(0, r)`.
    pub fn scalar(a: f64, q: f64, r: f64, dt: f64, stride: usize) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(1.0), m(q), m(r), dt, stride)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn transition(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) + &self.a * self.dt
    }

    pub fn model(&self) -> Result<StateSpaceModel> {
        let dynamics = DiffusionSpec::new(
            Arc::new(LinearDrift { matrix: self.a.clone() }),
            Arc::new(DenseNoise::from_covariance(&self.q)?),
        )?;
        let off_diagonal = (0..self.r.nrows())
            .any(|i| (0..self.r.ncols()).any(|j| i != j && self.r[(i, j)] != 0.0));
        let noise = if off_diagonal {
            ObservationNoise::full(self.r.clone())?
        } else {
            ObservationNoise::diagonal(self.r.diagonal().iter().copied().collect())?
        };
        let obs = ObservationSpec::new(Arc::new(LinearObservation { matrix: self.h.clone() }), noise)?;
        StateSpaceModel::new(dynamics, obs, self.dt, self.stride)
    }
}

/// Builds the state-space model of a linear-Gaussian diffusion.
pub fn make_linear_gaussian(
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    dt: f64,
    stride: usize,
) -> Result<StateSpaceModel> {
    LinearGaussian::new(a, h, q, r, dt, stride)?.model()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMarginal {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Exact marginals at every grid step `0..=(K−1)·stride`.
#[derive(Debug, Clone)]
pub struct OracleOutput {
    pub stride: usize,
    /// Before the update at that step.
    pub predicted: Vec<GaussianMarginal>,
    /// After the update (equal to `predicted` between observations).
    pub filtered: Vec<GaussianMarginal>,
    pub smoothed: Vec<GaussianMarginal>,
}

impl OracleOutput {
    pub fn filtered_at_observation(&self, k: usize) -> &GaussianMarginal {
        &self.filtered[k * self.stride]
    }
}

fn inverse_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    match m.clone().cholesky() {
        Some(c) => c.inverse(),
        None => psd_pseudo_inverse(m, 1e-14),
    }
}

/// Kalman filter and RTS smoother from the prior `N(m0, p0)` at `t = 0`,
/// with observation `k` at step `k · stride`.
pub fn kalman_rts_oracle(
    lg: &LinearGaussian,
    observations: &[Vec<f64>],
    m0: &[f64],
    p0: &DMatrix<f64>,
) -> Result<OracleOutput> {
    let n = lg.dim();
    if observations.is_empty() {
        return Err(Error::Domain("the oracle needs at least one observation".into()));
    }
    if m0.len() != n || p0.shape() != (n, n) {
        return Err(Error::Domain("prior has the wrong dimension".into()));
    }
    check_psd(p0, "prior covariance")?;
    let f = lg.transition();
    let qd = &lg.q * lg.dt;
    let steps = (observations.len() - 1) * lg.stride;
    let mut predicted = Vec::with_capacity(steps + 1);
    let mut filtered = Vec::with_capacity(steps + 1);
    let mut m = DVector::from_column_slice(m0);
    let mut p = p0.clone();
    for step in 0..=steps {
        if step > 0 {
            m = &f * &m;
            p = &f * &p * f.transpose() + &qd;
        }
        predicted.push(GaussianMarginal {
            mean: m.clone(),
            cov: p.clone(),
        });
        if step % lg.stride == 0 {
            let y = DVector::from_column_slice(&observations[step / lg.stride]);
            let s = &lg.h * &p * lg.h.transpose() + &lg.r;
            let k = &p * lg.h.transpose() * inverse_psd(&s);
            m = &m + &k * (y - &lg.h * &m);
            let ikh = DMatrix::identity(n, n) - &k * &lg.h;
            p = &ikh * &p * ikh.transpose() + &k * &lg.r * k.transpose();
        }
        filtered.push(GaussianMarginal {
            mean: m.clone(),
            cov: p.clone(),
        });
    }
    let mut smoothed = filtered.clone();
    for step in (0..steps).rev() {
        let pf = &filtered[step].cov;
        let pp = &predicted[step + 1].cov;
        let g = pf * f.transpose() * inverse_psd(pp);
        let mean = &filtered[step].mean + &g * (&smoothed[step + 1].mean - &predicted[step + 1].mean);
        let cov = pf + &g * (&smoothed[step + 1].cov - pp) * g.transpose();
        smoothed[step] = GaussianMarginal { mean, cov };
    }
    Ok(OracleOutput {
        stride: lg.stride,
        predicted,
        filtered,
        smoothed,
    })
}

/// Exact fixed-lag marginals `p(x_t | y_{0..=k+1})` on window `k`.
pub fn fixed_lag_window(
    lg: &LinearGaussian,
    observations: &[Vec<f64>],
    m0: &[f64],
    p0: &DMatrix<f64>,
    k: usize,
) -> Result<Vec<GaussianMarginal>> {
    if k + 2 > observations.len() {
        return Err(Error::MissingHistory { window: k });
    }
    let out = kalman_rts_oracle(lg, &observations[..k + 2], m0, p0)?;
    Ok(out.smoothed[k * lg.stride..=(k + 1) * lg.stride].to_vec())
}
