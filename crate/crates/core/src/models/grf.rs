//! Stationary Gaussian random fields on a periodic grid.
//!
//! The covariance between grid points at wrapped index offset `d` is
//! `η · exp(−‖d‖² / λ)`, with distances in grid units. On the torus this is a
//! circulant matrix `C = F⁻¹ diag(s) F` whose spectrum `s` is the FFT of the
//! covariance row, so `C^{1/2} z = F⁻¹(√s ⊙ F z)` turns white noise into a
//! field with covariance `C`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::spectral::Spectral2d;
use crate::sde::{LinearOperator, NoiseOperator};

/// Largest tolerated fraction of spectral mass lost to clipping.
pub const MAX_CLIPPED_MASS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    /// Marginal variance.
    pub eta: f64,
    /// Squared-distance scale, in grid units.
    pub lambda: f64,
}

impl Default for GrfSpec {
    fn default() -> Self {
        Self {
            eta: 0.01,
            lambda: 13.0,
        }
    }
}

impl GrfSpec {
    pub fn covariance(&self, dx: f64, dy: f64) -> f64 {
        self.eta * (-(dx * dx + dy * dy) / self.lambda).exp()
    }
}

/// Noise operator `σ = C^{1/2}` for a GRF covariance on a periodic grid.
#[derive(Debug, Clone)]
pub struct GaussianRandomField {
    spec: GrfSpec,
    spectral: Arc<Spectral2d>,
    spectrum: Vec<f64>,
    sqrt_spectrum: Vec<f64>,
    clipped_mass: f64,
}

impl GaussianRandomField {
    pub fn new(spec: GrfSpec, spectral: Arc<Spectral2d>) -> Result<Self> {
        if !(spec.eta > 0.0 && spec.lambda > 0.0 && spec.eta.is_finite() && spec.lambda.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "GRF needs eta > 0 and lambda > 0, got eta={} lambda={}",
                spec.eta, spec.lambda
            )));
        }
        let (nx, ny) = (spectral.nx(), spectral.ny());
        let wrap = |i: usize, n: usize| i.min(n - i) as f64;
        let mut row = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                row.push(spec.covariance(wrap(i, nx), wrap(j, ny)));
            }
        }
        let raw: Vec<f64> = spectral.forward(&row).iter().map(|c| c.re).collect();
        let total: f64 = raw.iter().map(|s| s.abs()).sum();
        let negative: f64 = raw.iter().filter(|s| **s < 0.0).map(|s| -s).sum();
        let clipped_mass = negative / total;
        if clipped_mass > MAX_CLIPPED_MASS {
            return Err(Error::InvalidModel(format!(
                "GRF covariance is not positive on this grid (clipped mass {clipped_mass:e})"
            )));
        }
        let spectrum: Vec<f64> = raw.iter().map(|s| s.max(0.0)).collect();
        let sqrt_spectrum = spectrum.iter().map(|s| s.sqrt()).collect();
        Ok(Self {
            spec,
            spectral,
            spectrum,
            sqrt_spectrum,
            clipped_mass,
        })
    }

    pub fn spec(&self) -> GrfSpec {
        self.spec
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// Fraction of spectral mass removed by clipping negative eigenvalues.
    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    fn filter(&self, x: &[f64], gain: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut spec = self.spectral.forward(x);
        for (k, c) in spec.iter_mut().enumerate() {
            *c *= gain(k);
        }
        self.spectral.inverse(spec)
    }

    /// One field realization.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.spectral.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.filter(&z, |k| self.sqrt_spectrum[k])
    }

    /// Pseudo-inverse of `C`, dropping eigenvalues below `rel_tol · max`.
    pub fn precision_operator(&self, rel_tol: f64) -> GrfPrecision {
        let max = self.spectrum.iter().cloned().fold(0.0, f64::max);
        let inv = self
            .spectrum
            .iter()
            .map(|&s| if s > rel_tol * max { 1.0 / s } else { 0.0 })
            .collect();
        GrfPrecision {
            spectral: self.spectral.clone(),
            inv_spectrum: inv,
        }
    }
}

impl NoiseOperator for GaussianRandomField {
    fn dim(&self) -> usize {
        self.spectral.len()
    }

    fn apply_factor(&self, z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.filter(z, |k| self.sqrt_spectrum[k]));
    }

    fn precision(&self) -> Option<Arc<dyn LinearOperator>> {
        Some(Arc::new(self.precision_operator(1e-8)))
    }
}

/// Spectral pseudo-inverse of a GRF covariance.
#[derive(Debug, Clone)]
pub struct GrfPrecision {
    spectral: Arc<Spectral2d>,
    inv_spectrum: Vec<f64>,
}

impl LinearOperator for GrfPrecision {
    fn dim(&self) -> usize {
        self.spectral.len()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let mut spec = self.spectral.forward(v);
        for (c, s) in spec.iter_mut().zip(&self.inv_spectrum) {
            *c *= *s;
        }
        out.copy_from_slice(&self.spectral.inverse(spec));
    }
}

/// Zero-mean random field built from Fourier modes with `1 ≤ |k|∞ ≤ max_mode`,
/// scaled to root-mean-square `rms`. Used as a smooth initial vorticity.
pub fn smooth_random_field<R: Rng + ?Sized>(
    spectral: &Spectral2d,
    max_mode: i64,
    rms: f64,
    rng: &mut R,
) -> Vec<f64> {
    let (nx, ny) = (spectral.nx(), spectral.ny());
    let white: Vec<f64> = (0..nx * ny).map(|_| rng.sample(StandardNormal)).collect();
    let mut spec = spectral.forward(&white);
    for j in 0..ny {
        for i in 0..nx {
            let (kx, ky) = (
                crate::models::spectral::wavenumber(i, nx),
                crate::models::spectral::wavenumber(j, ny),
            );
            let keep = kx.abs().max(ky.abs()) <= max_mode
                && (kx, ky) != (0, 0)
                && i != nx / 2
                && j != ny / 2;
            if !keep {
                spec[j * nx + i] = Complex64::default();
            }
        }
    }
    let mut field = spectral.inverse(spec);
    let ms = field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64;
    if ms > 0.0 {
        let s = rms / ms.sqrt();
        field.iter_mut().for_each(|v| *v *= s);
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn field_model(n: usize, spec: GrfSpec) -> GaussianRandomField {
        let s = Arc::new(Spectral2d::new(n, n, 2.0 * std::f64::consts::PI).unwrap());
        GaussianRandomField::new(spec, s).unwrap()
    }

    #[test]
    fn tiny_eta_gives_vanishing_field() {
        let g = field_model(32, GrfSpec { eta: 1e-40, lambda: 13.0 });
        let f = g.sample(&mut rng::stream(1, &[]));
        assert!(f.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_invalid_spec() {
        let s = Arc::new(Spectral2d::new(8, 8, 1.0).unwrap());
        assert!(GaussianRandomField::new(GrfSpec { eta: 0.0, lambda: 1.0 }, s.clone()).is_err());
        assert!(GaussianRandomField::new(GrfSpec { eta: 1.0, lambda: -1.0 }, s).is_err());
    }

    #[test]
    fn default_spec_clips_negligible_mass() {
        let g = field_model(32, GrfSpec::default());
        assert!(g.clipped_mass() < MAX_CLIPPED_MASS);
        assert!(g.spectrum().iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn precision_inverts_factor_squared_on_resolved_modes() {
        let g = field_model(16, GrfSpec { eta: 1.0, lambda: 4.0 });
        let p = g.precision_operator(0.0);
        let mut r = rng::stream(4, &[]);
        let x = g.sample(&mut r);
        // C x then C⁻¹ gives x back because x lies in the range of C
        let mut cx = vec![0.0; x.len()];
        let mut tmp = vec![0.0; x.len()];
        g.apply_factor(&x, &mut tmp);
        g.apply_factor(&tmp, &mut cx);
        let mut back = vec![0.0; x.len()];
        p.apply(&cx, &mut back);
        let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-6 * scale, "{err}");
    }

    #[test]
    fn smooth_field_has_requested_rms_and_zero_mean() {
        let s = Spectral2d::new(32, 32, 1.0).unwrap();
        let f = smooth_random_field(&s, 4, 0.8, &mut rng::stream(2, &[]));
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((rms - 0.8).abs() < 1e-12);
    }
}
