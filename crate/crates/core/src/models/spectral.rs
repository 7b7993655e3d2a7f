//! Fourier transforms and spectral derivatives on a periodic 2D grid.
//!
//! Fields are stored row-major: value `(i, j)` (x index `i`, y index `j`)
//! lives at `j * nx + i`. Derivatives drop the Nyquist mode, which has no
//! real-valued odd derivative on an even grid.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub struct Spectral2d {
    nx: usize,
    ny: usize,
    length: f64,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    /// Physical wavenumbers used in derivatives (Nyquist set to zero).
    kx: Vec<f64>,
    ky: Vec<f64>,
    /// `|k|²` including the Nyquist modes.
    k2: Vec<f64>,
    dealias: Vec<bool>,
}

impl std::fmt::Debug for Spectral2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral2d")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("length", &self.length)
            .finish()
    }
}

/// Signed integer wavenumber of FFT bin `i` out of `n`.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

impl Spectral2d {
    /// Square-cell periodic grid of `nx × ny` points on `[0, length)` along x;
    /// the y extent is `length · ny / nx`.
    pub fn new(nx: usize, ny: usize, length: f64) -> Result<Self> {
        if !nx.is_power_of_two() || !ny.is_power_of_two() || nx < 4 || ny < 4 {
            return Err(Error::InvalidModel(format!(
                "grid sides must be powers of two and at least 4, got {nx}×{ny}"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidModel(format!("domain length must be positive, got {length}")));
        }
        let mut planner = FftPlanner::new();
        let scale_x = 2.0 * std::f64::consts::PI / length;
        let ly = length * ny as f64 / nx as f64;
        let scale_y = 2.0 * std::f64::consts::PI / ly;
        let deriv = |i: usize, n: usize, s: f64| {
            let k = wavenumber(i, n);
            if n.is_multiple_of(2) && i == n / 2 {
                0.0
            } else {
                k as f64 * s
            }
        };
        let kx: Vec<f64> = (0..nx).map(|i| deriv(i, nx, scale_x)).collect();
        let ky: Vec<f64> = (0..ny).map(|j| deriv(j, ny, scale_y)).collect();
        let mut k2 = vec![0.0; nx * ny];
        let mut dealias = vec![false; nx * ny];
        for j in 0..ny {
            let wy = wavenumber(j, ny);
            for i in 0..nx {
                let wx = wavenumber(i, nx);
                let (px, py) = (wx as f64 * scale_x, wy as f64 * scale_y);
                k2[j * nx + i] = px * px + py * py;
                dealias[j * nx + i] = 3 * wx.unsigned_abs() as usize <= nx && 3 * wy.unsigned_abs() as usize <= ny;
            }
        }
        Ok(Self {
            nx,
            ny,
            length,
            fwd_x: planner.plan_fft_forward(nx),
            inv_x: planner.plan_fft_inverse(nx),
            fwd_y: planner.plan_fft_forward(ny),
            inv_y: planner.plan_fft_inverse(ny),
            kx,
            ky,
            k2,
            dealias,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.nx as f64
    }

    pub fn k2(&self) -> &[f64] {
        &self.k2
    }

    pub fn dealias_mask(&self) -> &[bool] {
        &self.dealias
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let (fx, fy) = if inverse {
            (&self.inv_x, &self.inv_y)
        } else {
            (&self.fwd_x, &self.fwd_y)
        };
        fx.process(buf);
        let mut col = vec![Complex64::default(); self.ny * self.nx];
        for j in 0..self.ny {
            for i in 0..self.nx {
                col[i * self.ny + j] = buf[j * self.nx + i];
            }
        }
        fy.process(&mut col);
        for j in 0..self.ny {
            for i in 0..self.nx {
                buf[j * self.nx + i] = col[i * self.ny + j];
            }
        }
    }

    /// Unnormalized forward transform of a real field.
    pub fn forward(&self, field: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    /// Inverse transform (normalized) keeping the real part.
    pub fn inverse(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut spec, true);
        let norm = 1.0 / self.len() as f64;
        spec.iter().map(|c| c.re * norm).collect()
    }

    /// Spectrum of `∂/∂x`.
    pub fn ddx(&self, spec: &[Complex64]) -> Vec<Complex64> {
        self.map(spec, |i, _, c| c * Complex64::new(0.0, self.kx[i]))
    }

    /// Spectrum of `∂/∂y`.
    pub fn ddy(&self, spec: &[Complex64]) -> Vec<Complex64> {
        self.map(spec, |_, j, c| c * Complex64::new(0.0, self.ky[j]))
    }

    /// Spectrum of the Laplacian.
    pub fn laplacian(&self, spec: &[Complex64]) -> Vec<Complex64> {
        self.map(spec, |i, j, c| c * -self.k2[j * self.nx + i])
    }

    /// Solves `Δψ = −ξ` with the zero mode set to zero.
    pub fn inverse_neg_laplacian(&self, spec: &[Complex64]) -> Vec<Complex64> {
        self.map(spec, |i, j, c| {
            let k2 = self.k2[j * self.nx + i];
            if k2 == 0.0 {
                Complex64::default()
            } else {
                c / k2
            }
        })
    }

    /// Zeroes the modes removed by the 2/3 rule.
    pub fn truncate(&self, spec: &mut [Complex64]) {
        for (c, &keep) in spec.iter_mut().zip(&self.dealias) {
            if !keep {
                *c = Complex64::default();
            }
        }
    }

    fn map(&self, spec: &[Complex64], f: impl Fn(usize, usize, Complex64) -> Complex64) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(spec.len());
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push(f(i, j, spec[j * self.nx + i]));
            }
        }
        out
    }

    /// Removes the mean and the Nyquist rows/columns: the part of a field
    /// that spectral first derivatives can represent.
    pub fn resolvable_part(&self, field: &[f64]) -> Vec<f64> {
        let mut spec = self.forward(field);
        for j in 0..self.ny {
            for i in 0..self.nx {
                if (i == 0 && j == 0) || i == self.nx / 2 || j == self.ny / 2 {
                    spec[j * self.nx + i] = Complex64::default();
                }
            }
        }
        self.inverse(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid() -> Spectral2d {
        Spectral2d::new(16, 8, 2.0 * PI).unwrap()
    }

    fn field(s: &Spectral2d, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let h = s.spacing();
        let mut out = Vec::with_capacity(s.len());
        for j in 0..s.ny() {
            for i in 0..s.nx() {
                out.push(f(i as f64 * h, j as f64 * h));
            }
        }
        out
    }

    #[test]
    fn round_trip() {
        let s = grid();
        let f = field(&s, |x, y| (x + 0.3).sin() * (2.0 * y).cos() + 0.7);
        let back = s.inverse(s.forward(&f));
        assert!(f.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-13));
    }

    #[test]
    fn derivatives_of_trig_fields() {
        let s = grid();
        let f = field(&s, |x, y| (3.0 * x).sin() * (2.0 * y).cos());
        let fx = s.inverse(s.ddx(&s.forward(&f)));
        let fy = s.inverse(s.ddy(&s.forward(&f)));
        let lap = s.inverse(s.laplacian(&s.forward(&f)));
        let ex = field(&s, |x, y| 3.0 * (3.0 * x).cos() * (2.0 * y).cos());
        let ey = field(&s, |x, y| -2.0 * (3.0 * x).sin() * (2.0 * y).sin());
        for k in 0..s.len() {
            assert!((fx[k] - ex[k]).abs() < 1e-12);
            assert!((fy[k] - ey[k]).abs() < 1e-12);
            assert!((lap[k] + 13.0 * f[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Spectral2d::new(12, 16, 1.0).is_err());
        assert!(Spectral2d::new(16, 16, 0.0).is_err());
    }

    #[test]
    fn dealias_keeps_two_thirds() {
        let s = Spectral2d::new(32, 32, 1.0).unwrap();
        let kept = s.dealias_mask().iter().filter(|&&k| k).count();
        assert_eq!(kept, 21 * 21);
    }
}
