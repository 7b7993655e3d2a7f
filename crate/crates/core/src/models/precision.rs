//! Low-rank precision estimated from samples.
//!
//! For `M` samples stacked as the columns of `Z = U D Vᵀ` (thin SVD), the
//! inverse sample covariance is taken as `M (Z Zᵀ)⁻¹ = M U D⁻² Uᵀ`, with
//! singular values below `rel_tol · max` discarded. Directions outside the
//! retained span map to zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::sde::{LinearOperator, NoiseOperator, Workspace};

/// Default relative cutoff for singular values.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct EmpiricalPrecision {
    basis: DMatrix<f64>,
    inv_spectrum: DVector<f64>,
    samples: usize,
}

impl EmpiricalPrecision {
    /// Builds the operator from an `n × M` matrix of centered samples.
    pub fn from_samples(z: &DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        let m = z.ncols();
        if m < 2 {
            return Err(Error::Domain("empirical precision needs at least two samples".into()));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite sample".into()));
        }
        let svd = z.clone().svd(true, false);
        let u = svd.u.expect("requested U");
        let max = svd.singular_values.max();
        if max <= 0.0 {
            return Err(Error::DegeneratePrecision);
        }
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > rel_tol * max)
            .collect();
        let basis = u.select_columns(&keep);
        let inv_spectrum = DVector::from_iterator(
            keep.len(),
            keep.iter().map(|&i| 1.0 / (svd.singular_values[i] * svd.singular_values[i])),
        );
        Ok(Self {
            basis,
            inv_spectrum,
            samples: m,
        })
    }

    /// Draws `m` realizations `σz` of the noise operator and builds the
    /// precision of their covariance.
    pub fn from_noise<R: Rng + ?Sized>(
        noise: &dyn NoiseOperator,
        m: usize,
        rel_tol: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = noise.dim();
        let mut ws = Workspace::new(n);
        let mut z = DMatrix::zeros(n, m);
        for c in 0..m {
            ws.draw_normals(rng);
            noise.apply_factor(&ws.z, &mut ws.noise);
            z.column_mut(c).copy_from_slice(&ws.noise);
        }
        Self::from_samples(&z, rel_tol)
    }

    pub fn rank(&self) -> usize {
        self.inv_spectrum.len()
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn inv_spectrum(&self) -> &DVector<f64> {
        &self.inv_spectrum
    }
}

impl LinearOperator for EmpiricalPrecision {
    fn dim(&self) -> usize {
        self.basis.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let x = DVector::from_column_slice(x);
        let mut coef = self.basis.tr_mul(&x);
        coef.component_mul_assign(&self.inv_spectrum);
        coef *= self.samples as f64;
        let y = &self.basis * coef;
        out.copy_from_slice(y.as_slice());
    }

    fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        let ca = self.basis.tr_mul(&DVector::from_column_slice(a));
        let cb = self.basis.tr_mul(&DVector::from_column_slice(b));
        self.samples as f64 * ca.component_mul(&cb).dot(&self.inv_spectrum)
    }
}
