//! Diffusion bridges: paths of `dx = f(x) dt + σ dB` pinned at both ends.
//!
//! Bridges are simulated from the auxiliary process
//!
//! ```text
//! dx̃ = ( f(x̃) − (x̃ − v)/(T − t) ) dt + σ dB,    x̃(0) = u,
//! ```
//!
//! whose paths reach `v` at `T`. The law of the true conditioned diffusion is
//! recovered with the Girsanov weight
//!
//! ```text
//! log α(x̃) = −∫₀ᵀ (x̃(t) − v)ᵀ Σ⁻¹ f(x̃(t)) / (T − t) dt,
//! ```
//!
//! approximated by a left-endpoint Riemann sum over `t_0 .. t_{n−1}`, which
//! never evaluates the singular point `t = T`. The last Euler step is replaced
//! by the assignment `x̃(T) := v`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::sde::{check_finite, DiffusionSpec, LinearOperator, TimeGrid, Trajectory, Workspace};
use crate::weights::normalize_log_weights;

/// Endpoint constraints `x(0) = u`, `x(T) = v` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeConstraint {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub grid: TimeGrid,
}

impl BridgeConstraint {
    pub fn new(u: Vec<f64>, v: Vec<f64>, grid: TimeGrid) -> Result<Self> {
        if u.len() != v.len() {
            return Err(Error::Domain("bridge endpoints differ in dimension".into()));
        }
        if !u.iter().chain(&v).all(|x| x.is_finite()) {
            return Err(Error::Domain("bridge endpoints must be finite".into()));
        }
        Ok(Self { u, v, grid })
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }
}

/// `f(x) − (x − v)/(T − t)`.
pub fn bridge_drift(spec: &DiffusionSpec, x: &[f64], t: f64, v: &[f64], horizon: f64) -> Result<Vec<f64>> {
    let remaining = horizon - t;
    if !(remaining > 0.0) {
        return Err(Error::Domain(format!(
            "bridge drift undefined at t = {t} for horizon T = {horizon}"
        )));
    }
    let mut out = vec![0.0; spec.dim()];
    spec.eval_drift(x, &mut out, t)?;
    for ((o, xi), vi) in out.iter_mut().zip(x).zip(v) {
        *o -= (xi - vi) / remaining;
    }
    Ok(out)
}

/// Simulates one bridge path. The final state equals `c.v` bitwise.
pub fn simulate_bridge<R: rand::Rng + ?Sized>(
    spec: &DiffusionSpec,
    c: &BridgeConstraint,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut ws = Workspace::new(spec.dim());
    simulate_weighted(spec, c, rng, None, &mut ws).map(|(traj, _)| traj)
}

fn validate(spec: &DiffusionSpec, c: &BridgeConstraint) -> Result<()> {
    if c.dim() != spec.dim() {
        return Err(Error::Domain(format!(
            "bridge endpoints have dimension {}, model has {}",
            c.dim(),
            spec.dim()
        )));
    }
    if c.grid.n_steps() < 2 {
        return Err(Error::Domain("bridge grid needs at least two steps".into()));
    }
    Ok(())
}

/// Euler simulation of the auxiliary process, accumulating the Girsanov
/// log-weight on the fly when a precision operator is supplied.
fn simulate_weighted<R: rand::Rng + ?Sized>(
    spec: &DiffusionSpec,
    c: &BridgeConstraint,
    rng: &mut R,
    precision: Option<&dyn LinearOperator>,
    ws: &mut Workspace,
) -> Result<(Trajectory, f64)> {
    validate(spec, c)?;
    let dim = spec.dim();
    let grid = c.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut data = Vec::with_capacity(dim * grid.n_points());
    data.extend_from_slice(&c.u);
    let mut x = c.u.clone();
    let mut diff = vec![0.0; dim];
    let mut log_weight = 0.0;

    for k in 0..n {
        let t = grid.time(k);
        let remaining = grid.remaining(k);
        spec.eval_drift(&x, &mut ws.drift, t)?;
        for ((d, xi), vi) in diff.iter_mut().zip(&x).zip(&c.v) {
            *d = xi - vi;
        }
        if let Some(p) = precision {
            log_weight -= p.bilinear(&diff, &ws.drift) / remaining * dt;
        }
        if k + 1 == n {
            break;
        }
        ws.draw_normals(rng);
        ws.z.iter_mut().for_each(|z| *z *= sqrt_dt);
        spec.noise().apply_factor(&ws.z, &mut ws.noise);
        for i in 0..dim {
            x[i] += (ws.drift[i] - diff[i] / remaining) * dt + ws.noise[i];
        }
        check_finite(&x, grid.time(k + 1))?;
        data.extend_from_slice(&x);
    }
    data.extend_from_slice(&c.v);
    Ok((Trajectory::from_flat(grid, dim, data)?, log_weight))
}

/// Left-endpoint Riemann approximation of `log α` for a path ending at `v`.
pub fn girsanov_log_weight(
    spec: &DiffusionSpec,
    traj: &Trajectory,
    v: &[f64],
    precision: &dyn LinearOperator,
) -> Result<f64> {
    check_precision(spec, precision)?;
    let grid = traj.grid();
    let mut drift = vec![0.0; spec.dim()];
    let mut diff = vec![0.0; spec.dim()];
    let mut log_weight = 0.0;
    for k in 0..grid.n_steps() {
        let x = traj.state(k);
        spec.eval_drift(x, &mut drift, grid.time(k))?;
        for ((d, xi), vi) in diff.iter_mut().zip(x).zip(v) {
            *d = xi - vi;
        }
        log_weight -= precision.bilinear(&diff, &drift) / grid.remaining(k) * grid.dt();
    }
    Ok(log_weight)
}

fn check_precision(spec: &DiffusionSpec, precision: &dyn LinearOperator) -> Result<()> {
    if precision.dim() != spec.dim() {
        return Err(Error::PrecisionUnavailable(format!(
            "precision operator has dimension {}, model has {}",
            precision.dim(),
            spec.dim()
        )));
    }
    Ok(())
}

/// `M` weighted bridges for one constraint.
#[derive(Debug, Clone)]
pub struct BridgeBatch {
    pub constraint: BridgeConstraint,
    pub trajectories: Vec<Trajectory>,
    pub log_weights: Vec<f64>,
    pub norm_weights: Vec<f64>,
}

impl BridgeBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Weighted mean of the bridges at grid index `k`.
    pub fn mean_at(&self, k: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.constraint.dim()];
        for (traj, w) in self.trajectories.iter().zip(&self.norm_weights) {
            for (m, x) in mean.iter_mut().zip(traj.state(k)) {
                *m += w * x;
            }
        }
        mean
    }
}

/// Samples `m` independent bridges (bridge `j` uses the stream
/// `(seed, BRIDGE, j)`) and self-normalizes their Girsanov weights.
pub fn sample_bridge_batch(
    spec: &DiffusionSpec,
    c: &BridgeConstraint,
    m: usize,
    seed: u64,
    precision: &dyn LinearOperator,
) -> Result<BridgeBatch> {
    if m == 0 {
        return Err(Error::Domain("bridge batch needs at least one trajectory".into()));
    }
    validate(spec, c)?;
    check_precision(spec, precision)?;
    let results: Vec<Result<(Trajectory, f64)>> = (0..m)
        .into_par_iter()
        .map_init(
            || Workspace::new(spec.dim()),
            |ws, j| {
                let mut rng = rng::stream(seed, &[tag::BRIDGE, j as u64]);
                simulate_weighted(spec, c, &mut rng, Some(precision), ws)
            },
        )
        .collect();
    let mut trajectories = Vec::with_capacity(m);
    let mut log_weights = Vec::with_capacity(m);
    for r in results {
        let (traj, lw) = r?;
        trajectories.push(traj);
        log_weights.push(lw);
    }
    let norm_weights = normalize_log_weights(&log_weights).map_err(|e| match e {
        Error::Domain(_) => Error::DegenerateBatch,
        other => other,
    })?;
    Ok(BridgeBatch {
        constraint: c.clone(),
        trajectories,
        log_weights,
        norm_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{FnDrift, IsotropicNoise, ScaledIdentity};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;
    use std::sync::Arc;

    fn spec_with(drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static, sigma: f64) -> DiffusionSpec {
        DiffusionSpec::new(
            Arc::new(FnDrift::new(1, drift)),
            Arc::new(IsotropicNoise { dim: 1, scale: sigma }),
        )
        .unwrap()
    }

    fn zero_drift(sigma: f64) -> DiffusionSpec {
        spec_with(|_, out| out[0] = 0.0, sigma)
    }

    fn unit_precision() -> ScaledIdentity {
        ScaledIdentity { dim: 1, scale: 1.0 }
    }

    #[test]
    fn drift_examples() {
        let zero = zero_drift(1.0);
        assert_eq!(bridge_drift(&zero, &[0.7], 0.2, &[0.7], 1.0).unwrap(), vec![0.0]);
        assert_eq!(bridge_drift(&zero, &[1.0], 0.5, &[0.0], 1.0).unwrap(), vec![-2.0]);
        let sine = spec_with(|x, out| out[0] = x[0].sin(), 1.0);
        let d = bridge_drift(&sine, &[FRAC_PI_2], 0.0, &[0.0], 1.0).unwrap()[0];
        assert!((d - (1.0 - FRAC_PI_2)).abs() < 1e-15);
    }

    #[test]
    fn drift_rejects_terminal_time() {
        let zero = zero_drift(1.0);
        assert!(matches!(
            bridge_drift(&zero, &[0.0], 1.0, &[0.0], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn noiseless_bridge_interpolates_linearly() {
        let spec = zero_drift(0.0);
        let grid = TimeGrid::new(0.0, 0.25, 4).unwrap();
        let c = BridgeConstraint::new(vec![0.0], vec![1.0], grid).unwrap();
        let traj = simulate_bridge(&spec, &c, &mut rng::stream(0, &[])).unwrap();
        let got: Vec<f64> = traj.states().map(|s| s[0]).collect();
        for (g, e) in got.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((g - e).abs() < 1e-15, "{got:?}");
        }
    }

    #[test]
    fn too_short_grid_rejected() {
        let spec = zero_drift(1.0);
        let grid = TimeGrid::new(0.0, 0.5, 1).unwrap();
        let c = BridgeConstraint::new(vec![0.0], vec![1.0], grid).unwrap();
        assert!(simulate_bridge(&spec, &c, &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn riemann_sum_by_hand() {
        // f ≡ c, x̃ piecewise constant, Σ⁻¹ = 1/σ²
        let c = 0.7;
        let sigma: f64 = 0.5;
        let spec = spec_with(move |_, out| out[0] = c, sigma);
        let grid = TimeGrid::new(0.0, 0.25, 4).unwrap();
        let states = vec![0.0, 0.4, 0.4, 1.2, 2.0];
        let traj = Trajectory::from_flat(grid, 1, states.clone()).unwrap();
        let v = 2.0;
        let prec = ScaledIdentity { dim: 1, scale: 1.0 / (sigma * sigma) };
        let got = girsanov_log_weight(&spec, &traj, &[v], &prec).unwrap();
        let mut expected = 0.0;
        for k in 0..4 {
            let remaining = (4 - k) as f64 * 0.25;
            expected -= (states[k] - v) * 4.0 * c / remaining * 0.25;
        }
        assert!((got - expected).abs() < 1e-12);
        // 1.4 + 1.12/0.75 + 1.12/0.5 + 0.56/0.25
        assert!((got - 7.373_333_333_333_333).abs() < 1e-12);
    }

    #[test]
    fn zero_drift_weight_is_one() {
        let spec = zero_drift(1.0);
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let c = BridgeConstraint::new(vec![0.3], vec![-1.0], grid).unwrap();
        let traj = simulate_bridge(&spec, &c, &mut rng::stream(3, &[])).unwrap();
        assert_eq!(girsanov_log_weight(&spec, &traj, &c.v, &unit_precision()).unwrap(), 0.0);
    }

    #[test]
    fn path_sitting_on_target_has_zero_log_weight() {
        let spec = spec_with(|x, out| out[0] = x[0].sin() + 3.0, 1.0);
        let grid = TimeGrid::new(0.0, 0.1, 5).unwrap();
        let traj = Trajectory::from_flat(grid, 1, vec![0.4; 6]).unwrap();
        assert_eq!(girsanov_log_weight(&spec, &traj, &[0.4], &unit_precision()).unwrap(), 0.0);
    }

    #[test]
    fn fused_weight_matches_standalone() {
        let spec = spec_with(|x, out| out[0] = x[0].sin(), 0.5f64.sqrt());
        let grid = TimeGrid::new(0.0, 0.005, 20).unwrap();
        let c = BridgeConstraint::new(vec![0.1], vec![0.6], grid).unwrap();
        let prec = spec.precision().unwrap();
        let batch = sample_bridge_batch(&spec, &c, 8, 5, prec.as_ref()).unwrap();
        for (traj, lw) in batch.trajectories.iter().zip(&batch.log_weights) {
            let direct = girsanov_log_weight(&spec, traj, &c.v, prec.as_ref()).unwrap();
            assert!((direct - lw).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_weights_uniform_without_drift() {
        let spec = zero_drift(1.0);
        let grid = TimeGrid::new(0.0, 0.01, 100).unwrap();
        let c = BridgeConstraint::new(vec![0.0], vec![1.0], grid).unwrap();
        let batch = sample_bridge_batch(&spec, &c, 37, 1, &unit_precision()).unwrap();
        assert!(batch.log_weights.iter().all(|&lw| lw == 0.0));
        assert!(batch.norm_weights.iter().all(|&w| (w - 1.0 / 37.0).abs() < 1e-15));
        let single = sample_bridge_batch(&spec, &c, 1, 1, &unit_precision()).unwrap();
        assert_eq!(single.norm_weights, vec![1.0]);
    }

    #[test]
    fn batch_rejects_zero_size_and_bad_precision() {
        let spec = zero_drift(1.0);
        let grid = TimeGrid::new(0.0, 0.01, 10).unwrap();
        let c = BridgeConstraint::new(vec![0.0], vec![1.0], grid).unwrap();
        assert!(sample_bridge_batch(&spec, &c, 0, 1, &unit_precision()).is_err());
        let wrong = ScaledIdentity { dim: 2, scale: 1.0 };
        assert!(matches!(
            sample_bridge_batch(&spec, &c, 3, 1, &wrong),
            Err(Error::PrecisionUnavailable(_))
        ));
    }

    #[test]
    fn brownian_bridge_midpoint_mean() {
        let spec = zero_drift(1.0);
        let grid = TimeGrid::new(0.0, 0.01, 100).unwrap();
        let (u, v) = (-0.5, 1.5);
        let c = BridgeConstraint::new(vec![u], vec![v], grid).unwrap();
        let batch = sample_bridge_batch(&spec, &c, 10_000, 17, &unit_precision()).unwrap();
        let mid: Vec<f64> = batch.trajectories.iter().map(|t| t.state(50)[0]).collect();
        let mean = mid.iter().sum::<f64>() / mid.len() as f64;
        // Brownian bridge variance at T/2 is T/4
        let se = (0.25f64 / mid.len() as f64).sqrt();
        assert!((mean - 0.5 * (u + v)).abs() < 3.0 * se, "mean {mean}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn endpoints_are_exact(u in -5.0f64..5.0, v in -5.0f64..5.0, seed in any::<u64>(), n in 2usize..40) {
            let spec = spec_with(|x, out| out[0] = x[0].sin(), 0.7);
            let grid = TimeGrid::new(0.0, 0.01, n).unwrap();
            let c = BridgeConstraint::new(vec![u], vec![v], grid).unwrap();
            let traj = simulate_bridge(&spec, &c, &mut rng::stream(seed, &[])).unwrap();
            prop_assert_eq!(traj.first()[0].to_bits(), u.to_bits());
            prop_assert_eq!(traj.last()[0].to_bits(), v.to_bits());
        }

        #[test]
        fn zero_drift_weights_equal_for_any_path(
            path in prop::collection::vec(-10.0f64..10.0, 6),
            v in -3.0f64..3.0,
        ) {
            let spec = zero_drift(0.3);
            let grid = TimeGrid::new(0.0, 0.2, 5).unwrap();
            let traj = Trajectory::from_flat(grid, 1, path).unwrap();
            let lw = girsanov_log_weight(&spec, &traj, &[v], &ScaledIdentity { dim: 1, scale: 11.1 }).unwrap();
            prop_assert_eq!(lw, 0.0);
        }
    }
}
