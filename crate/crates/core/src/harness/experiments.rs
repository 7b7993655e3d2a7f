//! Twin experiments: simulate a hidden truth, observe it, then filter and
//! smooth window by window without keeping the whole filter history.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::filter::{InitialDistribution, ParticleFilter, WindowSnapshot};
use crate::harness::config::{BuiltModel, ExperimentConfig};
use crate::harness::metrics::{discontinuity_metric, mse, rmse_of_mse};
use crate::harness::report::{RunReport, SmootherSummary, TraceSummary};
use crate::models::grf::smooth_random_field;
use crate::rng::{self, tag};
use crate::sde::{observe, simulate, TimeGrid, Trajectory};
use crate::smoother::{smooth_window, SmootherMethod, SmoothingEstimate};

/// Hidden trajectory and its observations (observation `k` at step
/// `k · obs_interval`).
#[derive(Debug, Clone)]
pub struct Truth {
    pub trajectory: Trajectory,
    pub observations: Vec<Vec<f64>>,
}

impl Truth {
    /// Truth state per global step.
    pub fn states(&self) -> Vec<Option<Vec<f64>>> {
        self.trajectory.states().map(|x| Some(x.to_vec())).collect()
    }
}

pub fn initial_truth_state(cfg: &ExperimentConfig, model: &BuiltModel) -> Result<Vec<f64>> {
    let dim = model.dim();
    if let Some(ns) = &model.ns {
        let mut r = rng::stream(cfg.seeds.truth, &[tag::TRUTH, tag::INIT]);
        return Ok(smooth_random_field(
            &ns.spectral,
            cfg.truth.field_max_mode,
            cfg.truth.field_rms,
            &mut r,
        ));
    }
    match &cfg.truth.x0 {
        Some(x0) if x0.len() == dim => Ok(x0.clone()),
        Some(x0) => Err(Error::Config(format!(
            "truth x0 has {} values, model dimension is {dim}",
            x0.len()
        ))),
        None => Ok(vec![0.0; dim]),
    }
}

pub fn simulate_truth(cfg: &ExperimentConfig, model: &BuiltModel) -> Result<Truth> {
    let ssm = &model.state_space;
    let grid = TimeGrid::new(0.0, ssm.dt, cfg.steps()?)?;
    let x0 = initial_truth_state(cfg, model)?;
    let trajectory = simulate(&ssm.dynamics, &x0, grid, &mut rng::stream(cfg.seeds.truth, &[tag::TRUTH]))?;
    let observations = (0..=cfg.windows()?)
        .map(|k| {
            let mut r = rng::stream(cfg.seeds.truth, &[tag::OBSERVATION, k as u64]);
            observe(ssm, trajectory.state(k * ssm.obs_interval), &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Truth {
        trajectory,
        observations,
    })
}

pub fn initial_distribution(
    cfg: &ExperimentConfig,
    model: &BuiltModel,
    y0: &[f64],
) -> Result<InitialDistribution> {
    let dim = model.dim();
    let mean = match &cfg.init.mean {
        Some(m) if m.len() == dim => m.clone(),
        Some(m) => {
            return Err(Error::Config(format!(
                "initial mean has {} values, model dimension is {dim}",
                m.len()
            )))
        }
        None if y0.len() == dim => y0.to_vec(),
        None => {
            return Err(Error::Config(
                "initial mean required when observations do not have the state dimension".into(),
            ))
        }
    };
    Ok(InitialDistribution::isotropic(mean, cfg.init.sd))
}

/// Mean traces of one assimilation run, indexed by global step.
#[derive(Debug, Clone)]
pub struct AssimilationRun {
    pub report: RunReport,
    /// Filter mean: predictive between observations, analysis at them.
    pub filter_mean: Vec<Option<Vec<f64>>>,
    /// ESS of the weights in effect at every step.
    pub filter_ess: Vec<f64>,
    /// One entry per requested method.
    pub smoothers: Vec<SmootherTrace>,
}

#[derive(Debug, Clone)]
pub struct SmootherTrace {
    pub method: SmootherMethod,
    pub mean: Vec<Option<Vec<f64>>>,
    pub sd: Vec<Option<Vec<f64>>>,
}

/// Called after every window with the filter snapshot and the estimates of
/// each requested method (`None` where that window failed).
pub type WindowObserver<'a> = dyn FnMut(&WindowSnapshot, &[Option<SmoothingEstimate>]) -> Result<()> + 'a;

/// Runs the filter over all observations and smooths each window with every
/// method in `methods` as soon as it is available. `truth` (per global step,
/// `None` where unknown) is only used for error metrics.
pub fn run_assimilation(
    cfg: &ExperimentConfig,
    model: &BuiltModel,
    observations: &[Vec<f64>],
    truth: &[Option<Vec<f64>>],
    methods: &[SmootherMethod],
    observer: &mut WindowObserver<'_>,
) -> Result<AssimilationRun> {
    let started = Instant::now();
    let ssm = &model.state_space;
    let windows = cfg.windows()?;
    if observations.len() != windows + 1 {
        return Err(Error::Config(format!(
            "expected {} observations, found {}",
            windows + 1,
            observations.len()
        )));
    }
    let steps = windows * ssm.obs_interval;
    let n = ssm.obs_interval;

    let mut filter = ParticleFilter::new(ssm, cfg.filter.clone(), cfg.seeds.filter)?;
    let init = initial_distribution(cfg, model, &observations[0])?;
    let initial = filter.initialize(&init, Some(&observations[0]))?;

    let mut filter_mean: Vec<Option<Vec<f64>>> = vec![None; steps + 1];
    let mut filter_ess = vec![0.0; steps + 1];
    filter_mean[0] = Some(initial.mean.clone());
    filter_ess[0] = initial.ess;
    let mut obs_ess = vec![initial.ess];
    let mut forecast_mse = Vec::with_capacity(windows);
    let mut analysis_mse = Vec::with_capacity(windows);
    let mut smoothers: Vec<SmootherTrace> = methods
        .iter()
        .map(|&method| SmootherTrace {
            method,
            mean: vec![None; steps + 1],
            sd: vec![None; steps + 1],
        })
        .collect();
    let mut failed = vec![0usize; methods.len()];
    let mut pruned = vec![0usize; methods.len()];
    let mut dropped = vec![0usize; methods.len()];
    let mut enkf_paths = false;

    for k in 0..windows {
        let snap = filter.advance(Some(&observations[k + 1]))?;
        let base = k * n;
        let prior_ess = crate::weights::ess(&snap.prior_weights);
        for j in 1..=n {
            filter_mean[base + j] = Some(snap.filter_mean(j).to_vec());
            filter_ess[base + j] = if j == n { snap.ess } else { prior_ess };
        }
        obs_ess.push(snap.ess);
        if let Some(t) = &truth[base + n] {
            forecast_mse.push(Some(mse(snap.forecast_mean(), t)));
            analysis_mse.push(Some(mse(&snap.analysis_mean, t)));
        } else {
            forecast_mse.push(None);
            analysis_mse.push(None);
        }
        enkf_paths |= snap.proposal == crate::filter::Proposal::Enkf;

        let mut estimates = Vec::with_capacity(methods.len());
        for (m, &method) in methods.iter().enumerate() {
            match smooth_window(&snap, ssm, method, &cfg.smoother, cfg.seeds.smoother) {
                Ok(est) => {
                    for j in 1..=n {
                        smoothers[m].mean[base + j] = Some(est.mean[j].clone());
                        smoothers[m].sd[base + j] = Some(est.sd[j].clone());
                    }
                    pruned[m] += est.pruned_pairs;
                    dropped[m] += est.dropped_pairs;
                    estimates.push(Some(est));
                }
                Err(e) if e.is_numerical() => {
                    log::warn!("window {k}: {} smoother failed: {e}", method.name());
                    failed[m] += 1;
                    estimates.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        observer(&snap, &estimates)?;
    }

    let obs_steps: Vec<usize> = (1..=windows).map(|k| k * n).collect();
    let filter_summary = summarize(&filter_mean, truth, &obs_steps, n);
    let smoother_summaries = smoothers
        .iter()
        .enumerate()
        .map(|(m, tr)| {
            let summary = summarize(&tr.mean, truth, &obs_steps, n);
            let le = fraction_not_worse(&summary.mse, &filter_summary.mse, n);
            SmootherSummary {
                method: tr.method,
                bridges: (tr.method == SmootherMethod::Conditional).then_some(cfg.smoother.bridges),
                trace: summary,
                hidden_fraction_not_worse_than_filter: le,
                failed_windows: failed[m],
                pruned_pairs: pruned[m],
                dropped_pairs: dropped[m],
                enkf_paths,
            }
        })
        .collect();
    let drops: Vec<bool> = forecast_mse
        .iter()
        .zip(&analysis_mse)
        .filter_map(|(f, a)| Some(f.as_ref()? > a.as_ref()?))
        .collect();
    let filter_drop_fraction =
        (!drops.is_empty()).then(|| drops.iter().filter(|&&d| d).count() as f64 / drops.len() as f64);

    let report = RunReport {
        model: cfg.model.name().to_string(),
        proposal: cfg.filter.proposal,
        n_particles: cfg.filter.n_particles,
        windows,
        dt: ssm.dt,
        obs_stride: n,
        filter: filter_summary,
        smoothers: smoother_summaries,
        observation_ess: obs_ess,
        forecast_mse,
        analysis_mse,
        filter_drop_fraction,
        timing_seconds: cfg.output.record_timing.then(|| started.elapsed().as_secs_f64()),
    };
    Ok(AssimilationRun {
        report,
        filter_mean,
        filter_ess,
        smoothers,
    })
}

fn summarize(
    trace: &[Option<Vec<f64>>],
    truth: &[Option<Vec<f64>>],
    obs_steps: &[usize],
    stride: usize,
) -> TraceSummary {
    let errors: Vec<Option<f64>> = trace
        .iter()
        .zip(truth)
        .map(|(m, t)| Some(mse(m.as_ref()?, t.as_ref()?)))
        .collect();
    let after_start: Vec<Option<f64>> = errors.iter().skip(1).copied().collect();
    let hidden: Vec<Option<f64>> = errors
        .iter()
        .enumerate()
        .map(|(s, e)| if s % stride != 0 { *e } else { None })
        .collect();
    TraceSummary {
        rmse: rmse_of_mse(&after_start),
        hidden_rmse: rmse_of_mse(&hidden),
        jumps: discontinuity_metric(trace, obs_steps),
        mse: errors,
    }
}

/// Share of hidden steps where `a ≤ b`, among steps where both are defined.
fn fraction_not_worse(a: &[Option<f64>], b: &[Option<f64>], stride: usize) -> Option<f64> {
    let pairs: Vec<bool> = a
        .iter()
        .zip(b)
        .enumerate()
        .filter(|(s, _)| s % stride != 0)
        .filter_map(|(_, (x, y))| Some(x.as_ref()? <= y.as_ref()?))
        .collect();
    (!pairs.is_empty()).then(|| pairs.iter().filter(|&&p| p).count() as f64 / pairs.len() as f64)
}

/// Simulates the truth and runs filter and smoothers in memory.
pub fn run_twin_experiment(
    cfg: &ExperimentConfig,
    methods: &[SmootherMethod],
    observer: &mut WindowObserver<'_>,
) -> Result<(Truth, AssimilationRun)> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let truth = simulate_truth(cfg, &model)?;
    let run = run_assimilation(cfg, &model, &truth.observations, &truth.states(), methods, observer)?;
    Ok((truth, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{ModelConfig, ScalarLinearParams};
    use crate::models::sine::SineParams;

    fn small_sine() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::sine_default();
        cfg.horizon = 2.0;
        cfg.smoother.bridges = 5;
        cfg
    }

    #[test]
    fn zero_noise_observations_equal_truth() {
        let mut cfg = small_sine();
        cfg.model = ModelConfig::Sine(SineParams {
            sigma_y2: 0.0,
            ..SineParams::default()
        });
        let model = cfg.build_model().unwrap();
        let truth = simulate_truth(&cfg, &model).unwrap();
        assert_eq!(truth.observations.len(), 21);
        for (k, y) in truth.observations.iter().enumerate() {
            assert_eq!(y.as_slice(), truth.trajectory.state(k * 20));
        }
    }

    #[test]
    fn traces_cover_the_grid() {
        let cfg = small_sine();
        let mut windows = 0;
        let (_, run) = run_twin_experiment(
            &cfg,
            &[SmootherMethod::Standard, SmootherMethod::Conditional],
            &mut |_, est| {
                windows += 1;
                assert_eq!(est.len(), 2);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(windows, 20);
        assert_eq!(run.filter_mean.len(), 401);
        assert!(run.filter_mean.iter().all(|m| m.is_some()));
        for tr in &run.smoothers {
            assert!(tr.mean[0].is_none());
            assert!(tr.mean[1..].iter().all(|m| m.is_some()));
        }
        assert_eq!(run.report.observation_ess.len(), 21);
        assert_eq!(run.report.filter.jumps.jumps.len(), 20);
    }

    #[test]
    fn conditional_matches_filter_at_observation_times() {
        let mut cfg = small_sine();
        cfg.smoother.weight_floor = 0.0;
        let (_, run) = run_twin_experiment(&cfg, &[SmootherMethod::Conditional], &mut |_, _| Ok(())).unwrap();
        for s in (20..=400).step_by(20) {
            let a = run.filter_mean[s].as_ref().unwrap()[0];
            let b = run.smoothers[0].mean[s].as_ref().unwrap()[0];
            assert!((a - b).abs() < 1e-12, "step {s}: {a} vs {b}");
        }
    }

    #[test]
    fn linear_gaussian_runs() {
        let cfg = ExperimentConfig {
            model: ModelConfig::LinearGaussian(ScalarLinearParams::default()),
            horizon: 1.0,
            ..small_sine()
        };
        let (_, run) = run_twin_experiment(&cfg, &[SmootherMethod::Conditional], &mut |_, _| Ok(())).unwrap();
        assert_eq!(run.report.windows, 5);
    }
}
