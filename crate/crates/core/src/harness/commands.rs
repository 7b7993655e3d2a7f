//! The four pipeline stages. Each reads and writes plain files in one run
//! directory:
//!
//! | stage    | writes |
//! |----------|--------|
//! | simulate | `config.json`, `truth.csv`, `observations.csv`, `fields/truth_*` |
//! | filter   | `config_filter.json`, `filter_diagnostics.csv`, `report_filter.json`, `fields/filter_*` |
//! | smooth   | `config_<m>.json`, `smoother_<m>.csv`, `support_<m>.jsonl`, `report_<m>.json`, `fields/<m>_*` |
//! | report   | `summary.json`, `summary.csv` |
//!
//! The smoother replays the filter from the stored observations; the
//! filter is deterministic given its seed, so no particle history is kept on
//! disk.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::{BuiltModel, ExperimentConfig, ModelConfig, Seeds};
use crate::harness::experiments::{run_assimilation, simulate_truth, AssimilationRun};
use crate::harness::io::{self, FieldMeta, JsonLines};
use crate::harness::report::{summarize_runs, RunReport, Summary};
use crate::smoother::{SmootherMethod, SmoothingEstimate};

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub grid: Option<usize>,
    pub particles: Option<usize>,
    pub bridges: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seeds = Seeds::from_base(seed);
        }
        if let Some(grid) = self.grid {
            match &mut cfg.model {
                ModelConfig::NavierStokes(p) if grid == 32 || grid == 64 => p.grid = grid,
                ModelConfig::NavierStokes(_) => {
                    return Err(Error::Config(format!("grid must be 32 or 64, got {grid}")))
                }
                other => {
                    return Err(Error::Config(format!("--grid does not apply to the {} model", other.name())))
                }
            }
        }
        if let Some(n) = self.particles {
            cfg.filter.n_particles = n;
        }
        if let Some(m) = self.bridges {
            cfg.smoother.bridges = m;
        }
        cfg.validate()
    }
}

/// Support cloud line in `support_<m>.jsonl`.
#[derive(Debug, Serialize)]
struct SupportRecord<'a> {
    window: usize,
    step: usize,
    time: f64,
    dim: usize,
    points: &'a [f64],
    weights: &'a [f64],
}

/// Writes the support clouds of every `stride`-th window, one JSON line per
/// cloud.
pub struct SupportWriter {
    lines: JsonLines,
    stride: usize,
}

impl SupportWriter {
    pub fn create(path: &Path, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("support window stride must be positive".into()));
        }
        Ok(Self {
            lines: JsonLines::create(path)?,
            stride,
        })
    }

    pub fn record(&mut self, est: &SmoothingEstimate) -> Result<()> {
        if !est.window.is_multiple_of(self.stride) {
            return Ok(());
        }
        for c in &est.support {
            self.lines.write(&SupportRecord {
                window: est.window,
                step: c.step,
                time: c.time,
                dim: c.dim,
                points: &c.points,
                weights: &c.weights,
            })?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        self.lines.finish()
    }
}

fn field_dims(cfg: &ExperimentConfig) -> Option<(usize, usize)> {
    cfg.model.field_grid().map(|n| (n, n))
}

fn dump_field(out: &Path, cfg: &ExperimentConfig, stem: &str, t: f64, values: &[f64]) -> Result<()> {
    if let Some((nx, ny)) = field_dims(cfg) {
        let meta = FieldMeta {
            t,
            nx,
            ny,
            quantity: "vorticity".into(),
        };
        io::write_field(&out.join("fields"), stem, &meta, values)?;
    }
    Ok(())
}

fn dump_due(cfg: &ExperimentConfig, step: usize) -> bool {
    let s = cfg.output.field_dump_stride;
    s > 0 && step.is_multiple_of(s)
}

/// Simulates the truth and observations.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let truth = simulate_truth(cfg, &model)?;
    cfg.save(&out.join("config.json"))?;
    truth.trajectory.write_csv(&out.join("truth.csv"), cfg.output.truth_stride)?;
    let ssm = &model.state_space;
    let obs_rows = truth
        .observations
        .iter()
        .enumerate()
        .map(|(k, y)| (k as f64 * ssm.dt * ssm.obs_interval as f64, y.clone()));
    io::write_state_csv(&out.join("observations.csv"), "y", ssm.observation.obs_dim(), obs_rows)?;
    for (s, x) in truth.trajectory.states().enumerate() {
        if dump_due(cfg, s) {
            dump_field(out, cfg, &format!("truth_{s:06}"), truth.trajectory.grid().time(s), x)?;
        }
    }
    Ok(())
}

/// Observations and truth (per global step, where stored) read back from a
/// simulated run directory.
pub struct StoredRun {
    pub observations: Vec<Vec<f64>>,
    pub truth: Vec<Option<Vec<f64>>>,
}

pub fn load_run(cfg: &ExperimentConfig, model: &BuiltModel, dir: &Path) -> Result<StoredRun> {
    let ssm = &model.state_space;
    let obs_path = dir.join("observations.csv");
    let table = io::read_table(&obs_path)?;
    let observations: Vec<Vec<f64>> = table
        .dense(&obs_path)?
        .into_iter()
        .map(|row| row[1..].to_vec())
        .collect();
    if let Some(bad) = observations.iter().find(|y| y.len() != ssm.observation.obs_dim()) {
        return Err(Error::parse(
            &obs_path,
            format!("{} values per observation, model expects {}", bad.len(), ssm.observation.obs_dim()),
        ));
    }
    let steps = cfg.steps()?;
    let mut truth = vec![None; steps + 1];
    let truth_path = dir.join("truth.csv");
    if truth_path.exists() {
        let table = io::read_table(&truth_path)?;
        for row in table.dense(&truth_path)? {
            let s = (row[0] / ssm.dt).round();
            if s >= 0.0 && (s as usize) <= steps && row.len() == model.dim() + 1 {
                truth[s as usize] = Some(row[1..].to_vec());
            }
        }
    }
    Ok(StoredRun { observations, truth })
}

fn save_stage_config(cfg: &ExperimentConfig, out: &Path, stage: &str) -> Result<()> {
    cfg.save(&out.join(format!("config_{stage}.json")))
}

fn write_report(out: &Path, name: &str, report: &RunReport) -> Result<()> {
    io::write_json(&out.join(format!("report_{name}.json")), report)
}

/// Runs the filter over the stored observations.
pub fn cmd_filter(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let stored = load_run(cfg, &model, out)?;
    let run = run_assimilation(cfg, &model, &stored.observations, &stored.truth, &[], &mut |_, _| Ok(()))?;
    save_stage_config(cfg, out, "filter")?;
    write_filter_trace(cfg, &model, out, &run)?;
    write_report(out, "filter", &run.report)?;
    Ok(run.report)
}

fn write_filter_trace(cfg: &ExperimentConfig, model: &BuiltModel, out: &Path, run: &AssimilationRun) -> Result<()> {
    let dt = model.state_space.dt;
    let cols = model.dim().min(cfg.output.csv_max_dims);
    let mut header = vec!["t".to_string(), "ess".to_string()];
    header.extend((0..cols).map(|i| format!("mean_{i}")));
    let rows = run.filter_mean.iter().enumerate().map(|(s, m)| {
        let mut row = vec![Some(s as f64 * dt), Some(run.filter_ess[s])];
        match m {
            Some(m) => row.extend(m[..cols].iter().map(|v| Some(*v))),
            None => row.extend(std::iter::repeat_n(None, cols)),
        }
        row
    });
    io::write_table(&out.join("filter_diagnostics.csv"), &header, rows)?;
    for (s, m) in run.filter_mean.iter().enumerate() {
        if let (true, Some(m)) = (dump_due(cfg, s), m) {
            dump_field(out, cfg, &format!("filter_{s:06}"), s as f64 * dt, m)?;
        }
    }
    Ok(())
}

/// Replays the filter and smooths every window with `method`.
pub fn cmd_smooth(cfg: &ExperimentConfig, method: SmootherMethod, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let stored = load_run(cfg, &model, out)?;
    let name = method.name();
    let support_stride = cfg.output.support_window_stride;
    let mut support = if support_stride > 0 && !cfg.smoother.support_steps.is_empty() {
        Some(SupportWriter::create(&out.join(format!("support_{name}.jsonl")), support_stride)?)
    } else {
        None
    };
    let run = run_assimilation(
        cfg,
        &model,
        &stored.observations,
        &stored.truth,
        &[method],
        &mut |_, estimates| match (support.as_mut(), estimates.first()) {
            (Some(w), Some(Some(est))) => w.record(est),
            _ => Ok(()),
        },
    )?;
    if let Some(w) = support {
        w.finish()?;
    }
    save_stage_config(cfg, out, name)?;

    let dt = model.state_space.dt;
    let trace = &run.smoothers[0];
    let cols = model.dim().min(cfg.output.csv_max_dims);
    let mut header = vec!["t".to_string()];
    header.extend((0..cols).map(|i| format!("mean_{i}")));
    header.extend((0..cols).map(|i| format!("sd_{i}")));
    let rows = trace.mean.iter().zip(&trace.sd).enumerate().map(|(s, (m, sd))| {
        let mut row = vec![Some(s as f64 * dt)];
        for v in [m, sd] {
            match v {
                Some(v) => row.extend(v[..cols].iter().map(|x| Some(*x))),
                None => row.extend(std::iter::repeat_n(None, cols)),
            }
        }
        row
    });
    io::write_table(&out.join(format!("smoother_{name}.csv")), &header, rows)?;
    for (s, m) in trace.mean.iter().enumerate() {
        if let (true, Some(m)) = (dump_due(cfg, s), m) {
            dump_field(out, cfg, &format!("{name}_{s:06}"), s as f64 * dt, m)?;
        }
    }
    write_report(out, name, &run.report)?;
    Ok(run.report)
}

/// Merges the reports of several run directories into `out`. The summary is
/// written even when some directories are unusable; it is an error only if
/// none could be read.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<Summary> {
    let summary = summarize_runs(dirs);
    io::write_json(&out.join("summary.json"), &summary)?;
    summary.write_csv(&out.join("summary.csv"))?;
    for p in &summary.problems {
        log::warn!("skipped {}: {}", p.path.display(), p.reason);
    }
    if summary.rows.is_empty() {
        return Err(Error::Config("no readable run reports".into()));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn small_sine() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::sine_default();
        cfg.horizon = 1.0;
        cfg.smoother.bridges = 4;
        cfg.output.support_window_stride = 1;
        cfg
    }

    #[test]
    fn pipeline_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_sine();
        cmd_simulate(&cfg, dir.path()).unwrap();
        cmd_filter(&cfg, dir.path()).unwrap();
        for m in [SmootherMethod::Standard, SmootherMethod::Conditional] {
            cmd_smooth(&cfg, m, dir.path()).unwrap();
        }
        for f in [
            "config.json",
            "truth.csv",
            "observations.csv",
            "filter_diagnostics.csv",
            "report_filter.json",
            "smoother_standard.csv",
            "smoother_conditional.csv",
            "support_conditional.jsonl",
            "report_conditional.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let truth = io::read_table(&dir.path().join("truth.csv")).unwrap();
        assert_eq!(truth.rows.len(), 201);
        let obs = io::read_table(&dir.path().join("observations.csv")).unwrap();
        assert_eq!(obs.rows.len(), 11);
        let support = fs::read_to_string(dir.path().join("support_conditional.jsonl")).unwrap();
        assert_eq!(support.lines().count(), 10);

        let summary = cmd_report(&[dir.path().to_path_buf(), dir.path().join("missing")], dir.path()).unwrap();
        assert_eq!(summary.problems.len(), 1);
        assert_eq!(summary.rows.len(), 1 + 2 + 2);
    }

    #[test]
    fn filter_replay_matches_in_memory_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_sine();
        cmd_simulate(&cfg, dir.path()).unwrap();
        let from_disk = cmd_filter(&cfg, dir.path()).unwrap();
        let (_, run) =
            crate::harness::experiments::run_twin_experiment(&cfg, &[], &mut |_, _| Ok(())).unwrap();
        assert_eq!(from_disk, run.report);
    }

    #[test]
    fn one_run_summary_echoes_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_sine();
        cmd_simulate(&cfg, dir.path()).unwrap();
        let report = cmd_smooth(&cfg, SmootherMethod::Conditional, dir.path()).unwrap();
        let summary = cmd_report(&[dir.path().to_path_buf()], dir.path()).unwrap();
        let row = summary.rows.iter().find(|r| r.method == "conditional").unwrap();
        assert_eq!(row.rmse, report.smoothers[0].trace.rmse);
        assert_eq!(row.bridges, Some(4));
    }

    #[test]
    fn overrides_validate() {
        let mut cfg = small_sine();
        let o = Overrides {
            grid: Some(64),
            ..Overrides::default()
        };
        assert!(matches!(o.apply(&mut cfg), Err(Error::Config(_))));
        let mut ns = ExperimentConfig::navier_stokes_default();
        Overrides {
            grid: Some(64),
            particles: Some(7),
            ..Overrides::default()
        }
        .apply(&mut ns)
        .unwrap();
        assert_eq!(ns.model.field_grid(), Some(64));
        assert_eq!(ns.filter.n_particles, 7);
        assert!(Overrides {
            grid: Some(48),
            ..Overrides::default()
        }
        .apply(&mut ns)
        .is_err());
    }
}
