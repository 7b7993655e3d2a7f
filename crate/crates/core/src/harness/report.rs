//! Run reports and the merged summary over several run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Proposal;
use crate::harness::io;
use crate::harness::metrics::Jumps;
use crate::smoother::SmootherMethod;

/// Error summary of one mean trace against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    /// Over all steps after the initial one.
    pub rmse: Option<f64>,
    /// Over steps strictly between observations.
    pub hidden_rmse: Option<f64>,
    pub jumps: Jumps,
    /// MSE per global step, `None` where the trace or truth is undefined.
    pub mse: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherSummary {
    pub method: SmootherMethod,
    pub bridges: Option<usize>,
    pub trace: TraceSummary,
    /// Share of hidden steps where the smoother MSE is at most the filter's.
    pub hidden_fraction_not_worse_than_filter: Option<f64>,
    pub failed_windows: usize,
    /// Pairs skipped by the weight floor or the active-pair cap.
    pub pruned_pairs: usize,
    /// Pairs whose bridge batch was degenerate.
    pub dropped_pairs: usize,
    /// Whether the smoothed paths came from EnKF-shifted particles.
    pub enkf_paths: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub proposal: Proposal,
    pub n_particles: usize,
    pub windows: usize,
    pub dt: f64,
    pub obs_stride: usize,
    pub filter: TraceSummary,
    pub smoothers: Vec<SmootherSummary>,
    /// ESS after each observation, starting with the initial one.
    pub observation_ess: Vec<f64>,
    /// Filter MSE just before each observation after the first.
    pub forecast_mse: Vec<Option<f64>>,
    /// Filter MSE just after each observation after the first.
    pub analysis_mse: Vec<Option<f64>>,
    /// Share of observations where the analysis MSE is below the forecast MSE.
    pub filter_drop_fraction: Option<f64>,
    pub timing_seconds: Option<f64>,
}

impl RunReport {
    pub fn smoother(&self, method: SmootherMethod) -> Option<&SmootherSummary> {
        self.smoothers.iter().find(|s| s.method == method)
    }
}

/// One row of the merged summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub report: String,
    pub model: String,
    /// `filter`, `standard` or `conditional`.
    pub method: String,
    pub proposal: Proposal,
    pub n_particles: usize,
    pub bridges: Option<usize>,
    pub rmse: Option<f64>,
    pub hidden_rmse: Option<f64>,
    pub median_jump: Option<f64>,
    pub mean_observation_ess: Option<f64>,
    pub failed_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub problems: Vec<Problem>,
}

impl Summary {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = [
            "run",
            "report",
            "model",
            "method",
            "proposal",
            "n_particles",
            "bridges",
            "rmse",
            "hidden_rmse",
            "median_jump",
            "mean_observation_ess",
            "failed_windows",
        ];
        let opt = |v: Option<f64>| v.map(io::fmt_f64).unwrap_or_default();
        let mut w = io::csv_writer(path)?;
        w.write_record(header).map_err(|e| io::csv_err(path, e))?;
        for r in &self.rows {
            let proposal = match r.proposal {
                Proposal::Bootstrap => "bootstrap",
                Proposal::Enkf => "enkf",
            };
            w.write_record([
                r.run.clone(),
                r.report.clone(),
                r.model.clone(),
                r.method.clone(),
                proposal.to_string(),
                r.n_particles.to_string(),
                r.bridges.map(|b| b.to_string()).unwrap_or_default(),
                opt(r.rmse),
                opt(r.hidden_rmse),
                opt(r.median_jump),
                opt(r.mean_observation_ess),
                r.failed_windows.to_string(),
            ])
            .map_err(|e| io::csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn rows_of(run: &str, name: &str, report: &RunReport) -> Vec<SummaryRow> {
    let ess = (!report.observation_ess.is_empty())
        .then(|| report.observation_ess.iter().sum::<f64>() / report.observation_ess.len() as f64);
    let base = SummaryRow {
        run: run.to_string(),
        report: name.to_string(),
        model: report.model.clone(),
        method: "filter".into(),
        proposal: report.proposal,
        n_particles: report.n_particles,
        bridges: None,
        rmse: report.filter.rmse,
        hidden_rmse: report.filter.hidden_rmse,
        median_jump: report.filter.jumps.median,
        mean_observation_ess: ess,
        failed_windows: 0,
    };
    let mut rows = vec![base.clone()];
    for s in &report.smoothers {
        rows.push(SummaryRow {
            method: s.method.name().into(),
            bridges: s.bridges,
            rmse: s.trace.rmse,
            hidden_rmse: s.trace.hidden_rmse,
            median_jump: s.trace.jumps.median,
            failed_windows: s.failed_windows,
            ..base.clone()
        });
    }
    rows
}

/// Collects every `report*.json` in the given run directories. Missing or
/// unreadable directories and reports are listed as problems.
pub fn summarize_runs(dirs: &[PathBuf]) -> Summary {
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for dir in dirs {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) => {
                problems.push(Problem {
                    path: dir.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.starts_with("report") && n.ends_with(".json"))
            .collect();
        names.sort();
        if names.is_empty() {
            problems.push(Problem {
                path: dir.clone(),
                reason: "no report files".into(),
            });
            continue;
        }
        let run = dir.display().to_string();
        for name in names {
            let path = dir.join(&name);
            match io::read_json::<RunReport>(&path) {
                Ok(report) => rows.extend(rows_of(&run, &name, &report)),
                Err(e) => problems.push(Problem {
                    path,
                    reason: e.to_string(),
                }),
            }
        }
    }
    Summary { rows, problems }
}
