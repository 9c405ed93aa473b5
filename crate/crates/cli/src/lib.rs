//! Command-line harness around `robust-esi`: dataset simulation, solver fits,
//! residual score matching, repetition sweeps and reports.
//!
//! Every command is a plain function here so tests can drive it without a
//! subprocess; `main.rs` only parses arguments.

pub mod config;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod matrix_io;
pub mod report;
pub mod sweep;

use std::path::Path;

use robust_esi::likelihood::{fit_score_matching, ResidualSample, ScoreMatchConfig};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{simulate, to_json_bytes, write_dataset, Manifest};
use crate::error::{CliError, Result};
use crate::matrix_io::{read_matrix, write_bytes};
use crate::report::{read_results, summarize, SnrSummary};

pub use error::CliError as Error;

/// Simulates one instance (repetition seed `cfg.seed`, first entry of the SNR
/// list) into `out_dir`.
pub fn cmd_simulate(cfg: &ExperimentConfig, base_dir: &Path, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let noise = cfg.noise.model(cfg.dims.sensors, base_dir)?;
    let snr = cfg.snr_values()[0];
    let inst = simulate(&cfg.dims, &noise, snr, cfg.seed)?;
    write_dataset(out_dir, &inst, &cfg.dims, &cfg.noise)
}

/// Score-matching result for one residual row. `error` is set, and the
/// parameters absent, when the row cannot be fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFit {
    pub row: usize,
    pub samples: usize,
    pub h: Option<f64>,
    pub eta: Option<f64>,
    pub bandwidth: Option<f64>,
    pub objective: Option<f64>,
    pub converged: bool,
    pub at_bound: bool,
    pub error: Option<String>,
}

/// Independent score-matching fit of every row; bad rows are recorded, not fatal.
pub fn score_match_rows(residuals: &nalgebra::DMatrix<f64>, cfg: &ScoreMatchConfig) -> Result<Vec<RowFit>> {
    cfg.validate()?;
    Ok(residuals
        .row_iter()
        .enumerate()
        .map(|(row, r)| {
            let fit = ResidualSample::new(r.iter().copied().collect()).and_then(|s| fit_score_matching(&s, cfg));
            match fit {
                Ok(f) => RowFit {
                    row,
                    samples: r.len(),
                    h: Some(f.params.h()),
                    eta: Some(f.params.eta()),
                    bandwidth: Some(f.params.bandwidth()),
                    objective: Some(f.objective),
                    converged: f.converged,
                    at_bound: f.at_bound,
                    error: None,
                },
                Err(e) => RowFit {
                    row,
                    samples: r.len(),
                    h: None,
                    eta: None,
                    bandwidth: None,
                    objective: None,
                    converged: false,
                    at_bound: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Reads a residual matrix (ESIM or CSV) and writes the per-row fits as JSON.
pub fn cmd_score_match(residual_file: &Path, cfg: &ScoreMatchConfig, out_file: &Path) -> Result<Vec<RowFit>> {
    let residuals = read_matrix(residual_file)?;
    let fits = score_match_rows(&residuals, cfg)?;
    if let Some(dir) = out_file.parent().filter(|d| !d.as_os_str().is_empty()) {
        dataset::create_dir(dir)?;
    }
    write_bytes(out_file, &to_json_bytes(&fits))?;
    Ok(fits)
}

/// Summarizes a sweep CSV; writes JSON to `out_file` when given.
pub fn cmd_report(results: &Path, out_file: Option<&Path>) -> Result<Vec<SnrSummary>> {
    let rows = read_results(results)?;
    if rows.is_empty() {
        return Err(CliError::format(results, "no result rows"));
    }
    let summaries = summarize(&rows);
    if let Some(out) = out_file {
        write_bytes(out, &to_json_bytes(&summaries))?;
    }
    Ok(summaries)
}
