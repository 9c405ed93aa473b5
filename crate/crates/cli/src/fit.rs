//! Solver runs on one dataset and the `fit` summary.

use std::path::Path;

use nalgebra::DMatrix;
use robust_esi::chvb::{chvb_fit, chvb_fit_from, ChvbConfig, ChvbState, WarmStartSummary};
use robust_esi::hvb::{hvb_fit, HvbConfig, HvbState};
use robust_esi::metrics::{evaluate, EvalReport};
use robust_esi::sim::Leadfield;
use serde::{Deserialize, Serialize};

use crate::config::Solver;
use crate::dataset::{create_dir, load_dataset, to_json_bytes, write_matrix_entry, FileEntry};
use crate::error::Result;
use crate::matrix_io::write_bytes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecord {
    pub channel: usize,
    pub h: f64,
    pub eta: f64,
    /// Kernel width `sqrt(h / eta)`.
    pub bandwidth: f64,
    pub residual_std: f64,
    pub hscore: Option<f64>,
    pub converged: bool,
    pub at_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustDetail {
    pub warm_start: WarmStartSummary,
    pub channels: Vec<ChannelRecord>,
    pub fixed_point_iterations: usize,
    pub fixed_point_warnings: usize,
    pub rejected_updates: usize,
}

/// Solver-independent view of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverRun {
    pub solver: Solver,
    pub j_hat: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub beta_bar: Option<f64>,
    pub robust: Option<RobustDetail>,
}

impl SolverRun {
    pub fn from_hvb(s: &HvbState) -> Self {
        Self {
            solver: Solver::Hvb,
            j_hat: s.j_hat.clone(),
            iterations: s.iterations,
            converged: s.converged,
            objective_trace: s.objective_trace.clone(),
            beta_bar: Some(s.beta_bar),
            robust: None,
        }
    }

    pub fn from_chvb(s: ChvbState) -> Self {
        let channels = s
            .channel_fits
            .iter()
            .zip(&s.channel_params.params)
            .map(|(f, p)| ChannelRecord {
                channel: f.channel,
                h: p.h(),
                eta: p.eta(),
                bandwidth: p.bandwidth(),
                residual_std: f.scale,
                hscore: f.objective,
                converged: f.converged,
                at_bound: f.at_bound,
            })
            .collect();
        Self {
            solver: Solver::Chvb,
            iterations: s.outer_iterations,
            converged: s.converged,
            objective_trace: s.objective_trace,
            beta_bar: None,
            robust: Some(RobustDetail {
                warm_start: s.warm_start,
                channels,
                fixed_point_iterations: s.fixed_point_iterations,
                fixed_point_warnings: s.fixed_point_warnings,
                rejected_updates: s.rejected_updates,
            }),
            j_hat: s.j_hat,
        }
    }
}

pub fn run_hvb(b: &DMatrix<f64>, g: &Leadfield, cfg: &HvbConfig) -> Result<HvbState> {
    Ok(hvb_fit(b, g, cfg)?)
}

/// ChVB from an existing hVB fit when one is given, else with its own warm start.
pub fn run_chvb(b: &DMatrix<f64>, g: &Leadfield, cfg: &ChvbConfig, warm: Option<&HvbState>) -> Result<SolverRun> {
    let state = match warm {
        Some(w) => chvb_fit_from(b, g, cfg, w)?,
        None => chvb_fit(b, g, cfg)?,
    };
    Ok(SolverRun::from_chvb(state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub solver: Solver,
    pub leadfield_sha256: String,
    pub observations_sha256: String,
    pub sensors: usize,
    pub sources: usize,
    pub samples: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: Option<f64>,
    pub objective_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_bar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust: Option<RobustDetail>,
    /// Present when the dataset carries its ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalReport>,
    pub files: Vec<FileEntry>,
}

pub fn summary_file(solver: Solver) -> String {
    format!("fit_{solver}.json")
}

pub fn estimate_file(solver: Solver) -> String {
    format!("fit_{solver}.esim")
}

/// Fits one solver to the dataset in `data_dir`, writing the estimate and a
/// summary into `out_dir`.
pub fn cmd_fit(
    data_dir: &Path,
    out_dir: &Path,
    solver: Solver,
    hvb: &HvbConfig,
    chvb: &ChvbConfig,
) -> Result<FitSummary> {
    let data = load_dataset(data_dir)?;
    let g = Leadfield::new(data.leadfield)?;
    let b = &data.observations;
    let run = match solver {
        Solver::Hvb => SolverRun::from_hvb(&run_hvb(b, &g, hvb)?),
        Solver::Chvb => run_chvb(b, &g, chvb, None)?,
    };
    let evaluation = match &data.truth {
        Some((j_star, active)) => Some(evaluate(&run.j_hat, j_star, active)?),
        None => None,
    };
    create_dir(out_dir)?;
    let entry = write_matrix_entry(out_dir, "estimate", &estimate_file(solver), &run.j_hat)?;
    let summary = FitSummary {
        solver,
        leadfield_sha256: data.leadfield_sha256,
        observations_sha256: data.observations_sha256,
        sensors: g.sensors(),
        sources: g.sources(),
        samples: b.ncols(),
        iterations: run.iterations,
        converged: run.converged,
        final_objective: run.objective_trace.last().copied(),
        objective_trace: run.objective_trace,
        beta_bar: run.beta_bar,
        robust: run.robust,
        evaluation,
        files: vec![entry],
    };
    write_bytes(&out_dir.join(summary_file(solver)), &to_json_bytes(&summary))?;
    Ok(summary)
}
