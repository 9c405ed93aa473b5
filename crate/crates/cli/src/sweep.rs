//! Repetition sweeps: simulate, fit, evaluate per (SNR, repetition), in
//! parallel, with rows written in a fixed order by one writer.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use robust_esi::metrics::evaluate;
use robust_esi::sim::NoiseModel;
use serde::Serialize;

use crate::config::{EmitFormat, ExperimentConfig, Solver};
use crate::dataset::{create_dir, simulate, to_json_bytes, FileEntry};
use crate::error::{CliError, Result};
use crate::fit::{run_chvb, run_hvb, SolverRun};
use crate::matrix_io::{sha256_hex, write_bytes};
use crate::report::{comparison_row, summarize, ResultRow, SnrSummary};

pub const THREADS_ENV: &str = "ROBUST_ESI_THREADS";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker count; falls back to `ROBUST_ESI_THREADS`, then to rayon's default.
    pub threads: Option<usize>,
    /// One line per finished job on stderr.
    pub progress: bool,
    /// Keep every fit's objective trace in the outcome.
    pub keep_traces: bool,
}

/// `ROBUST_ESI_THREADS` as a positive integer; unset means no cap.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Solver rows in (SNR, repetition, solver) order, then one comparison
    /// row per SNR when both solvers ran.
    pub rows: Vec<ResultRow>,
    pub summaries: Vec<SnrSummary>,
    /// Objective traces in row order; empty unless `keep_traces` is set.
    pub traces: Vec<ObjectiveTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTrace {
    pub seed: u64,
    pub snr_db: f64,
    pub solver: Solver,
    pub values: Vec<f64>,
}

#[derive(Debug, Default)]
struct JobOutput {
    rows: Vec<ResultRow>,
    traces: Vec<ObjectiveTrace>,
}

fn metric_row(
    seed: u64,
    snr_db: f64,
    run: &SolverRun,
    truth: &robust_esi::sim::SourceGroundTruth,
    wall_ms: Option<f64>,
) -> ResultRow {
    match evaluate(&run.j_hat, &truth.j_star, &truth.active) {
        Ok(ev) => ResultRow {
            seed: Some(seed),
            snr_db,
            solver: run.solver.name().into(),
            aggregate: Some(ev.aggregate),
            s_corr: Some(ev.s_corr),
            t_corr: Some(ev.t_corr),
            rmse: Some(ev.rmse),
            iters: Some(run.iterations),
            wall_ms,
            t_stat: None,
            p_value: None,
            note: if run.converged {
                String::new()
            } else {
                "not converged".into()
            },
        },
        Err(e) => ResultRow::error(seed, snr_db, run.solver, &format!("evaluate: {e}")),
    }
}

/// All rows of one (SNR, repetition) job. ChVB reuses the hVB fit as its warm
/// start when both run; its `wall_ms` then includes the hVB time.
fn run_job(cfg: &ExperimentConfig, noise: &NoiseModel, snr: f64, seed: u64, keep_traces: bool) -> JobOutput {
    let solvers = cfg.ordered_solvers();
    let inst = match simulate(&cfg.dims, noise, snr, seed) {
        Ok(i) => i,
        Err(e) => {
            let rows = solvers
                .iter()
                .map(|&s| ResultRow::error(seed, snr, s, &format!("simulate: {e}")))
                .collect();
            return JobOutput {
                rows,
                traces: Vec::new(),
            };
        }
    };
    let mut traces = Vec::new();
    let mut keep = |run: &SolverRun| {
        if keep_traces {
            traces.push(ObjectiveTrace {
                seed,
                snr_db: snr,
                solver: run.solver,
                values: run.objective_trace.clone(),
            });
        }
    };
    let (b, g) = (&inst.observations, &inst.leadfield);
    let ms = |t: Instant| cfg.record_timing.then(|| t.elapsed().as_secs_f64() * 1e3);
    let mut rows = Vec::with_capacity(solvers.len());
    let mut warm = None;
    let mut warm_ms = 0.0;
    if solvers.contains(&Solver::Hvb) {
        let t0 = Instant::now();
        match run_hvb(b, g, &cfg.hvb) {
            Ok(state) => {
                let wall = ms(t0);
                warm_ms = wall.unwrap_or(0.0);
                let run = SolverRun::from_hvb(&state);
                keep(&run);
                rows.push(metric_row(seed, snr, &run, &inst.truth, wall));
                warm = Some(Ok(state));
            }
            Err(e) => {
                rows.push(ResultRow::error(seed, snr, Solver::Hvb, &e.to_string()));
                warm = Some(Err(e));
            }
        }
    }
    if solvers.contains(&Solver::Chvb) {
        let t0 = Instant::now();
        let run = match &warm {
            Some(Err(e)) => Err(CliError::Usage(format!("warm start failed: {e}"))),
            Some(Ok(state)) => run_chvb(b, g, &cfg.chvb_config(), Some(state)),
            None => run_chvb(b, g, &cfg.chvb_config(), None),
        };
        rows.push(match run {
            Ok(run) => {
                keep(&run);
                metric_row(seed, snr, &run, &inst.truth, ms(t0).map(|t| t + warm_ms))
            }
            Err(e) => ResultRow::error(seed, snr, Solver::Chvb, &e.to_string()),
        });
    }
    JobOutput { rows, traces }
}

/// A job that panics is recorded like a failed one.
fn isolated_job(cfg: &ExperimentConfig, noise: &NoiseModel, snr: f64, seed: u64, keep_traces: bool) -> JobOutput {
    catch_unwind(AssertUnwindSafe(|| run_job(cfg, noise, snr, seed, keep_traces))).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown".into());
        let rows = cfg
            .ordered_solvers()
            .into_iter()
            .map(|s| ResultRow::error(seed, snr, s, &format!("panic: {msg}")))
            .collect();
        JobOutput {
            rows,
            traces: Vec::new(),
        }
    })
}

/// Runs the sweep, handing every row to `sink` in final order from the
/// calling thread. Relative repository paths resolve against `base_dir`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    opts: &SweepOptions,
    mut sink: impl FnMut(&ResultRow) -> Result<()>,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    let noise = cfg.noise.model(cfg.dims.sensors, base_dir)?;
    let snrs = cfg.snr_values();
    let jobs: Vec<(f64, u64)> = snrs
        .iter()
        .flat_map(|&snr| (0..cfg.repetitions).map(move |r| (snr, r as u64)))
        .map(|(snr, r)| (snr, cfg.seed.wrapping_add(r)))
        .collect();
    let threads = match opts.threads {
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;

    let mut rows = Vec::with_capacity(jobs.len() * cfg.solvers.len() + snrs.len());
    let mut sink_error = None;
    let mut deliver = |r: &ResultRow, rows: &mut Vec<ResultRow>| {
        if sink_error.is_none() {
            if let Err(e) = sink(r) {
                sink_error = Some(e);
            }
        }
        rows.push(r.clone());
    };
    let mut traces = Vec::new();
    let keep_traces = opts.keep_traces;
    let (tx, rx) = mpsc::channel::<(usize, JobOutput)>();
    std::thread::scope(|scope| {
        let (jobs, noise) = (&jobs, &noise);
        scope.spawn(move || {
            pool.install(|| {
                jobs.par_iter().enumerate().for_each_with(tx, |tx, (i, &(snr, seed))| {
                    let _ = tx.send((i, isolated_job(cfg, noise, snr, seed, keep_traces)));
                })
            })
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (done, (i, job)) in rx.into_iter().enumerate() {
            if opts.progress {
                let (snr, seed) = jobs[i];
                eprintln!("[{}/{}] snr {snr} dB seed {seed}", done + 1, jobs.len());
            }
            pending.insert(i, job);
            while let Some(ready) = pending.remove(&next) {
                for r in &ready.rows {
                    deliver(r, &mut rows);
                }
                traces.extend(ready.traces);
                next += 1;
            }
        }
    });
    let summaries = summarize(&rows);
    for s in &summaries {
        if let Some(r) = comparison_row(s) {
            deliver(&r, &mut rows);
        }
    }
    if let Some(e) = sink_error {
        return Err(e);
    }
    Ok(SweepOutcome {
        rows,
        summaries,
        traces,
    })
}

#[derive(Debug, Clone, Serialize)]
struct SweepSummary<'a> {
    config: &'a ExperimentConfig,
    snr: &'a [SnrSummary],
}

#[derive(Debug, Clone, Serialize)]
struct SweepManifest {
    files: Vec<FileEntry>,
}

/// Runs a sweep and writes the configured outputs plus a manifest into
/// `cfg.output_dir`. Returns the outcome and the output directory.
pub fn cmd_sweep(cfg: &ExperimentConfig, base_dir: &Path, opts: &SweepOptions) -> Result<(SweepOutcome, PathBuf)> {
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let csv_path = out.join(RESULTS_FILE);
    let mut writer = if cfg.emits(EmitFormat::Csv) {
        Some(csv::Writer::from_path(&csv_path).map_err(|e| CliError::format(&csv_path, e.to_string()))?)
    } else {
        None
    };
    let to_err = |e: csv::Error| CliError::format(&csv_path, e.to_string());
    let outcome = run_sweep(cfg, base_dir, opts, |row| match writer.as_mut() {
        Some(w) => {
            w.serialize(row).map_err(to_err)?;
            w.flush().map_err(|e| CliError::io(&csv_path, e))
        }
        None => Ok(()),
    })?;
    let mut files = Vec::new();
    if let Some(w) = writer {
        drop(w);
        let bytes = std::fs::read(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
        files.push(FileEntry {
            role: "results".into(),
            path: PathBuf::from(RESULTS_FILE),
            rows: outcome.rows.len(),
            cols: 12,
            sha256: sha256_hex(&bytes),
        });
    }
    if cfg.emits(EmitFormat::Json) {
        let summary = SweepSummary {
            config: cfg,
            snr: &outcome.summaries,
        };
        let sha256 = write_bytes(&out.join(SUMMARY_FILE), &to_json_bytes(&summary))?;
        files.push(FileEntry {
            role: "summary".into(),
            path: PathBuf::from(SUMMARY_FILE),
            rows: outcome.summaries.len(),
            cols: 0,
            sha256,
        });
    }
    write_bytes(&out.join(MANIFEST_FILE), &to_json_bytes(&SweepManifest { files }))?;
    Ok((outcome, out))
}
