//! Result rows, their per-SNR summary, and the comparison rows appended to a sweep.

use std::fmt::Write as _;
use std::path::Path;

use robust_esi::metrics::{paired_compare, PairedComparison};
use serde::{Deserialize, Serialize};

use crate::config::Solver;
use crate::error::{CliError, Result};

/// `solver` value of the rows comparing the two solvers.
pub const COMPARISON: &str = "chvb-hvb";

/// One CSV row. Metric fields are empty on error rows, whose `note` starts
/// with `error:`; comparison rows carry the paired test of the aggregate in
/// `t_stat` / `p_value` and mean differences (ChVB minus hVB) in the metric fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: Option<u64>,
    pub snr_db: f64,
    pub solver: String,
    pub aggregate: Option<f64>,
    pub s_corr: Option<f64>,
    pub t_corr: Option<f64>,
    pub rmse: Option<f64>,
    pub iters: Option<usize>,
    pub wall_ms: Option<f64>,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub note: String,
}

impl ResultRow {
    pub fn error(seed: u64, snr_db: f64, solver: Solver, message: &str) -> Self {
        Self {
            seed: Some(seed),
            snr_db,
            solver: solver.name().into(),
            aggregate: None,
            s_corr: None,
            t_corr: None,
            rmse: None,
            iters: None,
            wall_ms: None,
            t_stat: None,
            p_value: None,
            note: format!("error: {message}"),
        }
    }

    pub fn is_error(&self) -> bool {
        self.note.starts_with("error:")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub solver: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_aggregate: f64,
    /// Sample standard deviation (n - 1).
    pub std_aggregate: f64,
    pub mean_s_corr: f64,
    pub mean_t_corr: f64,
    pub mean_rmse: f64,
    pub mean_iters: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Seeds where both solvers succeeded.
    pub pairs: usize,
    /// Pairs where ChVB has the higher aggregate.
    pub wins: usize,
    pub aggregate: Option<PairedComparison>,
    pub rmse: Option<PairedComparison>,
    pub mean_diff_s_corr: f64,
    pub mean_diff_t_corr: f64,
    pub mean_diff_rmse: f64,
    pub mean_diff_aggregate: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSummary {
    pub snr_db: f64,
    pub solvers: Vec<SolverStats>,
    pub comparison: Option<Comparison>,
}

impl SnrSummary {
    pub fn solver(&self, name: &str) -> Option<&SolverStats> {
        self.solvers.iter().find(|s| s.solver == name)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn stats(solver: &str, rows: &[&ResultRow]) -> SolverStats {
    let ok: Vec<&&ResultRow> = rows.iter().filter(|r| !r.is_error()).collect();
    let col = |f: fn(&ResultRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
    let agg = col(|r| r.aggregate);
    SolverStats {
        solver: solver.into(),
        runs: ok.len(),
        failures: rows.len() - ok.len(),
        mean_aggregate: mean(&agg),
        std_aggregate: sample_std(&agg),
        mean_s_corr: mean(&col(|r| r.s_corr)),
        mean_t_corr: mean(&col(|r| r.t_corr)),
        mean_rmse: mean(&col(|r| r.rmse)),
        mean_iters: mean(&col(|r| r.iters.map(|i| i as f64))),
    }
}

fn compare(hvb: &[&ResultRow], chvb: &[&ResultRow]) -> Comparison {
    // pair by seed, in hVB row order
    let pairs: Vec<(&ResultRow, &ResultRow)> = hvb
        .iter()
        .filter(|h| !h.is_error())
        .filter_map(|h| {
            chvb.iter()
                .find(|c| c.seed == h.seed && !c.is_error())
                .map(|c| (*h, *c))
        })
        .collect();
    let pick = |f: fn(&ResultRow) -> Option<f64>| -> (Vec<f64>, Vec<f64>) {
        pairs
            .iter()
            .map(|(h, c)| (f(c).unwrap_or(f64::NAN), f(h).unwrap_or(f64::NAN)))
            .unzip()
    };
    let diff = |f: fn(&ResultRow) -> Option<f64>| {
        let (c, h) = pick(f);
        mean(&c.iter().zip(&h).map(|(a, b)| a - b).collect::<Vec<_>>())
    };
    let (ca, ha) = pick(|r| r.aggregate);
    let (cr, hr) = pick(|r| r.rmse);
    let agg_test = paired_compare(&ca, &ha);
    let rmse_test = paired_compare(&cr, &hr);
    let error = match (&agg_test, &rmse_test) {
        (Err(e), _) => Some(format!("aggregate test: {e}")),
        (_, Err(e)) => Some(format!("rmse test: {e}")),
        _ => None,
    };
    Comparison {
        pairs: pairs.len(),
        wins: ca.iter().zip(&ha).filter(|(c, h)| c > h).count(),
        aggregate: agg_test.ok(),
        rmse: rmse_test.ok(),
        mean_diff_s_corr: diff(|r| r.s_corr),
        mean_diff_t_corr: diff(|r| r.t_corr),
        mean_diff_rmse: diff(|r| r.rmse),
        mean_diff_aggregate: diff(|r| r.aggregate),
        error,
    }
}

/// Groups solver rows by SNR (in order of first appearance); comparison rows
/// in the input are ignored and recomputed.
pub fn summarize(rows: &[ResultRow]) -> Vec<SnrSummary> {
    let mut snrs: Vec<f64> = Vec::new();
    for r in rows {
        if !snrs.iter().any(|s| s.to_bits() == r.snr_db.to_bits()) {
            snrs.push(r.snr_db);
        }
    }
    snrs.into_iter()
        .map(|snr| {
            let at: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.snr_db.to_bits() == snr.to_bits() && r.solver != COMPARISON)
                .collect();
            let of = |s: Solver| at.iter().copied().filter(|r| r.solver == s.name()).collect::<Vec<_>>();
            let (hvb, chvb) = (of(Solver::Hvb), of(Solver::Chvb));
            let mut solvers = Vec::new();
            for (s, rs) in [(Solver::Hvb, &hvb), (Solver::Chvb, &chvb)] {
                if !rs.is_empty() {
                    solvers.push(stats(s.name(), rs));
                }
            }
            let comparison = (!hvb.is_empty() && !chvb.is_empty()).then(|| compare(&hvb, &chvb));
            SnrSummary {
                snr_db: snr,
                solvers,
                comparison,
            }
        })
        .collect()
}

pub fn comparison_row(s: &SnrSummary) -> Option<ResultRow> {
    let c = s.comparison.as_ref()?;
    let finite = |v: f64| v.is_finite().then_some(v);
    let mut note = format!("pairs={} wins={}", c.pairs, c.wins);
    if let Some(r) = &c.rmse {
        let _ = write!(note, " rmse_t={} rmse_p={}", r.t_stat, r.p_value);
    }
    if let Some(e) = &c.error {
        let _ = write!(note, " {e}");
    }
    Some(ResultRow {
        seed: None,
        snr_db: s.snr_db,
        solver: COMPARISON.into(),
        aggregate: finite(c.mean_diff_aggregate),
        s_corr: finite(c.mean_diff_s_corr),
        t_corr: finite(c.mean_diff_t_corr),
        rmse: finite(c.mean_diff_rmse),
        iters: None,
        wall_ms: None,
        t_stat: c.aggregate.map(|a| a.t_stat),
        p_value: c.aggregate.map(|a| a.p_value),
        note,
    })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| CliError::format(path, format!("row {}: {e}", i + 1))))
        .collect()
}

/// Fixed-width table of the summary.
pub fn render_text(summaries: &[SnrSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8}  {:<9} {:>5} {:>5} {:>10} {:>8} {:>8} {:>8} {:>10}",
        "snr_db", "solver", "runs", "fail", "aggregate", "sd", "s_corr", "t_corr", "rmse"
    );
    for s in summaries {
        for st in &s.solvers {
            let _ = writeln!(
                out,
                "{:>8.2}  {:<9} {:>5} {:>5} {:>10.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4e}",
                s.snr_db,
                st.solver,
                st.runs,
                st.failures,
                st.mean_aggregate,
                st.std_aggregate,
                st.mean_s_corr,
                st.mean_t_corr,
                st.mean_rmse
            );
        }
        if let Some(c) = &s.comparison {
            let (t, p) = c
                .aggregate
                .map(|a| (a.t_stat, a.p_value))
                .unwrap_or((f64::NAN, f64::NAN));
            let _ = writeln!(
                out,
                "{:>8.2}  {:<9} pairs {} wins {}  diff {:+.4}  t {:.3}  p {:.3e}",
                s.snr_db, COMPARISON, c.pairs, c.wins, c.mean_diff_aggregate, t, p
            );
        }
    }
    out
}
