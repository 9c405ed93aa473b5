//! Reconstruction quality and paired comparisons across repetitions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{EsiError, Result};

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EsiError::DimensionMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pearson coefficient, `None` when either side has zero variance.
fn pearson<I, J>(xs: I, ys: J) -> Option<f64>
where
    I: Iterator<Item = f64> + Clone,
    J: Iterator<Item = f64> + Clone,
{
    let n = xs.clone().count() as f64;
    let mx = xs.clone().sum::<f64>() / n;
    let my = ys.clone().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx > 0.0 && syy > 0.0 {
        Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
    } else {
        None
    }
}

pub fn rmse(j_hat: &DMatrix<f64>, j_star: &DMatrix<f64>) -> Result<f64> {
    same_shape(j_hat, j_star, "rmse")?;
    if j_hat.is_empty() {
        return Err(EsiError::InvalidInput("rmse of empty matrices".into()));
    }
    Ok(((j_hat - j_star).norm_squared() / j_hat.len() as f64).sqrt())
}

/// Mean over time of the Pearson correlation between `|J_hat_t|` and `|J*_t|`.
/// Time points with a constant map contribute 0.
pub fn spatial_corr(j_hat: &DMatrix<f64>, j_star: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
    same_shape(j_hat, j_star, "spatial_corr")?;
    let mut per_time = Vec::with_capacity(j_hat.ncols());
    let mut informative = 0usize;
    for (a, b) in j_hat.column_iter().zip(j_star.column_iter()) {
        match pearson(a.iter().map(|v| v.abs()), b.iter().map(|v| v.abs())) {
            Some(r) => {
                informative += 1;
                per_time.push(r);
            }
            None => per_time.push(0.0),
        }
    }
    if informative == 0 {
        return Err(EsiError::Degenerate(
            "every time point has a constant spatial map".into(),
        ));
    }
    let mean = per_time.iter().sum::<f64>() / per_time.len() as f64;
    Ok((mean, per_time))
}

/// Mean over `active` rows of the signed Pearson correlation between estimate and truth.
/// A constant estimated row contributes 0.
pub fn temporal_corr(j_hat: &DMatrix<f64>, j_star: &DMatrix<f64>, active: &[usize]) -> Result<(f64, Vec<f64>)> {
    same_shape(j_hat, j_star, "temporal_corr")?;
    if active.is_empty() {
        return Err(EsiError::InvalidInput("no active sources".into()));
    }
    let mut per_source = Vec::with_capacity(active.len());
    for &n in active {
        if n >= j_star.nrows() {
            return Err(EsiError::InvalidInput(format!("active index {n} out of range")));
        }
        let truth = j_star.row(n);
        let est = j_hat.row(n);
        let truth_mean = truth.mean();
        if truth.iter().all(|&v| v == truth_mean) {
            return Err(EsiError::Degenerate(format!("true source {n} is constant")));
        }
        per_source.push(pearson(est.iter().copied(), truth.iter().copied()).unwrap_or(0.0));
    }
    let mean = per_source.iter().sum::<f64>() / per_source.len() as f64;
    Ok((mean, per_source))
}

/// Mean over rows of the per-row population variance.
pub fn channel_average_variance(x: &DMatrix<f64>) -> f64 {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0.0;
    }
    let t = x.ncols() as f64;
    let total: f64 = x
        .row_iter()
        .map(|row| {
            let mean = row.sum() / t;
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t
        })
        .sum();
    total / x.nrows() as f64
}

pub fn snr_db(signal: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<f64> {
    if signal.nrows() != noise.nrows() {
        return Err(EsiError::DimensionMismatch(format!(
            "signal has {} channels, noise has {}",
            signal.nrows(),
            noise.nrows()
        )));
    }
    let noise_var = channel_average_variance(noise);
    if !(noise_var > 0.0) {
        return Err(EsiError::Degenerate("noise has zero variance".into()));
    }
    Ok(10.0 * (channel_average_variance(signal) / noise_var).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub t_stat: f64,
    /// Two-sided.
    pub p_value: f64,
    /// Mean of `a - b`.
    pub mean_diff: f64,
}

/// Paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(EsiError::DimensionMismatch(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(EsiError::InvalidInput("paired test needs at least two pairs".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EsiError::InvalidInput("paired samples must be finite".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(EsiError::Degenerate("paired differences have zero variance".into()));
    }
    let t_stat = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| EsiError::InvalidInput(format!("t distribution: {e}")))?;
    let p_value = (2.0 * dist.sf(t_stat.abs())).min(1.0);
    Ok(PairedComparison {
        t_stat,
        p_value,
        mean_diff: mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregate: f64,
    pub s_corr: f64,
    pub t_corr: f64,
    pub rmse: f64,
    pub per_time_scorr: Vec<f64>,
    pub per_source_tcorr: Vec<f64>,
}

pub fn evaluate(j_hat: &DMatrix<f64>, j_star: &DMatrix<f64>, active: &[usize]) -> Result<EvalReport> {
    let (s_corr, per_time_scorr) = spatial_corr(j_hat, j_star)?;
    let (t_corr, per_source_tcorr) = temporal_corr(j_hat, j_star, active)?;
    Ok(EvalReport {
        aggregate: (s_corr + t_corr) / 2.0,
        s_corr,
        t_corr,
        rmse: rmse(j_hat, j_star)?,
        per_time_scorr,
        per_source_tcorr,
    })
}
