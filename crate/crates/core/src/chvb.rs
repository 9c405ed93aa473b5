//! Robust variational Bayes under the correntropy likelihood: an hVB warm
//! start, score-matched per-channel noise parameters, then alternating
//! fixed-point J-steps with a Laplace covariance and Gamma A-steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EsiError, Result};
use crate::hvb::{
    a_step_from_mean, hvb_fit, hvb_fit_uncertainty, residuals, GammaPosterior, HvbConfig, HvbState, ResolvedPrior,
};
use crate::likelihood::{empirical_hscore, fit_score_matching, CorrentropyParams, ResidualSample, ScoreMatchConfig};
use crate::linalg::{CovDiagSum, SystemBasis, WeightedFactor};
use crate::sim::Leadfield;

/// Curvature used for the Laplace covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// The fixed-point weights; always positive.
    #[default]
    GaussNewton,
    /// The analytic second derivative clamped at zero.
    FullClamped,
}

/// How hVB residuals are grouped for score matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPooling {
    /// Each channel is divided by its residual standard deviation and one
    /// `(h, eta)` is fitted to all channels together; `eta` is then rescaled per channel.
    #[default]
    Standardized,
    /// An independent fit on each channel's own residuals.
    PerChannel,
}

/// Which variance sets the per-channel `eta` after score matching.
///
/// hVB residuals understate the noise, since the fit absorbs part of it. The
/// corrected scales make the Gaussian limit reproduce hVB, but they also undo
/// most of the gain at high SNR, where hVB's own fit has high leverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// The residual variance of the warm start.
    #[default]
    Residual,
    /// The residual variance plus the warm start's posterior variance of the fit,
    /// i.e. the expected squared error under the hVB posterior.
    Posterior,
    /// The residual variance divided by one minus the channel's leverage.
    Leverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChvbConfig {
    /// Warm-start solver; its prior fields are shared by the robust iterations.
    pub hvb: HvbConfig,
    pub fixed_point_max_iters: usize,
    pub fixed_point_tol: f64,
    pub outer_max_iters: usize,
    pub outer_rel_tol: f64,
    pub score_match: ScoreMatchConfig,
    pub pooling: ResidualPooling,
    pub noise_scale: NoiseScale,
    pub hessian_mode: HessianMode,
    /// Keep a time point's previous mode (or a point between) when the new mode
    /// would raise its share of the free energy.
    pub safeguard: bool,
}

impl Default for ChvbConfig {
    fn default() -> Self {
        Self {
            hvb: HvbConfig::default(),
            fixed_point_max_iters: 200,
            fixed_point_tol: 1e-8,
            outer_max_iters: 500,
            outer_rel_tol: 1e-6,
            score_match: ScoreMatchConfig::default(),
            pooling: ResidualPooling::default(),
            noise_scale: NoiseScale::default(),
            hessian_mode: HessianMode::default(),
            safeguard: true,
        }
    }
}

impl ChvbConfig {
    pub fn validate(&self, sensors: usize, sources: usize) -> Result<()> {
        self.hvb.validate(sensors, sources)?;
        self.score_match.validate()?;
        for (name, tol) in [
            ("fixed_point_tol", self.fixed_point_tol),
            ("outer_rel_tol", self.outer_rel_tol),
        ] {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(EsiError::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.fixed_point_max_iters == 0 || self.outer_max_iters == 0 {
            return Err(EsiError::InvalidInput("iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One `(h, eta)` pair per sensor channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNoiseParams {
    pub params: Vec<CorrentropyParams>,
}

impl ChannelNoiseParams {
    pub fn new(params: Vec<CorrentropyParams>) -> Result<Self> {
        if params.is_empty() {
            return Err(EsiError::InvalidInput("no channel parameters".into()));
        }
        Ok(Self { params })
    }

    /// The same pair on every channel.
    pub fn uniform(channels: usize, p: CorrentropyParams) -> Self {
        Self {
            params: vec![p; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.params.len()
    }

    /// Diagonal of the fixed-point weight matrix at residual `e`.
    pub fn weights(&self, e: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(e.len(), self.params.iter().zip(e.iter()).map(|(p, &v)| p.weight(v)))
    }

    fn curvatures(&self, e: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            e.len(),
            self.params.iter().zip(e.iter()).map(|(p, &v)| p.clamped_curvature(v)),
        )
    }

    /// `sum_m log C(e_m | h_m, eta_m)`.
    pub fn log_likelihood(&self, e: &DVector<f64>) -> f64 {
        self.params
            .iter()
            .zip(e.iter())
            .map(|(p, &v)| p.log_density_at(v))
            .sum()
    }
}

/// Score-matching outcome for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFit {
    pub channel: usize,
    pub params: Option<CorrentropyParams>,
    /// Empirical H-score of the channel's residuals at `params`.
    pub objective: Option<f64>,
    pub converged: bool,
    pub at_bound: bool,
    /// Residual standard deviation of the channel.
    pub scale: f64,
    pub error: Option<String>,
}

fn failed_channel(channel: usize, scale: f64, err: &EsiError) -> ChannelFit {
    ChannelFit {
        channel,
        params: None,
        objective: None,
        converged: false,
        at_bound: false,
        scale,
        error: Some(err.to_string()),
    }
}

/// Score-matches every row of a residual matrix. Rows that cannot be fitted
/// carry an error and no parameters; the call itself fails only on bad config
/// or when no row is usable.
pub fn score_match_channels(
    residual: &DMatrix<f64>,
    cfg: &ScoreMatchConfig,
    pooling: ResidualPooling,
) -> Result<Vec<ChannelFit>> {
    cfg.validate()?;
    let rows: Vec<Result<ResidualSample>> = residual
        .row_iter()
        .map(|r| ResidualSample::new(r.iter().copied().collect()))
        .collect();
    let scales: Vec<f64> = rows
        .iter()
        .map(|r| r.as_ref().map(|s| s.variance().sqrt()).unwrap_or(f64::NAN))
        .collect();
    let usable = |m: usize| rows[m].is_ok() && scales[m] > 0.0;
    if !(0..rows.len()).any(usable) {
        return Err(EsiError::Degenerate("no residual row has positive variance".into()));
    }
    let degenerate = |m: usize| match &rows[m] {
        Err(e) => failed_channel(m, scales[m], e),
        Ok(_) => failed_channel(
            m,
            scales[m],
            &EsiError::Degenerate("residual row has zero variance".into()),
        ),
    };
    match pooling {
        ResidualPooling::PerChannel => Ok((0..rows.len())
            .map(|m| {
                if !usable(m) {
                    return degenerate(m);
                }
                let sample = rows[m].as_ref().expect("usable row");
                match fit_score_matching(sample, cfg) {
                    Ok(fit) => ChannelFit {
                        channel: m,
                        params: Some(fit.params),
                        objective: Some(fit.objective),
                        converged: fit.converged,
                        at_bound: fit.at_bound,
                        scale: scales[m],
                        error: None,
                    },
                    Err(e) => failed_channel(m, scales[m], &e),
                }
            })
            .collect()),
        ResidualPooling::Standardized => {
            let pooled: Vec<f64> = (0..rows.len())
                .filter(|&m| usable(m))
                .flat_map(|m| {
                    let s = scales[m];
                    residual.row(m).iter().map(move |v| v / s).collect::<Vec<_>>()
                })
                .collect();
            let fit = fit_score_matching(&ResidualSample::new(pooled)?, cfg)?;
            Ok((0..rows.len())
                .map(|m| {
                    if !usable(m) {
                        return degenerate(m);
                    }
                    let s2 = scales[m] * scales[m];
                    let eta = (fit.params.eta() / s2).clamp(cfg.eta_min, cfg.eta_max);
                    let params = CorrentropyParams::new(fit.params.h(), eta);
                    match params {
                        Ok(p) => ChannelFit {
                            channel: m,
                            params: Some(p),
                            objective: Some(empirical_hscore(rows[m].as_ref().expect("usable row"), &p)),
                            converged: fit.converged,
                            at_bound: fit.at_bound,
                            scale: scales[m],
                            error: None,
                        },
                        Err(e) => failed_channel(m, scales[m], &e),
                    }
                })
                .collect())
        }
    }
}

/// Divides each fitted `eta` by a variance inflation factor (>= 1).
pub fn inflate_noise_variance(fits: &mut [ChannelFit], factors: &DVector<f64>, cfg: &ScoreMatchConfig) -> Result<()> {
    if factors.len() != fits.len() {
        return Err(EsiError::DimensionMismatch(format!(
            "{} factors for {} channels",
            factors.len(),
            fits.len()
        )));
    }
    if factors.iter().any(|v| !(*v >= 1.0 && v.is_finite())) {
        return Err(EsiError::InvalidInput(
            "inflation factors must be finite and >= 1".into(),
        ));
    }
    for (fit, &k) in fits.iter_mut().zip(factors.iter()) {
        if let Some(p) = fit.params {
            let eta = (p.eta() / k).clamp(cfg.eta_min, cfg.eta_max);
            fit.params = Some(CorrentropyParams::new(p.h(), eta)?);
        }
    }
    Ok(())
}

/// Outcome of the per-time fixed-point iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOutcome {
    pub j: DVector<f64>,
    /// `log Q(j) = sum log C(e) - j^T diag(a) j / 2` at `j`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// No step, halved or not, improved the objective before convergence.
    pub stalled: bool,
    /// `||G^T Psi e - diag(a) j||`.
    pub gradient_norm: f64,
    /// `gradient_norm <= 1e-6 (1 + ||G^T Psi b||)`.
    pub stationary: bool,
}

const MAX_HALVINGS: usize = 20;

/// `(log Q(j), b - G j)`.
fn log_posterior(
    basis: &SystemBasis<'_>,
    a_bar: &DVector<f64>,
    b: &DVector<f64>,
    j: &DVector<f64>,
    params: &ChannelNoiseParams,
) -> (f64, DVector<f64>) {
    let e = b - basis.leadfield() * j;
    let obj = params.log_likelihood(&e) - 0.5 * a_bar.dot(&j.component_mul(j));
    (obj, e)
}

/// A point together with its fixed-point system `G^T Psi(j) G + diag(a)`.
struct Iterate<'b, 'a> {
    j: DVector<f64>,
    e: DVector<f64>,
    objective: f64,
    factor: WeightedFactor<'b, 'a>,
}

impl<'b, 'a> Iterate<'b, 'a> {
    fn from_parts(
        basis: &'b SystemBasis<'a>,
        params: &ChannelNoiseParams,
        j: DVector<f64>,
        e: DVector<f64>,
        objective: f64,
    ) -> Result<Self> {
        let factor = basis.factor(&params.weights(&e))?;
        Ok(Self {
            j,
            e,
            objective,
            factor,
        })
    }

    fn at(
        basis: &'b SystemBasis<'a>,
        a_bar: &DVector<f64>,
        b: &DVector<f64>,
        params: &ChannelNoiseParams,
        j: DVector<f64>,
    ) -> Result<Self> {
        let (objective, e) = log_posterior(basis, a_bar, b, &j, params);
        Self::from_parts(basis, params, j, e, objective)
    }

    /// This time point's share of the surrogate free energy, plus the Laplace
    /// factor when it differs from the fixed-point one.
    fn energy(
        &self,
        basis: &'b SystemBasis<'a>,
        params: &ChannelNoiseParams,
        mode: HessianMode,
    ) -> Result<(f64, Option<WeightedFactor<'b, 'a>>)> {
        let n = self.j.len() as f64;
        match mode {
            HessianMode::GaussNewton => Ok((-self.objective + 0.5 * self.factor.log_det() + 0.5 * n, None)),
            HessianMode::FullClamped => {
                let psi = params.weights(&self.e);
                let d = params.curvatures(&self.e);
                let factor = basis.factor(&d)?;
                let trace = n + (&psi - &d).dot(&factor.fitted_cov_diag());
                Ok((-self.objective + 0.5 * factor.log_det() + 0.5 * trace, Some(factor)))
            }
        }
    }
}

struct FixedPointRun<'b, 'a> {
    outcome: FixedPointOutcome,
    start: Iterate<'b, 'a>,
    /// `None` when no step was taken.
    end: Option<Iterate<'b, 'a>>,
}

fn run_fixed_point<'b, 'a>(
    basis: &'b SystemBasis<'a>,
    a_bar: &DVector<f64>,
    b: &DVector<f64>,
    params: &ChannelNoiseParams,
    init: DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointRun<'b, 'a>> {
    let g = basis.leadfield();
    let start = Iterate::at(basis, a_bar, b, params, init)?;
    let mut end: Option<Iterate<'b, 'a>> = None;
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let here = end.as_ref().unwrap_or(&start);
        let (proposal, fitted) = here.factor.solve_data_col_fitted(b);
        let step = &proposal - &here.j;
        // G step, so residuals follow the step without another pass over G
        let fitted_step = fitted - (b - &here.e);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &here.j + &step * scale;
            let e = &here.e - &fitted_step * scale;
            let obj = params.log_likelihood(&e) - 0.5 * a_bar.dot(&cand.component_mul(&cand));
            if obj >= here.objective {
                accepted = Some((cand, e, obj));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, e, obj)) = accepted else {
            stalled = true;
            break;
        };
        let change = (&cand - &here.j).norm();
        let size = cand.norm();
        end = Some(Iterate::from_parts(basis, params, cand, e, obj)?);
        if change <= tol * size || change == 0.0 {
            converged = true;
            break;
        }
    }
    let last = end.as_ref().unwrap_or(&start);
    let psi = params.weights(&last.e);
    let grad = g.tr_mul(&psi.component_mul(&last.e)) - a_bar.component_mul(&last.j);
    let scale = g.tr_mul(&psi.component_mul(b)).norm();
    let gradient_norm = grad.norm();
    let outcome = FixedPointOutcome {
        j: last.j.clone(),
        objective: last.objective,
        iterations,
        converged,
        stalled,
        gradient_norm,
        stationary: gradient_norm <= 1e-6 * (1.0 + scale),
    };
    Ok(FixedPointRun { outcome, start, end })
}

fn check_time_inputs(
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    a_bar: &DVector<f64>,
    params: &ChannelNoiseParams,
) -> Result<()> {
    if b.len() != g.nrows() || a_bar.len() != g.ncols() || params.channels() != g.nrows() {
        return Err(EsiError::DimensionMismatch(format!(
            "b has {} entries, G is {:?}, {} precisions, {} channel pairs",
            b.len(),
            g.shape(),
            a_bar.len(),
            params.channels()
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(EsiError::InvalidInput("observation has non-finite entries".into()));
    }
    Ok(())
}

/// Maximizes `log Q(j)` for one time point by iterating
/// `j <- (G^T Psi(j) G + diag(a))^-1 G^T Psi(j) b`, halving steps that lose ground.
pub fn j_step_fixed_point(
    b_t: &DVector<f64>,
    g: &DMatrix<f64>,
    a_bar: &DVector<f64>,
    params: &ChannelNoiseParams,
    tol: f64,
    max_iters: usize,
    init: Option<&DVector<f64>>,
) -> Result<FixedPointOutcome> {
    check_time_inputs(b_t, g, a_bar, params)?;
    if !(tol > 0.0) || max_iters == 0 {
        return Err(EsiError::InvalidInput(
            "fixed-point tolerance and cap must be positive".into(),
        ));
    }
    let basis = SystemBasis::new(g, a_bar)?;
    let start = match init {
        Some(j) if j.len() == g.ncols() => j.clone(),
        Some(j) => {
            return Err(EsiError::DimensionMismatch(format!(
                "initial iterate has {} entries for {} sources",
                j.len(),
                g.ncols()
            )))
        }
        None => DVector::zeros(g.ncols()),
    };
    Ok(run_fixed_point(&basis, a_bar, b_t, params, start, tol, max_iters)?.outcome)
}

/// Diagonal of the inverse negative Hessian of `log Q` at `j`.
pub fn laplace_covariance_diag(
    j: &DVector<f64>,
    b_t: &DVector<f64>,
    g: &DMatrix<f64>,
    a_bar: &DVector<f64>,
    params: &ChannelNoiseParams,
    mode: HessianMode,
) -> Result<DVector<f64>> {
    check_time_inputs(b_t, g, a_bar, params)?;
    let basis = SystemBasis::new(g, a_bar)?;
    let e = b_t - g * j;
    let d = match mode {
        HessianMode::GaussNewton => params.weights(&e),
        HessianMode::FullClamped => params.curvatures(&e),
    };
    Ok(basis.factor(&d)?.cov_diag())
}

/// `j^2 + variance`, elementwise.
pub fn expected_squared_source(j: &DVector<f64>, cov_diag: &DVector<f64>) -> Result<DVector<f64>> {
    if j.len() != cov_diag.len() {
        return Err(EsiError::DimensionMismatch(format!(
            "{} sources, {} variances",
            j.len(),
            cov_diag.len()
        )));
    }
    if cov_diag.iter().any(|v| !(*v >= 0.0)) {
        return Err(EsiError::InvalidInput("variances must be >= 0".into()));
    }
    Ok(j.component_mul(j) + cov_diag)
}

/// Precision update, shared with hVB.
pub fn a_step(e_j2: &DMatrix<f64>, prior: &ResolvedPrior) -> Result<GammaPosterior> {
    crate::hvb::hvb_a_step(e_j2, prior)
}

/// Upper bound on the free energy under Gaussian `Q_J` and Gamma `Q_A`:
/// the correntropy term is bounded by its tangent in `e^2` at the mode,
/// each time point's covariance is the Laplace one, and constants are dropped.
pub fn surrogate_free_energy(
    j_hat: &DMatrix<f64>,
    a_bar: &DVector<f64>,
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    params: &ChannelNoiseParams,
    prior: &ResolvedPrior,
    mode: HessianMode,
) -> Result<f64> {
    if j_hat.shape() != (g.ncols(), b.ncols()) {
        return Err(EsiError::DimensionMismatch(format!(
            "J is {:?}, expected {}x{}",
            j_hat.shape(),
            g.ncols(),
            b.ncols()
        )));
    }
    let basis = SystemBasis::new(g, a_bar)?;
    let mut total = prior.precision_energy(a_bar);
    for t in 0..b.ncols() {
        let b_t = b.column(t).into_owned();
        check_time_inputs(&b_t, g, a_bar, params)?;
        let it = Iterate::at(&basis, a_bar, &b_t, params, j_hat.column(t).into_owned())?;
        total += it.energy(&basis, params, mode)?.0;
    }
    Ok(total)
}

/// Warm-start summary carried into the robust fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartSummary {
    pub iterations: usize,
    pub converged: bool,
    pub beta_bar: f64,
    pub final_objective: f64,
    /// Per-channel residual standard deviation.
    pub residual_std: Vec<f64>,
    /// Per-channel residual kurtosis `m4 / m2^2`.
    pub residual_kurtosis: Vec<f64>,
}

fn kurtosis(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let m2 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = row.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 > 0.0 {
        m4 / (m2 * m2)
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChvbState {
    /// Columns are the Laplace modes.
    pub j_hat: DMatrix<f64>,
    pub gamma_post: GammaPosterior,
    pub channel_params: ChannelNoiseParams,
    pub channel_fits: Vec<ChannelFit>,
    /// `E[J^2]`, N x T.
    pub e_j2: DMatrix<f64>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    /// Time-point solves that hit the cap or stalled, summed over iterations.
    pub fixed_point_warnings: usize,
    /// Fixed-point iterations summed over time points and outer iterations.
    pub fixed_point_iterations: usize,
    /// Time-point updates rejected because they raised the free energy.
    pub rejected_updates: usize,
    pub warm_start: WarmStartSummary,
}

/// Runs hVB, then the robust iterations from its result.
pub fn chvb_fit(b: &DMatrix<f64>, g: &Leadfield, cfg: &ChvbConfig) -> Result<ChvbState> {
    cfg.validate(g.sensors(), g.sources())?;
    let warm = hvb_fit(b, g, &cfg.hvb).map_err(|e| e.in_stage("hvb warm start"))?;
    chvb_fit_from(b, g, cfg, &warm)
}

/// The robust iterations starting from an existing hVB fit of the same data.
pub fn chvb_fit_from(b: &DMatrix<f64>, g: &Leadfield, cfg: &ChvbConfig, warm: &HvbState) -> Result<ChvbState> {
    let gm = g.matrix();
    let (m, n) = gm.shape();
    let t_len = b.ncols();
    cfg.validate(m, n)?;
    if b.nrows() != m || t_len == 0 {
        return Err(EsiError::DimensionMismatch(format!(
            "observations are {:?}, leadfield has {m} channels",
            b.shape()
        )));
    }
    if warm.j_hat.shape() != (n, t_len) {
        return Err(EsiError::DimensionMismatch(format!(
            "warm start is {:?}, expected {n}x{t_len}",
            warm.j_hat.shape()
        )));
    }

    let resid = residuals(b, gm, &warm.j_hat).map_err(|e| e.in_stage("residuals"))?;
    let mut fits =
        score_match_channels(&resid, &cfg.score_match, cfg.pooling).map_err(|e| e.in_stage("score matching"))?;
    if cfg.noise_scale != NoiseScale::Residual {
        let a_bar = warm.gamma_post.a_bar_vector();
        let (fitted, leverage) = hvb_fit_uncertainty(gm, &a_bar, warm.beta_bar, cfg.hvb.phi.as_ref())
            .map_err(|e| e.in_stage("score matching"))?;
        let factors = match cfg.noise_scale {
            NoiseScale::Posterior => DVector::from_fn(m, |i, _| 1.0 + fitted[i] / (fits[i].scale * fits[i].scale)),
            _ => leverage.map(|h| 1.0 / (1.0 - h).max(f64::EPSILON)),
        };
        inflate_noise_variance(&mut fits, &factors, &cfg.score_match).map_err(|e| e.in_stage("score matching"))?;
    }
    if let Some(bad) = fits.iter().find(|f| f.params.is_none()) {
        let msg = bad.error.clone().unwrap_or_default();
        return Err(EsiError::Degenerate(format!("channel {}: {msg}", bad.channel)).in_stage("score matching"));
    }
    let params = ChannelNoiseParams::new(fits.iter().map(|f| f.params.expect("checked")).collect())?;
    let warm_summary = WarmStartSummary {
        iterations: warm.iterations,
        converged: warm.converged,
        beta_bar: warm.beta_bar,
        final_objective: warm.objective_trace.last().copied().unwrap_or(f64::NAN),
        residual_std: fits.iter().map(|f| f.scale).collect(),
        residual_kurtosis: resid
            .row_iter()
            .map(|r| kurtosis(&r.iter().copied().collect::<Vec<_>>()))
            .collect(),
    };

    let run = chvb_iterate(b, gm, cfg, &params, &warm.j_hat, &warm.gamma_post)?;
    Ok(ChvbState {
        j_hat: run.j_hat,
        gamma_post: run.gamma_post,
        channel_params: params,
        channel_fits: fits,
        e_j2: run.e_j2,
        objective_trace: run.objective_trace,
        converged: run.converged,
        outer_iterations: run.outer_iterations,
        fixed_point_warnings: run.fixed_point_warnings,
        fixed_point_iterations: run.fixed_point_iterations,
        rejected_updates: run.rejected_updates,
        warm_start: warm_summary,
    })
}

/// Result of the alternating J/A iterations with fixed channel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustIterations {
    pub j_hat: DMatrix<f64>,
    pub gamma_post: GammaPosterior,
    pub e_j2: DMatrix<f64>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub fixed_point_warnings: usize,
    pub fixed_point_iterations: usize,
    pub rejected_updates: usize,
}

/// Alternates J-steps and A-steps from `(j_init, a_init)` under fixed channel parameters.
pub fn chvb_iterate(
    b: &DMatrix<f64>,
    gm: &DMatrix<f64>,
    cfg: &ChvbConfig,
    params: &ChannelNoiseParams,
    j_init: &DMatrix<f64>,
    a_init: &GammaPosterior,
) -> Result<RobustIterations> {
    let (m, n) = gm.shape();
    let t_len = b.ncols();
    cfg.validate(m, n)?;
    if b.nrows() != m || t_len == 0 || params.channels() != m {
        return Err(EsiError::DimensionMismatch(format!(
            "observations are {:?}, leadfield has {m} channels, {} channel pairs",
            b.shape(),
            params.channels()
        )));
    }
    if j_init.shape() != (n, t_len) || a_init.a_bar.len() != n {
        return Err(EsiError::DimensionMismatch(format!(
            "initial J is {:?} with {} precisions, expected {n}x{t_len}",
            j_init.shape(),
            a_init.a_bar.len()
        )));
    }
    let data_scale = b.norm_squared() / t_len as f64;
    let prior = ResolvedPrior::resolve(&cfg.hvb.prior, &cfg.hvb.a0, cfg.hvb.a_max, gm, data_scale, t_len)?;
    let columns: Vec<DVector<f64>> = (0..t_len).map(|t| b.column(t).into_owned()).collect();
    let mut j_hat = j_init.clone();
    let mut a_bar = a_init.a_bar_vector();
    let mut gamma_post = a_init.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut outer_iterations = 0;
    let mut warnings = 0;
    let mut inner_total = 0;
    let mut rejected = 0;
    let mode = cfg.hessian_mode;
    let j_stage = |e: EsiError| e.in_stage("J-step");

    loop {
        let basis = SystemBasis::new(gm, &a_bar).map_err(j_stage)?;
        let finishing = outer_iterations == cfg.outer_max_iters;
        let mut f = prior.precision_energy(&a_bar);
        let mut next = DMatrix::zeros(n, t_len);
        let mut acc = CovDiagSum::for_basis(&basis);
        for (t, b_t) in columns.iter().enumerate() {
            let j_prev = j_hat.column(t).into_owned();
            if finishing {
                let it = Iterate::at(&basis, &a_bar, b_t, params, j_prev).map_err(j_stage)?;
                f += it.energy(&basis, params, mode).map_err(j_stage)?.0;
                continue;
            }
            let run = run_fixed_point(
                &basis,
                &a_bar,
                b_t,
                params,
                j_prev,
                cfg.fixed_point_tol,
                cfg.fixed_point_max_iters,
            )
            .map_err(j_stage)?;
            inner_total += run.outcome.iterations;
            if !run.outcome.converged {
                warnings += 1;
            }
            let (start_energy, start_laplace) = run.start.energy(&basis, params, mode).map_err(j_stage)?;
            f += start_energy;
            // keep the update only if this time point's free energy does not rise
            let mut chosen = None;
            if let Some(end) = run.end {
                let (end_energy, end_laplace) = end.energy(&basis, params, mode).map_err(j_stage)?;
                if end_energy <= start_energy || !cfg.safeguard {
                    chosen = Some((end, end_laplace));
                } else {
                    let step = &end.j - &run.start.j;
                    let mut scale = 0.5;
                    for _ in 0..MAX_HALVINGS {
                        let cand = &run.start.j + &step * scale;
                        let it = Iterate::at(&basis, &a_bar, b_t, params, cand).map_err(j_stage)?;
                        let (energy, laplace) = it.energy(&basis, params, mode).map_err(j_stage)?;
                        if energy <= start_energy {
                            chosen = Some((it, laplace));
                            break;
                        }
                        scale *= 0.5;
                    }
                    rejected += 1;
                }
            }
            let (it, laplace) = chosen.unwrap_or((run.start, start_laplace));
            laplace.as_ref().unwrap_or(&it.factor).accumulate_cov_diag(&mut acc);
            next.set_column(t, &it.j);
        }

        let done = trace
            .last()
            .is_some_and(|&prev| (prev - f).abs() <= cfg.outer_rel_tol * f.abs());
        trace.push(f);
        if done || finishing {
            let mut e_j2 = DMatrix::zeros(n, t_len);
            for (t, b_t) in columns.iter().enumerate() {
                let j_t = j_hat.column(t).into_owned();
                let it = Iterate::at(&basis, &a_bar, b_t, params, j_t.clone()).map_err(j_stage)?;
                let (_, laplace) = it.energy(&basis, params, mode).map_err(j_stage)?;
                let cov = laplace.as_ref().unwrap_or(&it.factor).cov_diag();
                e_j2.set_column(t, &expected_squared_source(&j_t, &cov)?);
            }
            return Ok(RobustIterations {
                j_hat,
                gamma_post,
                e_j2,
                objective_trace: trace,
                converged: done,
                outer_iterations,
                fixed_point_warnings: warnings,
                fixed_point_iterations: inner_total,
                rejected_updates: rejected,
            });
        }

        let cov_sum = acc.finish(&basis);
        j_hat = next;
        let mean_e_j2 = DVector::from_fn(n, |i, _| (j_hat.row(i).norm_squared() + cov_sum[i]) / t_len as f64);
        gamma_post = a_step_from_mean(&mean_e_j2, &prior).map_err(|e| e.in_stage("A-step"))?;
        a_bar = gamma_post.a_bar_vector();
        outer_iterations += 1;
    }
}
