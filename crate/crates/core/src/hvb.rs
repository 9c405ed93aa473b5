//! Hierarchical variational Bayes with a Gaussian likelihood and Gamma
//! (ARD) priors on per-source precisions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EsiError, Result};
use crate::linalg::SystemBasis;
use crate::sim::Leadfield;

/// Strength of the Gamma prior, either as its degree of freedom or as the
/// equivalent mixing weight `w = gamma0 / (gamma0 + T/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorStrength {
    Gamma0(f64),
    Weight(f64),
}

impl Default for PriorStrength {
    fn default() -> Self {
        PriorStrength::Gamma0(0.0)
    }
}

/// Prior mean precisions `a0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorMeans {
    /// One value for every source: `||G||_F^2 / mean_t ||b_t||^2` (whitened).
    #[default]
    DataScaled,
    Uniform(f64),
    PerSource(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HvbConfig {
    pub prior: PriorStrength,
    pub a0: PriorMeans,
    /// Normalized noise precision (trace M); identity when absent.
    #[serde(skip)]
    pub phi: Option<DMatrix<f64>>,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub a_max: f64,
    /// Starting noise precision; `M / mean_t ||b_t||^2` when absent.
    pub initial_beta: Option<f64>,
}

impl Default for HvbConfig {
    fn default() -> Self {
        Self {
            prior: PriorStrength::default(),
            a0: PriorMeans::default(),
            phi: None,
            max_iters: 500,
            rel_tol: 1e-6,
            a_max: 1e12,
            initial_beta: None,
        }
    }
}

impl HvbConfig {
    pub fn validate(&self, sensors: usize, sources: usize) -> Result<()> {
        if self.max_iters == 0 {
            return Err(EsiError::InvalidInput("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(EsiError::InvalidInput("rel_tol must be positive".into()));
        }
        validate_prior(&self.prior, &self.a0, self.a_max, sources)?;
        if let Some(b) = self.initial_beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(EsiError::InvalidInput("initial_beta must be positive".into()));
            }
        }
        if let Some(phi) = &self.phi {
            if phi.shape() != (sensors, sensors) {
                return Err(EsiError::DimensionMismatch(format!(
                    "phi is {:?}, expected {sensors}x{sensors}",
                    phi.shape()
                )));
            }
            if (phi.trace() - sensors as f64).abs() > 1e-6 {
                return Err(EsiError::InvalidInput(format!(
                    "phi must have trace {sensors}, got {}",
                    phi.trace()
                )));
            }
            if (phi - phi.transpose()).abs().max() > 1e-10 * phi.abs().max() {
                return Err(EsiError::InvalidInput("phi must be symmetric".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_prior(prior: &PriorStrength, a0: &PriorMeans, a_max: f64, sources: usize) -> Result<()> {
    match *prior {
        PriorStrength::Gamma0(g) if !(g >= 0.0 && g.is_finite()) => {
            return Err(EsiError::InvalidInput(format!("gamma0 must be >= 0, got {g}")));
        }
        PriorStrength::Weight(w) if !(0.0..1.0).contains(&w) => {
            return Err(EsiError::InvalidInput(format!(
                "prior weight must lie in [0, 1), got {w}"
            )));
        }
        _ => {}
    }
    match a0 {
        PriorMeans::DataScaled => {}
        PriorMeans::Uniform(v) => {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(EsiError::InvalidInput("a0 must be positive".into()));
            }
        }
        PriorMeans::PerSource(v) => {
            if v.len() != sources {
                return Err(EsiError::DimensionMismatch(format!(
                    "{} prior means for {sources} sources",
                    v.len()
                )));
            }
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(EsiError::InvalidInput("a0 entries must be positive".into()));
            }
        }
    }
    if !(a_max > 0.0) {
        return Err(EsiError::InvalidInput("a_max must be positive".into()));
    }
    Ok(())
}

/// The Gamma prior with `T` known: means, weight and both degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPrior {
    pub a0: DVector<f64>,
    pub weight: f64,
    pub gamma0: f64,
    pub gamma_bar: f64,
    pub a_max: f64,
}

impl ResolvedPrior {
    /// `data_scale` is `mean_t ||b_t||^2` of the (whitened) data.
    pub(crate) fn resolve(
        prior: &PriorStrength,
        a0: &PriorMeans,
        a_max: f64,
        g: &DMatrix<f64>,
        data_scale: f64,
        samples: usize,
    ) -> Result<Self> {
        let half_t = samples as f64 / 2.0;
        let (weight, gamma0) = match *prior {
            PriorStrength::Gamma0(g0) => (g0 / (g0 + half_t), g0),
            PriorStrength::Weight(w) => (w, w * half_t / (1.0 - w)),
        };
        let n = g.ncols();
        let a0 = match a0 {
            PriorMeans::DataScaled => {
                if !(data_scale > 0.0) {
                    return Err(EsiError::Degenerate("observations are identically zero".into()));
                }
                DVector::from_element(n, g.norm_squared() / data_scale)
            }
            PriorMeans::Uniform(v) => DVector::from_element(n, *v),
            PriorMeans::PerSource(v) => DVector::from_column_slice(v),
        };
        Ok(Self {
            a0,
            weight,
            gamma0,
            gamma_bar: gamma0 + half_t,
            a_max,
        })
    }

    /// `sum_n [a_n gamma0 / a0_n - gamma_bar ln a_n]`.
    pub(crate) fn precision_energy(&self, a_bar: &DVector<f64>) -> f64 {
        a_bar
            .iter()
            .zip(self.a0.iter())
            .map(|(a, a0)| a * self.gamma0 / a0 - self.gamma_bar * a.ln())
            .sum()
    }
}

/// Posterior mean precisions of the sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    pub a_bar: Vec<f64>,
    pub gamma_bar: f64,
}

impl GammaPosterior {
    pub fn a_bar_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.a_bar)
    }
}

/// Precision update from the time-averaged `E[J^2]` of every source.
pub(crate) fn a_step_from_mean(mean_e_j2: &DVector<f64>, prior: &ResolvedPrior) -> Result<GammaPosterior> {
    if mean_e_j2.len() != prior.a0.len() {
        return Err(EsiError::DimensionMismatch(format!(
            "{} expected powers for {} sources",
            mean_e_j2.len(),
            prior.a0.len()
        )));
    }
    if mean_e_j2.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(EsiError::InvalidInput("E[J^2] must be finite and >= 0".into()));
    }
    let w = prior.weight;
    let a_bar = mean_e_j2
        .iter()
        .zip(prior.a0.iter())
        .map(|(m, a0)| {
            let inv = w / a0 + (1.0 - w) * m;
            if inv > 0.0 {
                (1.0 / inv).min(prior.a_max)
            } else {
                prior.a_max
            }
        })
        .collect();
    Ok(GammaPosterior {
        a_bar,
        gamma_bar: prior.gamma_bar,
    })
}

/// Precision update from an N x T matrix of `E[J^2]`.
pub fn hvb_a_step(e_j2: &DMatrix<f64>, prior: &ResolvedPrior) -> Result<GammaPosterior> {
    if e_j2.ncols() == 0 {
        return Err(EsiError::InvalidInput("E[J^2] has no time samples".into()));
    }
    let mean = e_j2.column_mean();
    a_step_from_mean(&mean, prior)
}

/// Gaussian posterior of the sources for fixed precisions and noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub j_hat: DMatrix<f64>,
    /// Diagonal of the covariance, shared by every time point.
    pub cov_diag: DVector<f64>,
    /// `tr(Phi G Sigma G^T)`.
    pub fitted_trace: f64,
    /// `ln det` of the posterior precision.
    pub log_det_precision: f64,
}

impl GaussianPosterior {
    /// `E[J^2] = J_hat^2 + diag(Sigma)` per entry.
    pub fn expected_squares(&self) -> DMatrix<f64> {
        let mut out = self.j_hat.component_mul(&self.j_hat);
        for mut col in out.column_iter_mut() {
            col += &self.cov_diag;
        }
        out
    }
}

/// `G` and `B` premultiplied by `L^T` where `Phi = L L^T`.
pub(crate) struct Whitened {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `L^T` with `Phi = L L^T`; `None` for the identity.
    pub lt: Option<DMatrix<f64>>,
}

pub(crate) fn whiten(b: &DMatrix<f64>, g: &DMatrix<f64>, phi: Option<&DMatrix<f64>>) -> Result<Whitened> {
    match phi {
        None => Ok(Whitened {
            g: g.clone(),
            b: b.clone(),
            lt: None,
        }),
        Some(phi) => {
            let chol = nalgebra::Cholesky::new(phi.clone()).ok_or_else(|| EsiError::Numerical {
                message: "phi is not positive definite".into(),
                condition: crate::linalg::condition_estimate(phi),
            })?;
            let lt = chol.l().transpose();
            Ok(Whitened {
                g: &lt * g,
                b: &lt * b,
                lt: Some(lt),
            })
        }
    }
}

fn check_dims(b: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<()> {
    if b.nrows() != g.nrows() {
        return Err(EsiError::DimensionMismatch(format!(
            "observations have {} channels, leadfield has {}",
            b.nrows(),
            g.nrows()
        )));
    }
    if b.ncols() == 0 {
        return Err(EsiError::InvalidInput("observations have no time samples".into()));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(EsiError::InvalidInput("observations have non-finite entries".into()));
    }
    Ok(())
}

fn whitened_j_step(w: &Whitened, a_bar: &DVector<f64>, beta: f64) -> Result<GaussianPosterior> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(EsiError::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    let basis = SystemBasis::new(&w.g, a_bar)?;
    let d = DVector::from_element(w.g.nrows(), beta);
    let f = basis.factor(&d)?;
    Ok(GaussianPosterior {
        j_hat: f.solve_data(&w.b),
        cov_diag: f.cov_diag(),
        fitted_trace: f.fitted_cov_diag().sum(),
        log_det_precision: f.log_det(),
    })
}

/// Solves `(G^T beta Phi G + diag(a)) j_t = G^T beta Phi b_t` for every column.
pub fn hvb_j_step(
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    a_bar: &DVector<f64>,
    beta: f64,
    phi: Option<&DMatrix<f64>>,
) -> Result<GaussianPosterior> {
    check_dims(b, g)?;
    let w = whiten(b, g, phi)?;
    whitened_j_step(&w, a_bar, beta)
}

fn whitened_residual_energy(w: &Whitened, j_hat: &DMatrix<f64>) -> f64 {
    (&w.b - &w.g * j_hat).norm_squared()
}

/// Posterior variance of the fitted signal on each channel, `diag(G Sigma G^T)`,
/// and the leverages `diag(beta G Sigma G^T Phi)`, with `Sigma = (beta G^T Phi G + diag(a))^-1`.
pub fn hvb_fit_uncertainty(
    g: &DMatrix<f64>,
    a_bar: &DVector<f64>,
    beta: f64,
    phi: Option<&DMatrix<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(EsiError::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    let w = whiten(&DMatrix::zeros(g.nrows(), 0), g, phi)?;
    let basis = SystemBasis::new(&w.g, a_bar)?;
    let f = basis.factor(&DVector::from_element(g.nrows(), beta))?;
    match (&w.lt, phi) {
        (Some(lt), Some(phi)) => {
            // G = L^-T G_w, so G Sigma G^T = P (G_w Sigma G_w^T) P^T with P = L^-T
            let p = lt.clone().try_inverse().ok_or_else(|| EsiError::Numerical {
                message: "phi factor is singular".into(),
                condition: f64::INFINITY,
            })?;
            let fitted = &p * f.fitted_cov() * p.transpose();
            let leverage = (&fitted * phi).diagonal() * beta;
            Ok((fitted.diagonal(), leverage))
        }
        _ => {
            let fitted = f.fitted_cov_diag();
            let leverage = &fitted * beta;
            Ok((fitted, leverage))
        }
    }
}

/// `MT / sum_t E[(b_t - G j_t)^T Phi (b_t - G j_t)]`.
pub fn hvb_beta_step(
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    post: &GaussianPosterior,
    phi: Option<&DMatrix<f64>>,
) -> Result<f64> {
    check_dims(b, g)?;
    let w = whiten(b, g, phi)?;
    beta_from_energy(whitened_residual_energy(&w, &post.j_hat), post, b.nrows(), b.ncols())
}

fn expected_energy(point: f64, post: &GaussianPosterior, samples: usize) -> f64 {
    point + samples as f64 * post.fitted_trace
}

fn beta_from_energy(point: f64, post: &GaussianPosterior, sensors: usize, samples: usize) -> Result<f64> {
    let energy = expected_energy(point, post, samples);
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(EsiError::Degenerate(format!(
            "expected residual energy is {energy}; the fit is exact"
        )));
    }
    Ok((sensors * samples) as f64 / energy)
}

/// `B - G J_hat`.
pub fn residuals(b: &DMatrix<f64>, g: &DMatrix<f64>, j_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != g.nrows() || g.ncols() != j_hat.nrows() || b.ncols() != j_hat.ncols() {
        return Err(EsiError::DimensionMismatch(format!(
            "B {:?}, G {:?}, J {:?}",
            b.shape(),
            g.shape(),
            j_hat.shape()
        )));
    }
    Ok(b - g * j_hat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HvbState {
    pub j_hat: DMatrix<f64>,
    pub gamma_post: GammaPosterior,
    pub beta_bar: f64,
    /// Posterior variances, N x T; every column is the same.
    pub cov_diag: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

/// Negative free energy terms that vary with the iterates.
fn free_energy(
    beta: f64,
    energy: f64,
    sensors: usize,
    samples: usize,
    a_bar: &DVector<f64>,
    post: &GaussianPosterior,
    prior: &ResolvedPrior,
) -> f64 {
    let mt = (sensors * samples) as f64;
    let t = samples as f64;
    let source_power: f64 = a_bar
        .iter()
        .enumerate()
        .map(|(n, a)| {
            let row = post.j_hat.row(n);
            a * 0.5 * (row.norm_squared() + t * post.cov_diag[n])
        })
        .sum();
    0.5 * beta * energy - 0.5 * mt * beta.ln()
        + source_power
        + prior.precision_energy(a_bar)
        + 0.5 * t * post.log_det_precision
}

pub fn hvb_fit(b: &DMatrix<f64>, g: &Leadfield, cfg: &HvbConfig) -> Result<HvbState> {
    let g = g.matrix();
    check_dims(b, g)?;
    let (m, n) = g.shape();
    let t = b.ncols();
    cfg.validate(m, n)?;
    let w = whiten(b, g, cfg.phi.as_ref())?;
    let data_scale = w.b.norm_squared() / t as f64;
    if !(data_scale > 0.0) {
        return Err(EsiError::Degenerate("observations are identically zero".into()));
    }
    let prior = ResolvedPrior::resolve(&cfg.prior, &cfg.a0, cfg.a_max, &w.g, data_scale, t)?;
    let mut a_bar = prior.a0.map(|a| a.min(cfg.a_max));
    let mut beta = cfg.initial_beta.unwrap_or(m as f64 / data_scale);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut post = None;
    let mut gamma_post = None;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let p = whitened_j_step(&w, &a_bar, beta)?;
        let g_post = a_step_from_mean(&mean_expected_squares(&p), &prior)?;
        let energy = expected_energy(whitened_residual_energy(&w, &p.j_hat), &p, t);
        beta = beta_from_energy(whitened_residual_energy(&w, &p.j_hat), &p, m, t)?;
        let new_a = g_post.a_bar_vector();
        let f = free_energy(beta, energy, m, t, &new_a, &p, &prior);
        a_bar = new_a;
        post = Some(p);
        gamma_post = Some(g_post);
        let done = trace
            .last()
            .is_some_and(|&prev: &f64| (prev - f).abs() <= cfg.rel_tol * f.abs());
        trace.push(f);
        if done {
            converged = true;
            break;
        }
    }
    let post = post.expect("max_iters >= 1");
    let gamma_post = gamma_post.expect("max_iters >= 1");
    let cov_diag = DMatrix::from_fn(n, t, |i, _| post.cov_diag[i]);
    Ok(HvbState {
        j_hat: post.j_hat,
        gamma_post,
        beta_bar: beta,
        cov_diag,
        converged,
        iterations,
        objective_trace: trace,
    })
}

fn mean_expected_squares(p: &GaussianPosterior) -> DVector<f64> {
    let t = p.j_hat.ncols() as f64;
    DVector::from_fn(p.j_hat.nrows(), |n, _| {
        p.j_hat.row(n).norm_squared() / t + p.cov_diag[n]
    })
}
