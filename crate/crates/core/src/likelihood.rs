//! Correntropy-induced improper noise density and score-matching estimation
//! of its hyperparameters.
//!
//! The density is `C(e | h, eta) = exp(h * exp(-eta e^2 / (2h)) - h)`. It cannot
//! be normalized (it tends to `exp(-h) > 0` in the tails), so `(h, eta)` are
//! fitted by minimizing the empirical H-score, which only involves the first
//! two derivatives of `log C`.
//!
//! For large `h` the density approaches `exp(-eta e^2 / 2)`, and maximizing
//! `sum log C(e_i)` over a location is the same problem as maximizing the
//! correntropy `sum exp(-e_i^2 / (2 h_c))` with bandwidth `h_c = h / eta`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, EsiError, Result};

/// Robustness parameter `h` and dispersion parameter `eta`, both positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrentropyParams {
    h: f64,
    eta: f64,
}

impl CorrentropyParams {
    pub fn new(h: f64, eta: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(EsiError::InvalidInput(format!(
                "robustness parameter h must be positive and finite, got {h}"
            )));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(EsiError::InvalidInput(format!(
                "dispersion parameter eta must be positive and finite, got {eta}"
            )));
        }
        Ok(Self { h, eta })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Equivalent correntropy kernel bandwidth `h / eta`.
    pub fn bandwidth(&self) -> f64 {
        self.h / self.eta
    }

    #[inline]
    fn exponent(&self, e: f64) -> f64 {
        self.eta * e * e / (2.0 * self.h)
    }

    /// `log C(e)`, computed with `expm1` so the Gaussian limit keeps full precision.
    #[inline]
    pub(crate) fn log_density_at(&self, e: f64) -> f64 {
        self.h * (-self.exponent(e)).exp_m1()
    }

    #[inline]
    pub(crate) fn score_at(&self, e: f64) -> f64 {
        -self.eta * e * (-self.exponent(e)).exp()
    }

    #[inline]
    pub(crate) fn second_derivative_at(&self, e: f64) -> f64 {
        let u = (-self.exponent(e)).exp();
        (self.eta * self.eta * e * e / self.h - self.eta) * u
    }

    #[inline]
    pub(crate) fn hscore_at(&self, e: f64) -> f64 {
        let s = self.score_at(e);
        2.0 * self.second_derivative_at(e) + s * s
    }

    /// Fixed-point weight `eta * exp(-eta e^2 / (2h))`; lies in `(0, eta]`
    /// and shrinks as `|e|` grows.
    #[inline]
    pub fn weight(&self, e: f64) -> f64 {
        self.eta * (-self.exponent(e)).exp()
    }

    /// Negative second derivative of `log C` clamped at zero.
    #[inline]
    pub fn clamped_curvature(&self, e: f64) -> f64 {
        (-self.second_derivative_at(e)).max(0.0)
    }
}

/// `log C(e | h, eta) = h exp(-eta e^2 / (2h)) - h`, in `(-h, 0]`.
pub fn log_density(e: f64, p: &CorrentropyParams) -> Result<f64> {
    ensure_finite(e, "residual")?;
    Ok(p.log_density_at(e))
}

/// First derivative of `log C` with respect to `e`.
pub fn score(e: f64, p: &CorrentropyParams) -> Result<f64> {
    ensure_finite(e, "residual")?;
    Ok(p.score_at(e))
}

/// Second derivative of `log C` with respect to `e`:
/// `(eta^2 e^2 / h - eta) exp(-eta e^2 / (2h))`.
pub fn second_derivative(e: f64, p: &CorrentropyParams) -> Result<f64> {
    ensure_finite(e, "residual")?;
    Ok(p.second_derivative_at(e))
}

/// H-score `2 d2/de2 log C + (d/de log C)^2`.
pub fn hscore(e: f64, p: &CorrentropyParams) -> Result<f64> {
    ensure_finite(e, "residual")?;
    Ok(p.hscore_at(e))
}

/// Residuals of one channel, pooled over time.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    values: Vec<f64>,
}

impl ResidualSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(EsiError::InvalidInput(format!(
                "residual sample needs at least 2 values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(EsiError::InvalidInput(format!("non-finite residual {bad}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Unbiased sample variance about the sample mean.
    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    }
}

/// Mean H-score of the sample under `p`.
pub fn empirical_hscore(sample: &ResidualSample, p: &CorrentropyParams) -> f64 {
    let sum: f64 = sample.values.iter().map(|&e| p.hscore_at(e)).sum();
    sum / sample.values.len() as f64
}

/// Starting points for the multi-start optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitGrid {
    /// Cartesian product `h x (factor / v)` where `v` is the sample variance.
    VarianceScaled { h: Vec<f64>, eta_factors: Vec<f64> },
    /// Explicit `(h, eta)` pairs.
    Explicit(Vec<(f64, f64)>),
}

impl Default for InitGrid {
    fn default() -> Self {
        InitGrid::VarianceScaled {
            h: vec![0.5, 5.0, 50.0, 500.0],
            eta_factors: vec![0.1, 1.0, 10.0],
        }
    }
}

impl InitGrid {
    fn points(&self, variance: f64) -> Vec<(f64, f64)> {
        match self {
            InitGrid::VarianceScaled { h, eta_factors } => h
                .iter()
                .flat_map(|&h| eta_factors.iter().map(move |&f| (h, f / variance)))
                .collect(),
            InitGrid::Explicit(points) => points.clone(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            InitGrid::VarianceScaled { h, eta_factors } => h.is_empty() || eta_factors.is_empty(),
            InitGrid::Explicit(points) => points.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreMatchConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub init_grid: InitGrid,
    /// The kernel width `sqrt(h / eta)` may not drop below this multiple of the
    /// robust scale `1.4826 * median |e|`; 0 disables the floor.
    /// Narrower kernels fit the handful of samples nearest zero and win on noise alone.
    pub kernel_floor: f64,
}

impl Default for ScoreMatchConfig {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            rel_tol: 1e-10,
            h_min: 1e-2,
            h_max: 1e8,
            eta_min: 1e-8,
            eta_max: 1e8,
            init_grid: InitGrid::default(),
            kernel_floor: 0.1,
        }
    }
}

impl ScoreMatchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.h_min, self.h_max, self.eta_min, self.eta_max, self.rel_tol];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EsiError::InvalidInput(
                "score-matching clamps and tolerance must be positive and finite".into(),
            ));
        }
        if self.h_min >= self.h_max || self.eta_min >= self.eta_max {
            return Err(EsiError::InvalidInput(format!(
                "empty clamp box h in [{}, {}], eta in [{}, {}]",
                self.h_min, self.h_max, self.eta_min, self.eta_max
            )));
        }
        if !(self.kernel_floor >= 0.0 && self.kernel_floor.is_finite()) {
            return Err(EsiError::InvalidInput("kernel_floor must be finite and >= 0".into()));
        }
        if self.max_iters == 0 {
            return Err(EsiError::InvalidInput("max_iters must be at least 1".into()));
        }
        if self.init_grid.is_empty() {
            return Err(EsiError::InvalidInput("init_grid is empty".into()));
        }
        Ok(())
    }
}

/// One optimizer run from a single starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatchRun {
    pub start: (f64, f64),
    pub params: CorrentropyParams,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every completed iteration, starting with the initial value.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatchFit {
    pub params: CorrentropyParams,
    pub objective: f64,
    /// The winning run stopped on the tolerance rather than the iteration cap.
    pub converged: bool,
    /// The winning point sits on one of the clamps or on the kernel floor.
    pub at_bound: bool,
    /// Smallest admissible kernel width; 0 when unconstrained.
    pub kernel_floor: f64,
    pub runs: Vec<ScoreMatchRun>,
}

/// `kernel_floor * 1.4826 * median |e|`.
fn kernel_floor(values: &[f64], cfg: &ScoreMatchConfig) -> f64 {
    if cfg.kernel_floor == 0.0 {
        return 0.0;
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let mid = abs.len() / 2;
    let (_, upper, _) = abs.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if abs.len() % 2 == 1 {
        upper
    } else {
        let lower = abs[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    cfg.kernel_floor * 1.4826 * median
}

/// Empirical H-score and its gradient in `(log h, log eta)`.
struct HscoreObjective<'a> {
    squares: &'a [f64],
}

impl HscoreObjective<'_> {
    fn eval(&self, log_h: f64, log_eta: f64) -> (f64, [f64; 2]) {
        let h = log_h.exp();
        let eta = log_eta.exp();
        let (mut value, mut d_h, mut d_eta) = (0.0, 0.0, 0.0);
        for &e2 in self.squares {
            let x = eta * e2 / (2.0 * h);
            let u = (-x).exp();
            let eu = eta * u;
            let s2 = eta * eta * e2 * u * u;
            value += 2.0 * eu * (2.0 * x - 1.0) + s2;
            d_h += 2.0 * eu * x * (2.0 * x - 3.0) + 2.0 * s2 * x;
            d_eta += 2.0 * eu * (x * (5.0 - 2.0 * x) - 1.0) + 2.0 * s2 * (1.0 - x);
        }
        let n = self.squares.len() as f64;
        (value / n, [d_h / n, d_eta / n])
    }
}

struct Bounds {
    lo: [f64; 2],
    hi: [f64; 2],
    /// Upper limit on `log eta - log h`; infinite without a kernel floor.
    max_gap: f64,
}

impl Bounds {
    /// Clamps one coordinate given the other; the box wins over the floor.
    fn clamp(&self, coord: usize, v: f64, other: f64) -> f64 {
        let (lo, hi) = if coord == 1 {
            (self.lo[1], (other + self.max_gap).min(self.hi[1]).max(self.lo[1]))
        } else {
            ((other - self.max_gap).max(self.lo[0]).min(self.hi[0]), self.hi[0])
        };
        v.clamp(lo, hi)
    }

    fn on_floor(&self, x: [f64; 2]) -> bool {
        self.max_gap.is_finite() && (x[1] - x[0] - self.max_gap).abs() < 1e-12
    }
}

const MAX_HALVINGS: usize = 60;

fn run_from(
    objective: &HscoreObjective<'_>,
    start: (f64, f64),
    bounds: &Bounds,
    cfg: &ScoreMatchConfig,
) -> ScoreMatchRun {
    // coordinates: 0 = log h, 1 = log eta
    let log_h = start.0.ln().clamp(bounds.lo[0], bounds.hi[0]);
    let mut x = [log_h, bounds.clamp(1, start.1.ln(), log_h)];
    let (mut f, mut grad) = objective.eval(x[0], x[1]);
    let mut trace = vec![f];
    let mut steps: [Option<f64>; 2] = [None, None];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let f_start = f;
        // eta first: it sets the scale, h then shapes the tails
        for coord in [1, 0] {
            let g = grad[coord];
            if g == 0.0 || !g.is_finite() {
                continue;
            }
            let mut step = steps[coord].unwrap_or(1.0 / g.abs());
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let moved = bounds.clamp(coord, x[coord] - step * g, x[1 - coord]);
                if moved == x[coord] {
                    break;
                }
                let mut cand = x;
                cand[coord] = moved;
                let (fc, gc) = objective.eval(cand[0], cand[1]);
                if fc <= f {
                    x = cand;
                    f = fc;
                    grad = gc;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            steps[coord] = Some(if accepted { step * 2.0 } else { step });
        }
        trace.push(f);
        if (f_start - f).abs() <= cfg.rel_tol * f_start.abs() {
            converged = true;
            break;
        }
    }

    ScoreMatchRun {
        start,
        params: CorrentropyParams {
            h: x[0].exp(),
            eta: x[1].exp(),
        },
        objective: f,
        iterations,
        converged,
        trace,
    }
}

/// Fits `(h, eta)` to a residual sample by minimizing the empirical H-score.
///
/// Alternating coordinate gradient descent on `(log h, log eta)` with a
/// backtracking step, restarted from every point of `cfg.init_grid`; the run
/// with the lowest objective wins. The result always lies inside the clamps
/// and respects the kernel floor.
pub fn fit_score_matching(sample: &ResidualSample, cfg: &ScoreMatchConfig) -> Result<ScoreMatchFit> {
    cfg.validate()?;
    let variance = sample.variance();
    if !(variance > 0.0) {
        return Err(EsiError::Degenerate(
            "residual sample has zero variance; eta would diverge".into(),
        ));
    }
    let squares: Vec<f64> = sample.values.iter().map(|e| e * e).collect();
    let objective = HscoreObjective { squares: &squares };
    let floor = kernel_floor(&sample.values, cfg);
    let bounds = Bounds {
        lo: [cfg.h_min.ln(), cfg.eta_min.ln()],
        hi: [cfg.h_max.ln(), cfg.eta_max.ln()],
        max_gap: if floor > 0.0 { -2.0 * floor.ln() } else { f64::INFINITY },
    };

    let mut runs: Vec<ScoreMatchRun> = Vec::new();
    for start in cfg.init_grid.points(variance) {
        if !(start.0 > 0.0 && start.1 > 0.0 && start.0.is_finite() && start.1.is_finite()) {
            return Err(EsiError::InvalidInput(format!(
                "init grid point ({}, {}) is not positive",
                start.0, start.1
            )));
        }
        runs.push(run_from(&objective, start, &bounds, cfg));
    }

    let best = runs.iter().enumerate().fold(
        0,
        |best, (i, run)| {
            if run.objective < runs[best].objective {
                i
            } else {
                best
            }
        },
    );
    let winner = &runs[best];
    let p = winner.params;
    let tol = 1e-12;
    let at_bound = (p.h.ln() - bounds.lo[0]).abs() < tol
        || (p.h.ln() - bounds.hi[0]).abs() < tol
        || (p.eta.ln() - bounds.lo[1]).abs() < tol
        || (p.eta.ln() - bounds.hi[1]).abs() < tol
        || bounds.on_floor([p.h.ln(), p.eta.ln()]);

    Ok(ScoreMatchFit {
        params: p,
        objective: winner.objective,
        converged: winner.converged,
        at_bound,
        kernel_floor: floor,
        runs,
    })
}
