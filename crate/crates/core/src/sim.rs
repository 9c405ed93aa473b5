//! Synthetic instances of `B = G J + E`: random leadfields, sparse
//! ground-truth sources and noise injected at a controlled SNR.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EsiError, Result};
use crate::metrics::channel_average_variance;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sensor-by-source forward matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Leadfield {
    matrix: DMatrix<f64>,
}

impl Leadfield {
    /// Wraps a matrix; rejects non-finite entries and all-zero columns.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(EsiError::InvalidInput("leadfield is empty".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(EsiError::InvalidInput("leadfield has non-finite entries".into()));
        }
        if let Some(col) = matrix.column_iter().position(|c| c.iter().all(|&v| v == 0.0)) {
            return Err(EsiError::InvalidInput(format!("leadfield column {col} is all zero")));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn sensors(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn sources(&self) -> usize {
        self.matrix.ncols()
    }
}

/// I.i.d. standard normal entries, each column scaled to unit norm.
pub fn make_leadfield(sensors: usize, sources: usize, seed: u64) -> Result<Leadfield> {
    if sensors < 2 || sources < sensors {
        return Err(EsiError::InvalidInput(format!(
            "leadfield needs M >= 2 and N >= M, got M={sensors}, N={sources}"
        )));
    }
    let mut rng = rng_for(seed);
    let mut g = DMatrix::<f64>::from_fn(sensors, sources, |_, _| rng.sample(StandardNormal));
    for mut col in g.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    Leadfield::new(g)
}

/// Sparse source activity: only `active` rows of `j_star` are non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGroundTruth {
    pub j_star: DMatrix<f64>,
    /// Sorted, distinct row indices.
    pub active: Vec<usize>,
}

impl SourceGroundTruth {
    pub fn new(j_star: DMatrix<f64>, mut active: Vec<usize>) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if let Some(&bad) = active.iter().find(|&&i| i >= j_star.nrows()) {
            return Err(EsiError::InvalidInput(format!("active index {bad} out of range")));
        }
        Ok(Self { j_star, active })
    }

    pub fn time_samples(&self) -> usize {
        self.j_star.ncols()
    }
}

/// Gaussian-windowed sinusoid with random frequency, phase, peak time, width and amplitude.
fn waveform(rng: &mut ChaCha8Rng, samples: usize) -> Vec<f64> {
    let t_len = samples as f64;
    loop {
        let freq = rng.gen_range(0.02..0.1);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let peak = rng.gen_range(0.2..0.8) * t_len;
        let width = rng.gen_range(0.1..0.3) * t_len;
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let amplitude = sign * rng.gen_range(0.5..1.5);
        let row: Vec<f64> = (0..samples)
            .map(|t| {
                let t = t as f64;
                let z = (t - peak) / width;
                amplitude * (-0.5 * z * z).exp() * (2.0 * PI * freq * t + phase).sin()
            })
            .collect();
        if row.iter().any(|&v| v != 0.0) {
            return row;
        }
    }
}

pub fn make_sources(sources: usize, samples: usize, active: usize, seed: u64) -> Result<SourceGroundTruth> {
    if active == 0 || active > sources || samples < 2 {
        return Err(EsiError::InvalidInput(format!(
            "need 1 <= K <= N and T >= 2, got N={sources}, T={samples}, K={active}"
        )));
    }
    let mut rng = rng_for(seed);
    let mut rows = index::sample(&mut rng, sources, active).into_vec();
    rows.sort_unstable();
    let mut j_star = DMatrix::<f64>::zeros(sources, samples);
    for &n in &rows {
        let w = waveform(&mut rng, samples);
        for (t, v) in w.into_iter().enumerate() {
            j_star[(n, t)] = v;
        }
    }
    SourceGroundTruth::new(j_star, rows)
}

/// Noiseless sensor data `G J*`.
pub fn forward_project(g: &Leadfield, s: &SourceGroundTruth) -> Result<DMatrix<f64>> {
    if g.sources() != s.j_star.nrows() {
        return Err(EsiError::DimensionMismatch(format!(
            "leadfield has {} sources, ground truth has {} rows",
            g.sources(),
            s.j_star.nrows()
        )));
    }
    Ok(g.matrix() * &s.j_star)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    /// With probability `rho` a draw has its variance inflated by `kappa`.
    GaussianMixture {
        rho: f64,
        kappa: f64,
    },
    /// Per-channel draws with replacement from the columns of an `M x R` matrix.
    #[serde(skip)]
    Repository(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    /// Per-channel scale, length M.
    pub sigma: DVector<f64>,
}

impl NoiseModel {
    pub fn gaussian(sensors: usize) -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            sigma: DVector::from_element(sensors, 1.0),
        }
    }

    pub fn mixture(sensors: usize, rho: f64, kappa: f64) -> Self {
        Self {
            family: NoiseFamily::GaussianMixture { rho, kappa },
            sigma: DVector::from_element(sensors, 1.0),
        }
    }

    pub fn validate(&self, sensors: usize) -> Result<()> {
        if self.sigma.len() != sensors {
            return Err(EsiError::DimensionMismatch(format!(
                "noise sigma has {} entries for {sensors} channels",
                self.sigma.len()
            )));
        }
        if self.sigma.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(EsiError::InvalidInput("noise sigma entries must be positive".into()));
        }
        match &self.family {
            NoiseFamily::Gaussian => {}
            NoiseFamily::GaussianMixture { rho, kappa } => {
                if !(0.0..1.0).contains(rho) || !(*kappa > 1.0 && kappa.is_finite()) {
                    return Err(EsiError::InvalidInput(format!(
                        "mixture needs rho in [0, 1) and kappa > 1, got rho={rho}, kappa={kappa}"
                    )));
                }
            }
            NoiseFamily::Repository(repo) => {
                if repo.nrows() != sensors || repo.ncols() == 0 {
                    return Err(EsiError::DimensionMismatch(format!(
                        "noise repository is {}x{}, expected {sensors} rows",
                        repo.nrows(),
                        repo.ncols()
                    )));
                }
                if repo.iter().any(|v| !v.is_finite()) {
                    return Err(EsiError::InvalidInput("noise repository has non-finite entries".into()));
                }
            }
        }
        Ok(())
    }
}

/// Target channel-average SNR in dB, or the noise at its native scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrSpec {
    Native,
    Db(f64),
}

impl SnrSpec {
    pub fn target_db(&self) -> Option<f64> {
        match self {
            SnrSpec::Native => None,
            SnrSpec::Db(db) => Some(*db),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyObservation {
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

/// Draws per-channel noise, rescales it globally to the requested
/// channel-average SNR and adds it to `clean`.
pub fn inject_noise(clean: &DMatrix<f64>, nm: &NoiseModel, snr: SnrSpec, seed: u64) -> Result<NoisyObservation> {
    let (m, t) = clean.shape();
    nm.validate(m)?;
    if let SnrSpec::Db(db) = snr {
        if !db.is_finite() {
            return Err(EsiError::InvalidInput(format!("SNR target {db} is not finite")));
        }
    }
    let mut rng = rng_for(seed);
    let mut e = DMatrix::<f64>::zeros(m, t);
    // row-major draw order so a channel's noise does not depend on T of other channels
    for row in 0..m {
        let sigma = nm.sigma[row];
        for col in 0..t {
            let z: f64 = match &nm.family {
                NoiseFamily::Gaussian => rng.sample(StandardNormal),
                NoiseFamily::GaussianMixture { rho, kappa } => {
                    let z: f64 = rng.sample(StandardNormal);
                    if rng.gen::<f64>() < *rho {
                        z * kappa.sqrt()
                    } else {
                        z
                    }
                }
                NoiseFamily::Repository(repo) => repo[(row, rng.gen_range(0..repo.ncols()))],
            };
            e[(row, col)] = sigma * z;
        }
    }
    if let SnrSpec::Db(db) = snr {
        let signal = channel_average_variance(clean);
        if !(signal > 0.0) {
            return Err(EsiError::Degenerate(
                "clean signal has zero variance; SNR is undefined".into(),
            ));
        }
        let noise = channel_average_variance(&e);
        if !(noise > 0.0) {
            return Err(EsiError::Degenerate("drawn noise has zero variance".into()));
        }
        let scale = (signal / (noise * 10f64.powf(db / 10.0))).sqrt();
        e *= scale;
    }
    let b = clean + &e;
    Ok(NoisyObservation { b, e })
}
