//! Experiment configuration: a JSON file whose fields all have defaults, plus
//! command-line overrides applied on top.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use robust_esi::chvb::ChvbConfig;
use robust_esi::hvb::HvbConfig;
use robust_esi::likelihood::ScoreMatchConfig;
use robust_esi::sim::{NoiseFamily, NoiseModel};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::matrix_io::read_matrix;

/// SNR grid used when the config says `"default"`.
pub const DEFAULT_SNR_DB: [f64; 3] = [10.0, 0.0, -10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Hvb,
    Chvb,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Hvb => "hvb",
            Solver::Chvb => "chvb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "hvb" => Ok(Solver::Hvb),
            "chvb" => Ok(Solver::Chvb),
            other => Err(CliError::Usage(format!(
                "unknown solver {other:?}; expected hvb or chvb"
            ))),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitFormat {
    /// Per-repetition results table.
    Csv,
    /// Per-SNR summary with the paired comparisons.
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub sensors: usize,
    pub sources: usize,
    pub samples: usize,
    /// Active sources per instance.
    pub active: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            sensors: 64,
            sources: 500,
            samples: 100,
            active: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<Vec<f64>>,
    },
    GaussianMixture {
        rho: f64,
        kappa: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<Vec<f64>>,
    },
    /// Columns of a sensors x R matrix file (ESIM or CSV), resampled per channel.
    Repository {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<Vec<f64>>,
    },
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::GaussianMixture {
            rho: 0.1,
            kappa: 100.0,
            sigma: None,
        }
    }
}

impl NoiseConfig {
    /// Builds the generator's noise model; repository paths are resolved
    /// against `base` when relative.
    pub fn model(&self, sensors: usize, base: &Path) -> Result<NoiseModel> {
        let (family, sigma) = match self {
            NoiseConfig::Gaussian { sigma } => (NoiseFamily::Gaussian, sigma),
            NoiseConfig::GaussianMixture { rho, kappa, sigma } => (
                NoiseFamily::GaussianMixture {
                    rho: *rho,
                    kappa: *kappa,
                },
                sigma,
            ),
            NoiseConfig::Repository { path, sigma } => {
                let path = if path.is_relative() {
                    base.join(path)
                } else {
                    path.clone()
                };
                (NoiseFamily::Repository(read_matrix(&path)?), sigma)
            }
        };
        let sigma = match sigma {
            Some(s) => DVector::from_vec(s.clone()),
            None => DVector::from_element(sensors, 1.0),
        };
        let model = NoiseModel { family, sigma };
        model.validate(sensors)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrList {
    /// The string `"default"`.
    Named(String),
    Values(Vec<f64>),
}

impl Default for SnrList {
    fn default() -> Self {
        SnrList::Named("default".into())
    }
}

impl SnrList {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            SnrList::Named(s) if s == "default" => Ok(DEFAULT_SNR_DB.to_vec()),
            SnrList::Named(s) => Err(CliError::Usage(format!(
                "snr_list must be \"default\" or a list of dB values, got {s:?}"
            ))),
            SnrList::Values(v) => Ok(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dims: Dims,
    pub noise: NoiseConfig,
    pub snr_list: SnrList,
    pub repetitions: usize,
    /// Repetition `r` uses seed `seed + r`.
    pub seed: u64,
    pub solvers: Vec<Solver>,
    pub hvb: HvbConfig,
    /// Its `hvb` field is replaced by the top-level `hvb`, so the warm start is
    /// the reported hVB fit.
    pub chvb: ChvbConfig,
    /// Used by `score-match`.
    pub score_match: ScoreMatchConfig,
    pub output_dir: PathBuf,
    pub emit: Vec<EmitFormat>,
    /// Fill `wall_ms`; off by default because timings break byte-identical reruns.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            noise: NoiseConfig::default(),
            snr_list: SnrList::default(),
            repetitions: 50,
            seed: 0,
            solvers: vec![Solver::Hvb, Solver::Chvb],
            hvb: HvbConfig::default(),
            chvb: ChvbConfig::default(),
            score_match: ScoreMatchConfig::default(),
            output_dir: PathBuf::from("out"),
            emit: vec![EmitFormat::Csv, EmitFormat::Json],
            record_timing: false,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub repetitions: Option<usize>,
    pub snr_list: Option<Vec<f64>>,
    pub solvers: Option<Vec<Solver>>,
    pub output_dir: Option<PathBuf>,
    pub record_timing: Option<bool>,
}

impl ExperimentConfig {
    /// Reads and validates a config file; syntax and schema errors carry the
    /// file position.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| match e {
            CliError::Usage(message) => CliError::Config {
                path: path.to_path_buf(),
                line: 0,
                column: 0,
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.repetitions {
            self.repetitions = r;
        }
        if let Some(v) = &o.snr_list {
            self.snr_list = SnrList::Values(v.clone());
        }
        if let Some(v) = &o.solvers {
            self.solvers = v.clone();
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(t) = o.record_timing {
            self.record_timing = t;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.sensors == 0 || d.sources == 0 || d.samples == 0 || d.active == 0 {
            return Err(CliError::Usage(format!("all dims must be >= 1, got {d:?}")));
        }
        if d.active > d.sources {
            return Err(CliError::Usage(format!(
                "{} active sources exceed {} sources",
                d.active, d.sources
            )));
        }
        if self.repetitions == 0 {
            return Err(CliError::Usage("repetitions must be >= 1".into()));
        }
        let snr = self.snr_list.values()?;
        if snr.is_empty() {
            return Err(CliError::Usage("snr_list must not be empty".into()));
        }
        if let Some(v) = snr.iter().find(|v| !v.is_finite()) {
            return Err(CliError::Usage(format!("snr_list entry {v} is not finite")));
        }
        if self.solvers.is_empty() {
            return Err(CliError::Usage("solvers must name at least one of hvb, chvb".into()));
        }
        let mut seen = self.solvers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.solvers.len() {
            return Err(CliError::Usage("solvers must not repeat".into()));
        }
        self.hvb.validate(d.sensors, d.sources)?;
        self.chvb_config().validate(d.sensors, d.sources)?;
        self.score_match.validate()?;
        Ok(())
    }

    pub fn snr_values(&self) -> Vec<f64> {
        self.snr_list.values().expect("validated config")
    }

    pub fn chvb_config(&self) -> ChvbConfig {
        let mut c = self.chvb.clone();
        c.hvb = self.hvb.clone();
        c
    }

    /// Solvers in run order: hVB first so ChVB can start from it.
    pub fn ordered_solvers(&self) -> Vec<Solver> {
        let mut s = self.solvers.clone();
        s.sort();
        s
    }

    pub fn emits(&self, f: EmitFormat) -> bool {
        self.emit.contains(&f)
    }
}
