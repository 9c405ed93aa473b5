//! One simulated instance, and its on-disk form: four ESIM matrices and a
//! manifest with seeds, achieved SNR and content hashes.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use robust_esi::metrics::snr_db;
use robust_esi::sim::{
    forward_project, inject_noise, make_leadfield, make_sources, Leadfield, NoiseModel, SnrSpec, SourceGroundTruth,
};
use serde::{Deserialize, Serialize};

use crate::config::{Dims, NoiseConfig};
use crate::error::{CliError, Result};
use crate::matrix_io::{read_matrix, sha256_hex, write_bytes, write_matrix};

pub const MANIFEST: &str = "manifest.json";
pub const LEADFIELD_FILE: &str = "leadfield.esim";
pub const SOURCES_FILE: &str = "sources.esim";
pub const OBSERVATIONS_FILE: &str = "observations.esim";
pub const NOISE_FILE: &str = "noise.esim";

/// Seeds of the three generators, derived from one repetition seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSeeds {
    pub leadfield: u64,
    pub sources: u64,
    pub noise: u64,
}

impl InstanceSeeds {
    pub fn derive(seed: u64) -> Self {
        let base = seed.wrapping_mul(3);
        Self {
            leadfield: base.wrapping_add(1),
            sources: base.wrapping_add(2),
            noise: base.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub seeds: InstanceSeeds,
    pub leadfield: Leadfield,
    pub truth: SourceGroundTruth,
    pub observations: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub snr_db_target: f64,
    pub snr_db_achieved: f64,
}

pub fn simulate(dims: &Dims, noise: &NoiseModel, snr: f64, seed: u64) -> Result<Instance> {
    let seeds = InstanceSeeds::derive(seed);
    let leadfield = make_leadfield(dims.sensors, dims.sources, seeds.leadfield)?;
    let truth = make_sources(dims.sources, dims.samples, dims.active, seeds.sources)?;
    let clean = forward_project(&leadfield, &truth)?;
    let obs = inject_noise(&clean, noise, SnrSpec::Db(snr), seeds.noise)?;
    let snr_db_achieved = snr_db(&clean, &obs.e)?;
    Ok(Instance {
        seed,
        seeds,
        leadfield,
        truth,
        observations: obs.b,
        noise: obs.e,
        snr_db_target: snr,
        snr_db_achieved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub role: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub seeds: InstanceSeeds,
    pub dims: Dims,
    pub noise: NoiseConfig,
    pub snr_db_target: f64,
    pub snr_db_achieved: f64,
    pub active_sources: Vec<usize>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn file(&self, role: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.role == role)
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_matrix_entry(dir: &Path, role: &str, name: &str, m: &DMatrix<f64>) -> Result<FileEntry> {
    let sha256 = write_matrix(&dir.join(name), m)?;
    Ok(FileEntry {
        role: role.into(),
        path: PathBuf::from(name),
        rows: m.nrows(),
        cols: m.ncols(),
        sha256,
    })
}

pub fn write_dataset(dir: &Path, inst: &Instance, dims: &Dims, noise: &NoiseConfig) -> Result<Manifest> {
    create_dir(dir)?;
    let files = vec![
        write_matrix_entry(dir, "leadfield", LEADFIELD_FILE, inst.leadfield.matrix())?,
        write_matrix_entry(dir, "sources", SOURCES_FILE, &inst.truth.j_star)?,
        write_matrix_entry(dir, "observations", OBSERVATIONS_FILE, &inst.observations)?,
        write_matrix_entry(dir, "noise", NOISE_FILE, &inst.noise)?,
    ];
    let manifest = Manifest {
        seed: inst.seed,
        seeds: inst.seeds,
        dims: *dims,
        noise: noise.clone(),
        snr_db_target: inst.snr_db_target,
        snr_db_achieved: inst.snr_db_achieved,
        active_sources: inst.truth.active.clone(),
        files,
    };
    write_bytes(&dir.join(MANIFEST), &to_json_bytes(&manifest))?;
    Ok(manifest)
}

/// A dataset read back from disk. Only the leadfield and observations are
/// required; the ground truth is present when the directory came from `simulate`.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub leadfield: DMatrix<f64>,
    pub observations: DMatrix<f64>,
    pub truth: Option<(DMatrix<f64>, Vec<usize>)>,
    pub leadfield_sha256: String,
    pub observations_sha256: String,
}

fn read_checked(dir: &Path, entry: Option<&FileEntry>, default: &str) -> Result<(DMatrix<f64>, String)> {
    let path = dir.join(entry.map(|e| e.path.as_path()).unwrap_or(Path::new(default)));
    let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let hash = sha256_hex(&bytes);
    if let Some(e) = entry {
        if e.sha256 != hash {
            return Err(CliError::format(&path, "content hash differs from the manifest"));
        }
    }
    Ok((read_matrix(&path)?, hash))
}

/// Loads a dataset directory. With a manifest, file hashes are verified;
/// without one, `leadfield.esim` and `observations.esim` are read directly.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: manifest_path.clone(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?)
    } else {
        None
    };
    let entry = |role: &str| manifest.as_ref().and_then(|m| m.file(role));
    let (leadfield, leadfield_sha256) = read_checked(dir, entry("leadfield"), LEADFIELD_FILE)?;
    let (observations, observations_sha256) = read_checked(dir, entry("observations"), OBSERVATIONS_FILE)?;
    let truth = match (&manifest, entry("sources")) {
        (Some(m), Some(e)) => Some((read_checked(dir, Some(e), SOURCES_FILE)?.0, m.active_sources.clone())),
        _ => None,
    };
    Ok(LoadedDataset {
        leadfield,
        observations,
        truth,
        leadfield_sha256,
        observations_sha256,
    })
}
