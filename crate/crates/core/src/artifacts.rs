//! On-disk artifacts: controller files, metrics sidecars and the run
//! manifest tying outputs to the configuration that produced them.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::feasibility::SpsaRealization;
use crate::sim::{ControllerSpec, Metrics, SimResult};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Manifest file name for a subcommand, e.g. `manifest-design.json`.
pub fn manifest_file(subcommand: &str) -> String {
    format!("manifest-{subcommand}.json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the canonical TOML rendering of a configuration.
pub fn config_hash(cfg: &Config) -> Result<String> {
    Ok(sha256_hex(cfg.to_toml()?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| with_path(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Writes pretty JSON with a trailing newline and returns its digest.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<FileDigest> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text.as_bytes())?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(text.as_bytes()),
    })
}

/// Attaches the path to an I/O error.
pub fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Where an output came from: the configuration digest and the manifest
/// file in the same directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub manifest: String,
}

impl Provenance {
    pub fn new(config_hash: &str, subcommand: &str) -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            manifest: manifest_file(subcommand),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerFile {
    pub format: u32,
    pub provenance: Provenance,
    pub controller: ControllerSpec,
    /// Certified admittance the receding-horizon plan was built from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SpsaRealization>,
    /// Performance predicted by the linearized design model.
    pub j_predicted: f64,
}

impl ControllerFile {
    pub fn read(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        if f.format != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported controller format {}", f.format)));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: Metrics,
    pub events: usize,
    pub storage_infeasible: bool,
    pub override_steps: usize,
    pub root_fallbacks: usize,
    pub final_energy: f64,
}

impl From<&SimResult> for SeedMetrics {
    fn from(r: &SimResult) -> Self {
        Self {
            seed: r.seed,
            metrics: r.metrics,
            events: r.events.len(),
            storage_infeasible: r.storage_infeasible(),
            override_steps: r.override_steps,
            root_fallbacks: r.root_fallbacks,
            final_energy: r.final_energy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub format: u32,
    pub provenance: Provenance,
    pub controller: String,
    pub duration: f64,
    pub warmup: f64,
    /// No samples survived the warm-up; metrics are zero.
    pub below_warmup: bool,
    pub per_seed: Vec<SeedMetrics>,
    /// Seed average.
    pub pooled: Metrics,
}

/// Averages metrics over runs; sample counts add up.
pub fn pool_metrics(runs: &[Metrics]) -> Metrics {
    let n = runs.len().max(1) as f64;
    let mean = |f: fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    Metrics {
        j: mean(|m| m.j),
        z1: mean(|m| m.z1),
        z2: mean(|m| m.z2),
        u: mean(|m| m.u),
        w: mean(|m| m.w),
        samples: runs.iter().map(|m| m.samples).sum(),
    }
}

impl MetricsFile {
    pub fn from_results(controller: &str, results: &[SimResult], duration: f64, warmup: f64, prov: Provenance) -> Self {
        let metrics: Vec<Metrics> = results.iter().map(|r| r.metrics).collect();
        Self {
            format: FORMAT_VERSION,
            provenance: prov,
            controller: controller.into(),
            duration,
            warmup,
            below_warmup: results.iter().any(|r| r.metrics.samples == 0),
            per_seed: results.iter().map(SeedMetrics::from).collect(),
            pooled: pool_metrics(&metrics),
        }
    }
}

/// Record of one subcommand invocation. Timestamps live only here so the
/// outputs themselves stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub config_hash: String,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn start(subcommand: &str, config_hash: &str) -> Self {
        let now = chrono::Utc::now().to_rfc3339();
        Self {
            tool_version: TOOL_VERSION.into(),
            subcommand: subcommand.into(),
            config_hash: config_hash.into(),
            started: now.clone(),
            finished: now,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Digest of everything except the timestamps.
    pub fn content_digest(&self) -> Result<String> {
        let body = serde_json::to_string(&(
            &self.tool_version,
            &self.subcommand,
            &self.config_hash,
            &self.inputs,
            &self.outputs,
        ))?;
        Ok(sha256_hex(body.as_bytes()))
    }

    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = chrono::Utc::now().to_rfc3339();
        let path = dir.join(manifest_file(&self.subcommand));
        write_json(&path, &self)?;
        Ok(path)
    }
}
