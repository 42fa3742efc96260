//! `manifest.json`: what a run did and which files it touched.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use bbvae::data::write_bbds;
use bbvae::{Dataset, VaeModel};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct ModelRecord {
    pub role: String,
    pub path: PathBuf,
    /// Checksum stored in the checkpoint trailer, hex.
    pub checksum: String,
    pub data_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub obs: &'static str,
}

#[derive(Debug, Serialize)]
pub struct DatasetRecord {
    pub role: String,
    pub source: String,
    pub count: usize,
    pub dim: usize,
    pub domain: &'static str,
    /// sha256 of the dataset's BBDS serialization.
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub started_unix: u64,
    pub seconds: f64,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelRecord>,
    pub datasets: Vec<DatasetRecord>,
    pub outputs: Vec<FileRecord>,
    #[serde(skip)]
    clock: Option<Instant>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Manifest {
    pub fn new(command: &str, seeds: &[u64]) -> Self {
        Self {
            tool: "bbvae",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            seconds: 0.0,
            config: Value::Null,
            seeds: seeds.to_vec(),
            models: Vec::new(),
            datasets: Vec::new(),
            outputs: Vec::new(),
            clock: Some(Instant::now()),
        }
    }

    pub fn model(&mut self, role: &str, path: &Path, model: &VaeModel) {
        self.models.push(ModelRecord {
            role: role.to_string(),
            path: path.to_path_buf(),
            checksum: format!("{:016x}", model.checksum()),
            data_dim: model.arch.data_dim,
            hidden: model.arch.hidden,
            latent: model.arch.latent,
            obs: model.arch.obs.name(),
        });
    }

    pub fn dataset(&mut self, role: &str, source: &str, data: &Dataset) {
        self.datasets.push(DatasetRecord {
            role: role.to_string(),
            source: source.to_string(),
            count: data.len(),
            dim: data.dim(),
            domain: data.domain().name(),
            sha256: sha256_hex(&write_bbds(data)),
        });
    }

    /// Records a file that has already been written.
    pub fn output(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path)?;
        self.outputs.push(FileRecord {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> CliResult<()> {
        if let Some(c) = self.clock.take() {
            self.seconds = c.elapsed().as_secs_f64();
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}
