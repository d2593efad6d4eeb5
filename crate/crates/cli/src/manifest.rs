use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mtgn::config::TrainConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one artifact-producing invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<TrainConfig>,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub seed: Option<u64>,
}

pub struct Recorder {
    started: Instant,
    manifest: RunManifest,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Recorder {
    pub fn start(command: &str) -> Recorder {
        Recorder {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config: None,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                wall_clock_secs: 0.0,
                seed: None,
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn config(&mut self, cfg: &TrainConfig) {
        self.manifest.seed = Some(cfg.seed);
        self.manifest.config = Some(cfg.clone());
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
