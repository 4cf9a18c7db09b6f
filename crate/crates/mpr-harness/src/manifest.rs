//! Artifact manifests: every subcommand records the content hash of each
//! input it consumed and each output it produced, plus the seed and wall
//! time. CSV outputs stay byte-reproducible; timestamps live only here.

use mpr_core::error::{CoreError, CoreResult};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::SystemTime;

pub fn sha256_file(path: &Path) -> CoreResult<String> {
    let data = std::fs::read(path)
        .map_err(|e| CoreError::config(format!("cannot hash {}: {e}", path.display())))?;
    Ok(hex_digest(&data))
}

pub fn hex_digest(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub unix_time_s: u64,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_text: &str) -> Manifest {
        Manifest {
            command: command.to_string(),
            seed,
            config_sha256: hex_digest(config_text.as_bytes()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_s: 0.0,
            unix_time_s: 0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CoreResult<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> CoreResult<()> {
        self.outputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(mut self, path: &Path, started: std::time::Instant) -> CoreResult<()> {
        self.wall_time_s = started.elapsed().as_secs_f64();
        self.unix_time_s = SystemTime::now()
            .duration_since(SystemTime::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let json = serde_json::to_string_pretty(&self)
            .map_err(|e| CoreError::Serde(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}
