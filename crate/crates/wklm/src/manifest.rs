//! Run manifests: the provenance record each CLI subcommand writes before
//! producing any output artifact. Together with the seed, the recorded
//! input digests make every artifact reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration (CLI flag > config file > default).
    pub config: serde_json::Value,
    /// Role -> sha256 content digest of each input file.
    pub input_digests: BTreeMap<String, String>,
    pub output_paths: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            tool: "wklm".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed,
            config,
            input_digests: BTreeMap::new(),
            output_paths: Vec::new(),
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        self.input_digests
            .insert(role.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.output_paths.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("manifest serialization");
        json.push('\n');
        fs::write(path, json)
    }
}

/// Streaming SHA-256 of a file, as a lowercase hex string.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
