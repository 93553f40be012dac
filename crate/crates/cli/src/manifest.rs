use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to reproduce a command's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    /// Command-line arguments after the program name.
    pub parameters: Vec<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn hash_outputs(dir: &Path, names: &[String]) -> std::io::Result<Vec<Artifact>> {
        names.iter().map(|n| Ok(Artifact { path: n.clone(), sha256: sha256_file(&dir.join(n))? })).collect()
    }

    /// `parameters` with the value of `--out` replaced.
    pub fn with_out(&self, out: &Path) -> Vec<String> {
        let mut params = self.parameters.clone();
        let mut i = 0;
        while i < params.len() {
            if params[i] == "--out" && i + 1 < params.len() {
                params[i + 1] = out.display().to_string();
                i += 1;
            } else if params[i].starts_with("--out=") {
                params[i] = format!("--out={}", out.display());
            }
            i += 1;
        }
        params
    }
}
