//! Per-stage run manifests: what ran, with which config, over which bytes.
//!
//! Artifacts themselves are byte-reproducible; manifests are the one
//! exception because they record wall-clock timings. Reproducibility checks
//! should compare artifacts and ignore manifests.

use std::collections::BTreeMap;
use std::path::Path;

use ncd_core::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    /// Hash of the fully resolved config the stage actually ran with.
    pub config_sha256: String,
    /// Input path -> content hash, for provenance.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> content hash; re-runs must reproduce these exactly.
    pub outputs: BTreeMap<String, String>,
    pub duration_ms: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl StageManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}_manifest.json", self.stage));
        let mut body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid_config(format!("manifest serialization: {e}")))?;
        body.push('\n');
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}
