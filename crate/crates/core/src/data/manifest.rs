//! JSON manifests, content hashes and config fingerprints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Stable fingerprint of any serializable value (hash of its canonical JSON).
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config values serialize");
    sha256_hex(v.to_string().as_bytes())[..16].to_string()
}

/// Manifest written next to every pipeline artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Fingerprint of the configuration section that produced the artifact.
    pub fingerprint: String,
    /// Hashes of the upstream artifacts this stage consumed.
    pub upstream: BTreeMap<String, String>,
    /// Files produced, with their hashes.
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl StageManifest {
    pub fn new(stage: &str, fingerprint: String) -> Self {
        StageManifest {
            stage: stage.to_string(),
            fingerprint,
            upstream: BTreeMap::new(),
            files: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }
}
