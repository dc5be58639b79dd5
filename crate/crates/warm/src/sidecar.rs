//! JSON provenance records stored next to every output.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types always serialize");
    format!("{:x}", Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar<T> {
    pub tool: String,
    pub config_sha256: String,
    pub config: T,
}

impl<T: Serialize + DeserializeOwned> Sidecar<T> {
    pub fn new(config: T) -> Self {
        Self { tool: format!("warm {}", env!("CARGO_PKG_VERSION")), config_sha256: content_hash(&config), config }
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("sidecars always serialize");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| AppError::config(path, e.to_string()))?;
        if content_hash(&s.config) != s.config_sha256 {
            return Err(AppError::config(path, "config hash does not match its contents"));
        }
        Ok(s)
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> AppResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| AppError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| AppError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}
