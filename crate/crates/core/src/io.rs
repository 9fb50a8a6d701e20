//! Small filesystem helpers shared by the stores.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, UcpError};

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| UcpError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| UcpError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| UcpError::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| UcpError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| UcpError::json(path, e))
}

/// Creates `dir` if needed and fails unless it is empty.
pub fn prepare_empty_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| UcpError::io(dir, e))?;
        if entries.next().is_some() {
            return Err(UcpError::NonEmptyOutDir(dir.to_path_buf()));
        }
        Ok(())
    } else {
        std::fs::create_dir_all(dir).map_err(|e| UcpError::io(dir, e))
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| UcpError::io(dir, e))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
