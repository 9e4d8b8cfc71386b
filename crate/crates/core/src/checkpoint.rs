//! Versioned JSON checkpoints tagged with the hash of the configuration
//! that produced them.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "fend-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<P> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    pub payload: P,
}

impl<P> Checkpoint<P> {
    pub fn new(kind: &str, config_hash: &str, payload: P) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            payload,
        }
    }
}

pub fn save<P: Serialize>(path: &Path, ckpt: &Checkpoint<P>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and checks its format, version and kind.
pub fn load<P: DeserializeOwned>(path: &Path, kind: &str) -> Result<Checkpoint<P>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint<P> = serde_json::from_str(&text)?;
    if ckpt.format != FORMAT {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message: format!("expected format {FORMAT}, found {}", ckpt.format),
        });
    }
    if ckpt.version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message: format!("unsupported checkpoint version {}", ckpt.version),
        });
    }
    if ckpt.kind != kind {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message: format!("expected a {kind} checkpoint, found {}", ckpt.kind),
        });
    }
    Ok(ckpt)
}
