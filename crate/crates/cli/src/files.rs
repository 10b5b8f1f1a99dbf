//! File access with path-carrying errors, plus artifact hashing.

use std::fs;
use std::path::Path;

use d2m_core::config::{Config, FusionPlan};
use d2m_core::similarity::{read_matrices, write_matrices, SimilarityMatrices};
use d2m_core::trace::{read_trace, write_trace, ActivationTrace};
use d2m_core::weights::{read_weights, write_weights, WeightContainer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_weights(path: &Path) -> Result<WeightContainer> {
    read_weights(&mut read(path)?.as_slice()).map_err(Error::input(path))
}

pub fn save_weights(path: &Path, c: &WeightContainer) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(c, &mut buf).map_err(Error::input(path))?;
    write(path, buf)
}

pub fn load_trace(path: &Path) -> Result<ActivationTrace> {
    read_trace(&mut read(path)?.as_slice()).map_err(Error::input(path))
}

pub fn save_trace(path: &Path, t: &ActivationTrace) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(t, &mut buf).map_err(Error::input(path))?;
    write(path, buf)
}

pub fn load_matrices(path: &Path) -> Result<SimilarityMatrices> {
    read_matrices(&mut read(path)?.as_slice()).map_err(Error::input(path))
}

pub fn save_matrices(path: &Path, m: &SimilarityMatrices) -> Result<()> {
    let mut buf = Vec::new();
    write_matrices(m, &mut buf).map_err(Error::input(path))?;
    write(path, buf)
}

pub fn load_plan(path: &Path) -> Result<FusionPlan> {
    FusionPlan::from_json(&read_string(path)?).map_err(Error::input(path))
}

pub fn load_config(path: &Path) -> Result<Config> {
    Config::from_json(&read_string(path)?).map_err(Error::input(path))
}

pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}
