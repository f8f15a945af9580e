//! Batch CLI and HTTP job service around the editing pipeline.

pub mod bench;
pub mod cli;
pub mod config;
pub mod jobs;
pub mod segment;
pub mod service;
pub mod store;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterfaceError {
    #[error("config: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("store: {0}")]
    Store(String),
    #[error(transparent)]
    Pipeline(#[from] cpam_core::pipeline::PipelineError),
    #[error(transparent)]
    MaskInput(#[from] cpam_core::mask_input::MaskInputError),
    #[error(transparent)]
    Eval(#[from] cpam_core::evaluation::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Writes `bytes` to `path` through a sibling temp file and rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
