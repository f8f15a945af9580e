//! Service and CLI configuration file (TOML).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Device;
use cpam_core::backend::{DiffusionBackend, ToyBackend};
use cpam_sd::{weights_dir_from_env, SdBackend, WEIGHTS_ENV};
use serde::{Deserialize, Serialize};

use crate::InterfaceError;

/// Keys: `backend`, `device`, `weights`, `queue_size`, `store_path`,
/// `segmentation_endpoint`, `max_concurrent_jobs`, `bind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// `toy` or `sd15`.
    pub backend: String,
    /// `cpu` or `cuda:N`.
    pub device: String,
    /// Diffusers directory for `sd15`; falls back to `CPAM_SD_WEIGHTS`.
    pub weights: Option<PathBuf>,
    pub queue_size: usize,
    pub store_path: PathBuf,
    pub segmentation_endpoint: Option<String>,
    pub max_concurrent_jobs: usize,
    pub bind: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            device: "cpu".into(),
            weights: None,
            queue_size: 64,
            store_path: PathBuf::from("cpam-store"),
            segmentation_endpoint: None,
            max_concurrent_jobs: 1,
            bind: "127.0.0.1:8080".into(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, InterfaceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InterfaceError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| InterfaceError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, InterfaceError> {
        path.map(Self::load).unwrap_or_else(|| Ok(Self::default()))
    }
}

pub fn parse_device(name: &str) -> Result<Device, InterfaceError> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => {
            let ordinal = other
                .strip_prefix("cuda:")
                .or(if other == "cuda" { Some("0") } else { None })
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| InterfaceError::Config(format!("unknown device {other:?}")))?;
            Device::new_cuda(ordinal).map_err(|e| InterfaceError::Backend(e.to_string()))
        }
    }
}

pub fn make_backend(name: &str, device: &str, weights: Option<&Path>) -> Result<Arc<dyn DiffusionBackend>, InterfaceError> {
    match name {
        "toy" => Ok(Arc::new(ToyBackend::default())),
        "sd15" => {
            let dir = weights
                .map(Path::to_path_buf)
                .or_else(weights_dir_from_env)
                .ok_or_else(|| InterfaceError::Config(format!("sd15 needs --weights or {WEIGHTS_ENV}")))?;
            let device = parse_device(device)?;
            let b = SdBackend::load(&dir, &device).map_err(|e| InterfaceError::Backend(e.to_string()))?;
            Ok(Arc::new(b))
        }
        other => Err(InterfaceError::Config(format!("unknown backend {other:?}, expected toy or sd15"))),
    }
}
