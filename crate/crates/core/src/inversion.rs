//! Deterministic DDIM inversion under null-text conditioning.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::FeatureMatrix;
use crate::backend::{BackendError, CaptureHook, DiffusionBackend, NoHooks, PromptEmbedding, SiteSpec};
use crate::control::AttentionKind;
use crate::schedule::{self, ScheduleError};
use crate::tensor::LatentTensor;

#[derive(Debug, Error)]
pub enum InversionError {
    #[error("non-finite noise prediction at inversion step {step}")]
    NonFinite { step: usize },
    #[error("backend failed at inversion step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("trace index {index} outside 0..={steps}")]
    Index { index: usize, steps: usize },
    #[error("no capture for declared site {0}")]
    Instrumentation(String),
    #[error("trace store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, InversionError>;

/// Latents `z_0 .. z_T` of one inversion, read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrace {
    latents: Vec<LatentTensor>,
    timesteps: Vec<usize>,
    backend_fingerprint: String,
}

impl InversionTrace {
    pub fn latents(&self) -> &[LatentTensor] {
        &self.latents
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn backend_fingerprint(&self) -> &str {
        &self.backend_fingerprint
    }

    pub fn z0(&self) -> &LatentTensor {
        &self.latents[0]
    }

    pub fn z_t(&self) -> &LatentTensor {
        self.latents.last().expect("trace holds at least two latents")
    }

    /// Trace latent whose tag equals `timestep`.
    pub fn at_timestep(&self, timestep: usize) -> Option<&LatentTensor> {
        self.timesteps
            .iter()
            .position(|&t| t == timestep)
            .map(|i| &self.latents[i])
    }
}

pub fn null_embedding(backend: &dyn DiffusionBackend) -> std::result::Result<PromptEmbedding, BackendError> {
    backend.encode_text("", None)
}

pub fn ddim_invert(z0: &LatentTensor, backend: &dyn DiffusionBackend, steps: usize) -> Result<InversionTrace> {
    let desc = backend.descriptor();
    let timesteps = desc.schedule.trajectory(steps)?;
    let null = null_embedding(backend).map_err(|source| InversionError::Backend { step: 0, source })?;
    let mut latents = Vec::with_capacity(steps + 1);
    let mut z = z0.clone().with_tag(0);
    for (step, w) in timesteps.windows(2).enumerate() {
        let out = backend
            .predict_noise(&z, w[0], &null, &[], &mut NoHooks)
            .map_err(|source| match source {
                BackendError::NonFinite(_) => InversionError::NonFinite { step },
                source => InversionError::Backend { step, source },
            })?;
        if !out.eps.is_finite() {
            return Err(InversionError::NonFinite { step });
        }
        let next = schedule::ddim_inverse_step(&z, &out.eps, w[0], w[1], &desc.schedule)?;
        latents.push(std::mem::replace(&mut z, next));
    }
    latents.push(z);
    Ok(InversionTrace {
        latents,
        timesteps,
        backend_fingerprint: backend.fingerprint(),
    })
}

/// Samples back from `z_T` with null text at guidance 1 on the same grid.
pub fn reconstruct(trace: &InversionTrace, backend: &dyn DiffusionBackend) -> Result<LatentTensor> {
    let desc = backend.descriptor();
    let null = null_embedding(backend).map_err(|source| InversionError::Backend { step: 0, source })?;
    let ts = trace.timesteps();
    let mut z = trace.z_t().clone();
    for (step, i) in (1..ts.len()).rev().enumerate() {
        let out = backend
            .predict_noise(&z, ts[i], &null, &[], &mut NoHooks)
            .map_err(|source| InversionError::Backend { step, source })?;
        z = schedule::ddim_step(&z, &out.eps, ts[i], ts[i - 1], &desc.schedule)?;
    }
    Ok(z)
}

/// Per-head keys and values captured at one self-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFeatures {
    pub site: SiteSpec,
    pub keys: Vec<FeatureMatrix>,
    pub values: Vec<FeatureMatrix>,
}

/// Source-branch features keyed by self-attention layer index.
pub type SourceFeatures = BTreeMap<usize, SiteFeatures>;

/// One null-text forward pass on trace latent `t_index`, capturing K and V
/// at every self-attention site.
pub fn source_features(trace: &InversionTrace, t_index: usize, backend: &dyn DiffusionBackend) -> Result<SourceFeatures> {
    if t_index > trace.steps() {
        return Err(InversionError::Index {
            index: t_index,
            steps: trace.steps(),
        });
    }
    let null = null_embedding(backend).map_err(|source| InversionError::Backend { step: t_index, source })?;
    let z = &trace.latents[t_index];
    let mut cap = CaptureHook::only(AttentionKind::SelfAttention);
    backend
        .predict_noise(z, trace.timesteps[t_index], &null, &[], &mut cap)
        .map_err(|source| InversionError::Backend { step: t_index, source })?;
    collect_self_features(backend, cap)
}

pub(crate) fn collect_self_features(backend: &dyn DiffusionBackend, cap: CaptureHook) -> Result<SourceFeatures> {
    let mut out: SourceFeatures = cap
        .captures
        .into_iter()
        .map(|c| {
            let (keys, values) = c.heads.into_iter().map(|h| (h.k, h.v)).unzip();
            (
                c.site.layer_index,
                SiteFeatures {
                    site: c.site,
                    keys,
                    values,
                },
            )
        })
        .collect();
    for site in backend.descriptor().sites_of(AttentionKind::SelfAttention) {
        match out.get(&site.layer_index) {
            Some(f) if f.site == *site => {}
            _ => return Err(InversionError::Instrumentation(site.label())),
        }
    }
    out.retain(|_, f| f.site.kind == AttentionKind::SelfAttention);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceManifest {
    steps: usize,
    timesteps: Vec<usize>,
    latent_shape: (usize, usize, usize, usize),
    backend_fingerprint: String,
    files: Vec<String>,
}

const MANIFEST: &str = "trace.json";

impl InversionTrace {
    /// Writes one little-endian f64 file per latent plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.latents.len());
        for (i, z) in self.latents.iter().enumerate() {
            let name = format!("z_{i:04}.f64");
            let mut f = fs::File::create(dir.join(&name))?;
            let mut buf = Vec::with_capacity(z.data.len() * 8);
            for v in z.data.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
            files.push(name);
        }
        let manifest = TraceManifest {
            steps: self.steps(),
            timesteps: self.timesteps.clone(),
            latent_shape: self.latents[0].data.dim(),
            backend_fingerprint: self.backend_fingerprint.clone(),
            files,
        };
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    /// Loads a saved trace; rejects it when produced by a different backend.
    pub fn load(dir: &Path, expected_fingerprint: &str) -> Result<Self> {
        let manifest: TraceManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.backend_fingerprint != expected_fingerprint {
            return Err(InversionError::Store(format!(
                "trace made by {}, expected {expected_fingerprint}",
                manifest.backend_fingerprint
            )));
        }
        if manifest.files.len() != manifest.steps + 1 || manifest.timesteps.len() != manifest.steps + 1 {
            return Err(InversionError::Store("manifest lengths disagree".into()));
        }
        let n: usize = {
            let (a, b, c, d) = manifest.latent_shape;
            a * b * c * d
        };
        let mut latents = Vec::with_capacity(manifest.files.len());
        for (name, &t) in manifest.files.iter().zip(&manifest.timesteps) {
            let mut bytes = Vec::new();
            fs::File::open(dir.join(name))?.read_to_end(&mut bytes)?;
            if bytes.len() != n * 8 {
                return Err(InversionError::Store(format!("{name} has {} bytes, expected {}", bytes.len(), n * 8)));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let data = Array4::from_shape_vec(manifest.latent_shape, values)
                .map_err(|e| InversionError::Store(e.to_string()))?;
            latents.push(LatentTensor::new(data, t));
        }
        Ok(Self {
            latents,
            timesteps: manifest.timesteps,
            backend_fingerprint: manifest.backend_fingerprint,
        })
    }
}
