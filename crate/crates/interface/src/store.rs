//! Content-addressed blobs and durable job records on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::jobs::EditJob;
use crate::{now_unix_ms, sha256_hex, write_atomic, InterfaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    Image,
    Mask,
}

impl BlobKind {
    fn tag(self) -> &'static str {
        match self {
            BlobKind::Image => "image",
            BlobKind::Mask => "mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub id: String,
    pub kind: BlobKind,
    pub width: usize,
    pub height: usize,
    pub media_type: String,
    pub size_bytes: usize,
    pub created_unix_ms: u64,
}

fn valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

/// Blob bytes live at `blobs/<sha256>`, metadata at
/// `blobs/<sha256>.<kind>.json`.
#[derive(Debug, Clone)]
pub struct BlobStore {
    dir: PathBuf,
}

impl BlobStore {
    pub fn open(root: &Path) -> Result<Self, InterfaceError> {
        let dir = root.join("blobs");
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn put(
        &self,
        kind: BlobKind,
        bytes: &[u8],
        resolution: (usize, usize),
        media_type: &str,
    ) -> Result<BlobMeta, InterfaceError> {
        let id = sha256_hex(bytes);
        let path = self.dir.join(&id);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        let meta_path = self.dir.join(format!("{id}.{}.json", kind.tag()));
        if let Some(meta) = self.meta(kind, &id)? {
            return Ok(meta);
        }
        let meta = BlobMeta {
            id,
            kind,
            width: resolution.1,
            height: resolution.0,
            media_type: media_type.to_string(),
            size_bytes: bytes.len(),
            created_unix_ms: now_unix_ms(),
        };
        write_atomic(&meta_path, &serde_json::to_vec_pretty(&meta)?)?;
        Ok(meta)
    }

    pub fn meta(&self, kind: BlobKind, id: &str) -> Result<Option<BlobMeta>, InterfaceError> {
        if !valid_id(id) {
            return Ok(None);
        }
        let p = self.dir.join(format!("{id}.{}.json", kind.tag()));
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(p)?)?))
    }

    pub fn get(&self, kind: BlobKind, id: &str) -> Result<Option<(BlobMeta, Vec<u8>)>, InterfaceError> {
        let Some(meta) = self.meta(kind, id)? else {
            return Ok(None);
        };
        let bytes = std::fs::read(self.dir.join(id))?;
        if sha256_hex(&bytes) != id {
            return Err(InterfaceError::Store(format!("blob {id} is corrupt")));
        }
        Ok(Some((meta, bytes)))
    }
}

/// One JSON file per job under `jobs/`.
#[derive(Debug, Clone)]
pub struct JobStore {
    dir: PathBuf,
}

impl JobStore {
    pub fn open(root: &Path) -> Result<Self, InterfaceError> {
        let dir = root.join("jobs");
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn save(&self, job: &EditJob) -> Result<(), InterfaceError> {
        write_atomic(&self.dir.join(format!("{}.json", job.job_id)), &serde_json::to_vec(job)?)?;
        Ok(())
    }

    /// All stored jobs, oldest first.
    pub fn load_all(&self) -> Result<Vec<EditJob>, InterfaceError> {
        let mut jobs = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            match serde_json::from_slice::<EditJob>(&std::fs::read(&path)?) {
                Ok(job) => jobs.push(job),
                Err(e) => log::error!("skipping unreadable job record {}: {e}", path.display()),
            }
        }
        jobs.sort_by(|a, b| (a.created_unix_ms, &a.job_id).cmp(&(b.created_unix_ms, &b.job_id)));
        Ok(jobs)
    }
}
