//! Source-mask resolution from files, clicks or text phrases.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mask::{MaskError, SpatialMask};
use crate::tensor::ImageTensor;

#[derive(Debug, Error)]
pub enum MaskInputError {
    #[error("{0} masks need a segmentation client")]
    NoClient(&'static str),
    #[error("segmentation service unreachable after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("segmentation service rejected the request: {0}")]
    Rejected(String),
    #[error("resolved mask is empty")]
    EmptyMask,
    #[error("click ({x}, {y}) outside a {width}x{height} image")]
    ClickOutOfBounds { x: u32, y: u32, width: usize, height: usize },
    #[error("mask spec is invalid: {0}")]
    InvalidSpec(String),
    #[error("malformed RLE mask: {0}")]
    Rle(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T> = std::result::Result<T, MaskInputError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub x: u32,
    pub y: u32,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    File { path: PathBuf },
    Clicks { points: Vec<Click> },
    TextPhrase { phrase: String },
}

/// What is sent to a segmentation service.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentQuery {
    Clicks { points: Vec<Click> },
    TextPhrase { phrase: String },
}

/// Row-major run lengths alternating zeros and ones, starting with zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(bits: &Array2<bool>) -> Self {
        let (height, width) = bits.dim();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in bits.iter() {
            if b != current {
                counts.push(run);
                current = b;
                run = 0;
            }
            run += 1;
        }
        counts.push(run);
        Self { height, width, counts }
    }

    pub fn decode(&self) -> Result<Array2<bool>> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.height * self.width) as u64 {
            return Err(MaskInputError::Rle(format!(
                "runs cover {total} pixels, expected {}",
                self.height * self.width
            )));
        }
        let mut flat = Vec::with_capacity(self.height * self.width);
        for (i, &c) in self.counts.iter().enumerate() {
            flat.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Array2::from_shape_vec((self.height, self.width), flat).map_err(|e| MaskInputError::Rle(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: RleMask,
    pub confidence: f64,
}

pub trait SegmentationClient: Send + Sync {
    fn segment(&self, image: &ImageTensor, query: &SegmentQuery) -> Result<SegmentResponse>;
}

/// Returns a disk around the mean positive click; phrases give a centred
/// disk.
#[derive(Debug, Clone)]
pub struct DiskSegmenter {
    pub radius: f64,
}

impl SegmentationClient for DiskSegmenter {
    fn segment(&self, image: &ImageTensor, query: &SegmentQuery) -> Result<SegmentResponse> {
        let (h, w) = image.resolution();
        let (cy, cx) = match query {
            SegmentQuery::Clicks { points } => {
                let pos: Vec<_> = points.iter().filter(|p| p.positive).collect();
                if pos.is_empty() {
                    return Ok(SegmentResponse {
                        mask: RleMask::encode(&Array2::from_elem((h, w), false)),
                        confidence: 0.0,
                    });
                }
                let n = pos.len() as f64;
                (
                    pos.iter().map(|p| p.y as f64).sum::<f64>() / n,
                    pos.iter().map(|p| p.x as f64).sum::<f64>() / n,
                )
            }
            SegmentQuery::TextPhrase { .. } => ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0),
        };
        let bits = Array2::from_shape_fn((h, w), |(y, x)| {
            (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= self.radius * self.radius
        });
        Ok(SegmentResponse {
            mask: RleMask::encode(&bits),
            confidence: 1.0,
        })
    }
}

/// Serves recorded responses keyed by query.
#[derive(Debug, Clone, Default)]
pub struct ReplaySegmenter {
    pub responses: HashMap<SegmentQuery, SegmentResponse>,
}

impl SegmentationClient for ReplaySegmenter {
    fn segment(&self, _: &ImageTensor, query: &SegmentQuery) -> Result<SegmentResponse> {
        self.responses
            .get(query)
            .cloned()
            .ok_or_else(|| MaskInputError::Rejected(format!("no recording for {query:?}")))
    }
}

/// SHA-256 over image dimensions and 8-bit pixels.
pub fn image_digest(image: &ImageTensor) -> String {
    let rgb = image.to_rgb();
    let mut hasher = Sha256::new();
    hasher.update((rgb.width() as u64).to_le_bytes());
    hasher.update((rgb.height() as u64).to_le_bytes());
    hasher.update(rgb.as_raw());
    hex::encode(hasher.finalize())
}

fn query_digest(query: &SegmentQuery) -> String {
    let json = serde_json::to_vec(query).expect("query serializes");
    hex::encode(Sha256::digest(json))
}

/// Thread-safe memo of client responses keyed by `(image hash, query hash)`.
#[derive(Debug, Default)]
pub struct MaskCache {
    entries: Mutex<HashMap<(String, String), SpatialMask>>,
    client_calls: AtomicUsize,
}

impl MaskCache {
    pub fn client_calls(&self) -> usize {
        self.client_calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default, Clone)]
pub struct MaskResolver {
    pub client: Option<Arc<dyn SegmentationClient>>,
    pub cache: Arc<MaskCache>,
}

impl MaskResolver {
    pub fn new(client: Option<Arc<dyn SegmentationClient>>) -> Self {
        Self {
            client,
            cache: Arc::default(),
        }
    }

    /// Full-resolution source mask for `image`.
    pub fn resolve(&self, spec: &MaskSpec, image: &ImageTensor) -> Result<SpatialMask> {
        let (h, w) = image.resolution();
        let query = match spec {
            MaskSpec::File { path } => {
                let mask = SpatialMask::load(path)?;
                if mask.resolution() != (h, w) {
                    return Err(MaskError::Resolution {
                        got: mask.resolution(),
                        expected: (h, w),
                    }
                    .into());
                }
                if mask.is_empty() {
                    return Err(MaskInputError::EmptyMask);
                }
                return Ok(mask);
            }
            MaskSpec::Clicks { points } => {
                if points.is_empty() {
                    return Err(MaskInputError::InvalidSpec("no click points".into()));
                }
                if let Some(p) = points.iter().find(|p| p.x as usize >= w || p.y as usize >= h) {
                    return Err(MaskInputError::ClickOutOfBounds {
                        x: p.x,
                        y: p.y,
                        width: w,
                        height: h,
                    });
                }
                SegmentQuery::Clicks { points: points.clone() }
            }
            MaskSpec::TextPhrase { phrase } => {
                if phrase.trim().is_empty() {
                    return Err(MaskInputError::InvalidSpec("empty phrase".into()));
                }
                SegmentQuery::TextPhrase { phrase: phrase.clone() }
            }
        };
        let key = (image_digest(image), query_digest(&query));
        if let Some(hit) = self.cache.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let client = self.client.as_ref().ok_or(MaskInputError::NoClient(match query {
            SegmentQuery::Clicks { .. } => "click",
            SegmentQuery::TextPhrase { .. } => "text-phrase",
        }))?;
        self.cache.client_calls.fetch_add(1, Ordering::SeqCst);
        let response = client.segment(image, &query)?;
        let bits = response.mask.decode()?;
        if bits.dim() != (h, w) {
            return Err(MaskError::Resolution {
                got: bits.dim(),
                expected: (h, w),
            }
            .into());
        }
        let mask = SpatialMask::from_binary(&bits);
        if mask.is_empty() {
            return Err(MaskInputError::EmptyMask);
        }
        self.cache
            .entries
            .lock()
            .expect("cache lock")
            .insert(key, mask.clone());
        Ok(mask)
    }
}
