//! Denoiser abstraction with instrumented attention sites.

mod toy;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionError, FeatureMatrix, IndexList};
use crate::control::{AttentionKind, AttentionSite};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, LatentTensor};

pub use toy::{ToyBackend, ToyBlock, ToyConfig, ToyParams};

pub type HookError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("hook at {site} returned {reason}")]
    Intervention { site: String, reason: String },
    #[error("hook at {site} failed: {source}")]
    Hook {
        site: String,
        #[source]
        source: HookError,
    },
    #[error("latent shape {got:?} does not match backend shape {expected:?}")]
    LatentShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("image size {got:?} not accepted, backend expects {expected:?}")]
    ImageSize {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One attention site in forward-pass order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteSpec {
    pub kind: AttentionKind,
    /// Position among sites of the same kind.
    pub layer_index: usize,
    pub token_grid: (usize, usize),
    pub heads: usize,
    pub head_dim: usize,
}

impl SiteSpec {
    pub fn n_tokens(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }

    pub fn at_step(&self, step_index: usize) -> AttentionSite {
        AttentionSite {
            step_index,
            layer_index: self.layer_index,
            kind: self.kind,
            token_grid: self.token_grid,
        }
    }

    pub fn label(&self) -> String {
        let kind = match self.kind {
            AttentionKind::SelfAttention => "self",
            AttentionKind::CrossAttention => "cross",
        };
        format!("{kind}[{}]@{}x{}", self.layer_index, self.token_grid.0, self.token_grid.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// `(channels, height, width)`
    pub latent_shape: (usize, usize, usize),
    pub downsample_factor: usize,
    pub sites: Vec<SiteSpec>,
    pub text_tokens: usize,
    pub embed_dim: usize,
    pub schedule: NoiseSchedule,
}

impl BackendDescriptor {
    pub fn self_attention_layer_count(&self) -> usize {
        self.count(AttentionKind::SelfAttention)
    }

    pub fn cross_attention_layer_count(&self) -> usize {
        self.count(AttentionKind::CrossAttention)
    }

    fn count(&self, kind: AttentionKind) -> usize {
        self.sites.iter().filter(|s| s.kind == kind).count()
    }

    pub fn sites_of(&self, kind: AttentionKind) -> impl Iterator<Item = &SiteSpec> {
        self.sites.iter().filter(move |s| s.kind == kind)
    }

    /// Pixel resolution `(height, width)` matching the latent shape.
    pub fn image_resolution(&self) -> (usize, usize) {
        (
            self.latent_shape.1 * self.downsample_factor,
            self.latent_shape.2 * self.downsample_factor,
        )
    }

    pub fn check_latent(&self, z: &LatentTensor) -> Result<(), BackendError> {
        if z.shape() != self.latent_shape || z.data.dim().0 != 1 {
            return Err(BackendError::LatentShape {
                expected: self.latent_shape,
                got: z.shape(),
            });
        }
        if !z.is_finite() {
            return Err(BackendError::NonFinite("input latent".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub token_embeddings: Array2<f64>,
    pub token_texts: Vec<String>,
    pub object_token_positions: IndexList,
    pub truncated: bool,
}

impl PromptEmbedding {
    pub fn n_tokens(&self) -> usize {
        self.token_embeddings.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub q: FeatureMatrix,
    pub k: FeatureMatrix,
    pub v: FeatureMatrix,
}

/// Everything a hook sees at one site.
#[derive(Debug)]
pub struct AttentionCall<'a> {
    pub site: SiteSpec,
    pub heads: &'a [HeadProjections],
    /// Cross-attention sites only: per auxiliary context, per head `(K, V)`.
    pub aux: &'a [Vec<(FeatureMatrix, FeatureMatrix)>],
}

impl AttentionCall<'_> {
    /// Plain per-head attention output.
    pub fn default_output(&self) -> Result<Vec<FeatureMatrix>, AttentionError> {
        self.heads
            .iter()
            .map(|h| attention::scaled_dot_attention(&h.q, &h.k, &h.v))
            .collect()
    }
}

/// Output-replacement callback at every attention site. Returning `None`
/// keeps the backend's own attention output.
pub trait AttentionHook {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> Result<Option<Vec<FeatureMatrix>>, HookError>;

    /// Whether the hook wants to see `site` at all. Backends may skip
    /// building the call (and any host copies) when this is false.
    fn observes(&self, _site: &SiteSpec) -> bool {
        true
    }
}

pub struct NoHooks;

impl AttentionHook for NoHooks {
    fn on_attention(&mut self, _: &AttentionCall<'_>) -> Result<Option<Vec<FeatureMatrix>>, HookError> {
        Ok(None)
    }

    fn observes(&self, _: &SiteSpec) -> bool {
        false
    }
}

/// Returns the plain output explicitly; should match [`NoHooks`].
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> Result<Option<Vec<FeatureMatrix>>, HookError> {
        Ok(Some(call.default_output()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteCapture {
    pub site: SiteSpec,
    pub heads: Vec<HeadProjections>,
    /// Per-head attention probabilities, when requested.
    pub probs: Option<Vec<Array2<f64>>>,
}

/// Records projections without intervening.
#[derive(Debug, Default)]
pub struct CaptureHook {
    pub kinds: Option<AttentionKind>,
    pub with_probs: bool,
    pub captures: Vec<SiteCapture>,
}

impl CaptureHook {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn only(kind: AttentionKind) -> Self {
        Self {
            kinds: Some(kind),
            ..Self::default()
        }
    }
}

impl AttentionHook for CaptureHook {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> Result<Option<Vec<FeatureMatrix>>, HookError> {
        if self.kinds.is_some_and(|k| k != call.site.kind) {
            return Ok(None);
        }
        let probs = if self.with_probs {
            Some(
                call.heads
                    .iter()
                    .map(|h| attention::attention_weights(&h.q, &h.k, None))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        self.captures.push(SiteCapture {
            site: call.site,
            heads: call.heads.to_vec(),
            probs,
        });
        Ok(None)
    }

    fn observes(&self, site: &SiteSpec) -> bool {
        self.kinds.is_none_or(|k| k == site.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub eps: LatentTensor,
    /// Sites in the order the hook saw them.
    pub visited: Vec<SiteSpec>,
}

pub trait DiffusionBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Stable identifier of weights and configuration.
    fn fingerprint(&self) -> String;

    /// Empty prompt gives the null-text embedding. Over-long prompts are
    /// truncated with a warning.
    fn encode_text(&self, prompt: &str, object_word: Option<&str>) -> Result<PromptEmbedding, BackendError>;

    /// Noise prediction. `aux_contexts` are extra text contexts whose key and
    /// value projections are offered to cross-attention hooks.
    fn predict_noise(
        &self,
        z: &LatentTensor,
        timestep: usize,
        cond: &PromptEmbedding,
        aux_contexts: &[&PromptEmbedding],
        hooks: &mut dyn AttentionHook,
    ) -> Result<ForwardOutput, BackendError>;

    fn encode_image(&self, image: &ImageTensor) -> Result<LatentTensor, BackendError>;

    fn decode_latent(&self, z: &LatentTensor) -> Result<ImageTensor, BackendError>;
}

/// Runs `hooks` at one site and validates any replacement. Backends call this
/// so every implementation reports the same errors.
pub fn dispatch_hook(
    hooks: &mut dyn AttentionHook,
    call: &AttentionCall<'_>,
) -> Result<Vec<FeatureMatrix>, BackendError> {
    match run_hook(hooks, call)? {
        Some(out) => Ok(out),
        None => Ok(call.default_output()?),
    }
}

/// Like [`dispatch_hook`] but leaves the plain output to the caller when the
/// hook declines, so a backend can compute it on its own device.
pub fn run_hook(
    hooks: &mut dyn AttentionHook,
    call: &AttentionCall<'_>,
) -> Result<Option<Vec<FeatureMatrix>>, BackendError> {
    let replaced = hooks.on_attention(call).map_err(|source| BackendError::Hook {
        site: call.site.label(),
        source,
    })?;
    let Some(out) = replaced else {
        return Ok(None);
    };
    if out.len() != call.heads.len() {
        return Err(BackendError::Intervention {
            site: call.site.label(),
            reason: format!("{} heads, expected {}", out.len(), call.heads.len()),
        });
    }
    for (o, h) in out.iter().zip(call.heads) {
        let want = (h.q.n_tokens(), h.v.dim());
        if (o.n_tokens(), o.dim()) != want {
            return Err(BackendError::Intervention {
                site: call.site.label(),
                reason: format!("shape {:?}, expected {:?}", (o.n_tokens(), o.dim()), want),
            });
        }
    }
    Ok(Some(out))
}

/// Lowercased alphanumeric words, the toy tokenizer's unit.
pub fn simple_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Positions where the token sequence `needle` occurs in `tokens`.
pub fn find_token_span(tokens: &[String], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > tokens.len() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for start in 0..=tokens.len() - needle.len() {
        if tokens[start..start + needle.len()] == *needle && out.last().is_none_or(|&l| l < start) {
            out.extend(start..start + needle.len());
        }
    }
    out
}
