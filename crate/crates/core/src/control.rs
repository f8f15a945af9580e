//! Attention controllers applied at instrumented sites of the denoiser.
//!
//! Self-attention sites combine a background branch sourced from the
//! inversion trace, an optionally gated object branch, and a per-token
//! composition guided by the target mask. Cross-attention sites route masked
//! query tokens to the target prompt and all other tokens to the null prompt.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    self, extract, masked_attention, scaled_dot_attention, scatter, AttentionError, FeatureMatrix,
    IndexList, KeyMask,
};
use crate::grid;

/// Side length of the grid that cross-attention maps are accumulated on.
pub const REFERENCE_GRID: usize = 64;

/// Domain tag mixed into the schedule seed for the normal-attention stream.
const NORMAL_MIX_STREAM_TAG: u64 = 0x6e6f_726d_616c_6d78;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("expected a {expected:?} site, got {got:?}")]
    WrongSiteKind { expected: AttentionKind, got: AttentionKind },
    #[error("attention map shape {got:?} does not match site grid {grid:?} x {tokens} tokens")]
    MapShape {
        got: (usize, usize),
        grid: (usize, usize),
        tokens: usize,
    },
}

pub type Result<T> = std::result::Result<T, ControlError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// Where an attention call happens: denoising step, layer (numbered within
/// its kind, in forward-pass order) and the spatial token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionSite {
    pub step_index: usize,
    pub layer_index: usize,
    pub kind: AttentionKind,
    pub token_grid: (usize, usize),
}

impl AttentionSite {
    pub fn n_tokens(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }
}

/// Whether the background branch is applied at every self-attention site or
/// only where the object gate is open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundGating {
    #[default]
    AllSites,
    SameAsObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSchedule {
    /// Object branch fires only when `step_index > step_threshold`.
    pub step_threshold: usize,
    /// Object branch fires only when `layer_index > layer_threshold`.
    pub layer_threshold: usize,
    pub normal_attention_fraction: f64,
    /// Steps during which the source mask is used as target mask.
    pub mask_switch_step: usize,
    pub rng_seed: u64,
    pub retain_object: bool,
    pub background_gating: BackgroundGating,
}

impl Default for EditSchedule {
    fn default() -> Self {
        Self {
            step_threshold: 3,
            layer_threshold: 8,
            normal_attention_fraction: 0.10,
            mask_switch_step: 10,
            rng_seed: 0,
            retain_object: false,
            background_gating: BackgroundGating::AllSites,
        }
    }
}

impl EditSchedule {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.step_threshold >= total_steps {
            return Err(ControlError::InvalidSchedule(format!(
                "step threshold {} must be below the step count {total_steps}",
                self.step_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.normal_attention_fraction) {
            return Err(ControlError::InvalidSchedule(format!(
                "normal attention fraction {} outside [0, 1]",
                self.normal_attention_fraction
            )));
        }
        if self.mask_switch_step > total_steps {
            return Err(ControlError::InvalidSchedule(format!(
                "mask switch step {} exceeds the step count {total_steps}",
                self.mask_switch_step
            )));
        }
        Ok(())
    }

    /// Gate of the object-retention branch.
    pub fn object_gate_open(&self, site: &AttentionSite) -> bool {
        self.retain_object
            && site.step_index > self.step_threshold
            && site.layer_index > self.layer_threshold
    }

    pub fn background_active(&self, site: &AttentionSite) -> bool {
        match self.background_gating {
            BackgroundGating::AllSites => true,
            BackgroundGating::SameAsObject => self.object_gate_open(site),
        }
    }
}

/// Background content: attention of the current queries over the trace
/// keys/values, admitting only tokens outside the source mask.
pub fn preserve_background(
    q: &FeatureMatrix,
    k_src: &FeatureMatrix,
    v_src: &FeatureMatrix,
    source_mask: &KeyMask,
) -> Result<FeatureMatrix> {
    Ok(masked_attention(q, k_src, v_src, &source_mask.complement())?)
}

/// Object content. Past the step and layer thresholds, and only when the
/// object is retained, the queries read trace features inside the target
/// mask; otherwise this is plain self-attention over the current features.
#[allow(clippy::too_many_arguments)]
pub fn preserve_foreground(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    k_src: &FeatureMatrix,
    v_src: &FeatureMatrix,
    target_mask: &KeyMask,
    site: &AttentionSite,
    schedule: &EditSchedule,
) -> Result<FeatureMatrix> {
    if schedule.object_gate_open(site) {
        Ok(masked_attention(q, k_src, v_src, target_mask)?)
    } else {
        Ok(scaled_dot_attention(q, k, v)?)
    }
}

/// `M ⊙ fg + (1 - M) ⊙ bg` with a binary per-token mask.
pub fn compose_location(
    foreground: &FeatureMatrix,
    background: &FeatureMatrix,
    target_mask: &KeyMask,
) -> Result<FeatureMatrix> {
    if foreground.data().dim() != background.data().dim() || target_mask.len() != foreground.n_tokens() {
        return Err(AttentionError::Dimension(format!(
            "cannot compose {:?} and {:?} under a {}-token mask",
            foreground.data().dim(),
            background.data().dim(),
            target_mask.len()
        ))
        .into());
    }
    let mut out = background.data().clone();
    for (p, inside) in target_mask.iter().enumerate() {
        if inside {
            out.row_mut(p).assign(&foreground.row(p));
        }
    }
    Ok(FeatureMatrix::new(out)?)
}

/// One routing target for [`partitioned_attention`]: the tokens in `tokens`
/// attend to `keys`/`values` only.
#[derive(Debug, Clone, Copy)]
pub struct Route<'a> {
    pub keys: &'a FeatureMatrix,
    pub values: &'a FeatureMatrix,
    pub tokens: &'a KeyMask,
}

/// Splits the query rows by route, attends each group to its own context and
/// reassembles the rows at their original positions. Token masks must
/// partition the query rows; empty groups are skipped.
pub fn partitioned_attention(q: &FeatureMatrix, routes: &[Route<'_>]) -> Result<FeatureMatrix> {
    let mut parts: Vec<(FeatureMatrix, IndexList)> = Vec::with_capacity(routes.len());
    let mut value_dim = None;
    for route in routes {
        if *value_dim.get_or_insert(route.values.dim()) != route.values.dim() {
            return Err(AttentionError::Dimension("routes disagree on value dim".into()).into());
        }
        let (q_part, idx) = extract(q, route.tokens)?;
        if idx.is_empty() {
            continue;
        }
        parts.push((scaled_dot_attention(&q_part, route.keys, route.values)?, idx));
    }
    Ok(scatter(&parts, q.n_tokens())?)
}

/// Cross-attention where tokens inside the target mask attend to the target
/// prompt and the rest attend to the null prompt.
pub fn localized_cross_attention(
    q: &FeatureMatrix,
    k_target: &FeatureMatrix,
    v_target: &FeatureMatrix,
    k_null: &FeatureMatrix,
    v_null: &FeatureMatrix,
    target_mask: &KeyMask,
) -> Result<FeatureMatrix> {
    let outside = target_mask.complement();
    partitioned_attention(
        q,
        &[
            Route {
                keys: k_target,
                values: v_target,
                tokens: target_mask,
            },
            Route {
                keys: k_null,
                values: v_null,
                tokens: &outside,
            },
        ],
    )
}

/// Seeded per-site decision to fall back to plain self-attention.
///
/// Pure in `(rng_seed, step_index, layer_index)`: each site draws from its
/// own ChaCha stream.
pub fn should_use_normal_self_attention(site: &AttentionSite, schedule: &EditSchedule) -> bool {
    let fraction = schedule.normal_attention_fraction;
    if fraction <= 0.0 {
        return false;
    }
    if fraction >= 1.0 {
        return true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.rng_seed ^ NORMAL_MIX_STREAM_TAG);
    rng.set_stream(((site.step_index as u64) << 32) | site.layer_index as u64);
    rng.random::<f64>() < fraction
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Recorded,
    /// No object tokens were supplied; the aggregate is unchanged.
    SkippedNoObjectTokens,
}

/// Object-token cross-attention mass accumulated on a fixed reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionAggregate {
    map: Array2<f64>,
    sample_count: usize,
}

impl Default for CrossAttentionAggregate {
    fn default() -> Self {
        Self::new(REFERENCE_GRID)
    }
}

impl CrossAttentionAggregate {
    pub fn new(reference_side: usize) -> Self {
        Self {
            map: Array2::zeros((reference_side, reference_side)),
            sample_count: 0,
        }
    }

    pub fn from_parts(map: Array2<f64>, sample_count: usize) -> Self {
        Self { map, sample_count }
    }

    pub fn reference_grid(&self) -> (usize, usize) {
        self.map.dim()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Sum of all recorded contributions.
    pub fn accumulated(&self) -> &Array2<f64> {
        &self.map
    }

    pub fn mean_map(&self) -> Option<Array2<f64>> {
        (self.sample_count > 0).then(|| &self.map / self.sample_count as f64)
    }

    /// Adds one site's attention mass on the object tokens.
    ///
    /// `probs` is `(spatial tokens x text tokens)` with rows summing to one.
    pub fn record(
        &mut self,
        site: &AttentionSite,
        probs: &Array2<f64>,
        object_tokens: &IndexList,
    ) -> Result<RecordOutcome> {
        if site.kind != AttentionKind::CrossAttention {
            return Err(ControlError::WrongSiteKind {
                expected: AttentionKind::CrossAttention,
                got: site.kind,
            });
        }
        let (rows, cols) = probs.dim();
        if rows != site.n_tokens() || object_tokens.positions().iter().any(|&p| p >= cols) {
            return Err(ControlError::MapShape {
                got: (rows, cols),
                grid: site.token_grid,
                tokens: cols,
            });
        }
        if object_tokens.is_empty() {
            log::warn!("no object tokens to aggregate at {site:?}");
            return Ok(RecordOutcome::SkippedNoObjectTokens);
        }
        let (h, w) = site.token_grid;
        let mass = Array2::from_shape_fn((h, w), |(y, x)| {
            let row = probs.row(y * w + x);
            object_tokens.positions().iter().map(|&j| row[j]).sum::<f64>()
        });
        self.map += &grid::resample_area(&mass, self.map.dim());
        self.sample_count += 1;
        Ok(RecordOutcome::Recorded)
    }
}

/// Convenience wrapper so callers holding attention matrices can reuse the
/// core softmax when recording.
pub fn cross_attention_probs(q: &FeatureMatrix, k: &FeatureMatrix) -> Result<Array2<f64>> {
    Ok(attention::attention_weights(q, k, None)?)
}
