//! Single-head scaled dot-product attention with key-side masking, plus the
//! row extraction and reassembly used to route token subsets to different
//! attention contexts.
//!
//! Everything here is pure. Multi-head layers call into this module once per
//! head.

use ndarray::{Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("mask admits no keys")]
    EmptyMask,
    #[error("token coverage error: {0}")]
    Coverage(String),
    #[error("feature matrix contains a non-finite value")]
    NonFinite,
    #[error("invalid mask bit {value} at position {position}")]
    InvalidMaskBit { position: usize, value: u8 },
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// A `(tokens x dim)` matrix holding query, key or value rows for one head.
///
/// Matrices built through [`FeatureMatrix::new`] have at least one row; the
/// only way to obtain a zero-row matrix is [`FeatureMatrix::empty`], which is
/// what [`extract`] returns for an empty selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(AttentionError::Dimension(format!(
                "feature matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite);
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(AttentionError::Dimension("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| AttentionError::Dimension(e.to_string()))?;
        Self::new(data)
    }

    /// Zero-row matrix with the given feature width.
    pub fn empty(dim: usize) -> Self {
        Self {
            data: Array2::zeros((0, dim)),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.row(i)
    }
}

/// Binary mask over the key (or token) axis. `true` admits the token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyMask(Vec<bool>);

impl KeyMask {
    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Builds a mask from 0/1 bytes; any other value is rejected.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .enumerate()
            .map(|(position, &value)| match value {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(AttentionError::InvalidMaskBit { position, value }),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|b| *b)
    }

    pub fn all(&self) -> bool {
        self.0.iter().all(|b| *b)
    }

    pub fn complement(&self) -> Self {
        Self(self.0.iter().map(|b| !b).collect())
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().copied()
    }
}

/// Strictly increasing token positions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexList(Vec<usize>);

impl IndexList {
    pub fn new(positions: Vec<usize>, n_tokens: usize) -> Result<Self> {
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AttentionError::Coverage(
                "index list must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = positions.last() {
            if last >= n_tokens {
                return Err(AttentionError::Coverage(format!(
                    "index {last} out of range for {n_tokens} tokens"
                )));
            }
        }
        Ok(Self(positions))
    }

    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_qkv(q: &FeatureMatrix, k: &FeatureMatrix, v: &FeatureMatrix) -> Result<()> {
    if k.n_tokens() != v.n_tokens() {
        return Err(AttentionError::Dimension(format!(
            "key/value token counts differ: {} vs {}",
            k.n_tokens(),
            v.n_tokens()
        )));
    }
    if q.dim() != k.dim() {
        return Err(AttentionError::Dimension(format!(
            "query dim {} does not match key dim {}",
            q.dim(),
            k.dim()
        )));
    }
    if k.is_empty() {
        return Err(AttentionError::Dimension("no keys".into()));
    }
    Ok(())
}

/// Row-stochastic attention weights `softmax(Q K^T / sqrt(d))`.
///
/// Keys whose mask bit is 0 get an additive `-inf` logit and therefore an
/// exact zero weight.
pub fn attention_weights(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    mask: Option<&KeyMask>,
) -> Result<Array2<f64>> {
    if q.dim() != k.dim() {
        return Err(AttentionError::Dimension(format!(
            "query dim {} does not match key dim {}",
            q.dim(),
            k.dim()
        )));
    }
    if let Some(mask) = mask {
        if mask.len() != k.n_tokens() {
            return Err(AttentionError::Dimension(format!(
                "mask length {} does not match {} keys",
                mask.len(),
                k.n_tokens()
            )));
        }
        if !mask.any() {
            return Err(AttentionError::EmptyMask);
        }
    }
    let scale = 1.0 / (q.dim() as f64).sqrt();
    let mut scores = q.data.dot(&k.data.t());
    scores.mapv_inplace(|s| s * scale);
    if let Some(mask) = mask {
        for mut row in scores.rows_mut() {
            for (s, admitted) in row.iter_mut().zip(mask.iter()) {
                if !admitted {
                    *s += f64::NEG_INFINITY;
                }
            }
        }
    }
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|s| s / sum);
    }
    Ok(scores)
}

pub fn scaled_dot_attention(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    check_qkv(q, k, v)?;
    let weights = attention_weights(q, k, None)?;
    Ok(FeatureMatrix {
        data: weights.dot(&v.data),
    })
}

/// Attention restricted to the keys whose mask bit is 1.
pub fn masked_attention(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    mask: &KeyMask,
) -> Result<FeatureMatrix> {
    check_qkv(q, k, v)?;
    let weights = attention_weights(q, k, Some(mask))?;
    Ok(FeatureMatrix {
        data: weights.dot(&v.data),
    })
}

/// Selects the rows of `x` whose mask bit is 1, keeping their original order.
pub fn extract(x: &FeatureMatrix, mask: &KeyMask) -> Result<(FeatureMatrix, IndexList)> {
    if mask.len() != x.n_tokens() {
        return Err(AttentionError::Dimension(format!(
            "mask length {} does not match {} rows",
            mask.len(),
            x.n_tokens()
        )));
    }
    let positions: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.then_some(i))
        .collect();
    let rows = x.data.select(Axis(0), &positions);
    Ok((FeatureMatrix { data: rows }, IndexList(positions)))
}

/// Reassembles row blocks into one matrix, each row landing at the position
/// recorded in its index list. The lists must partition `0..n_tokens`.
pub fn scatter(parts: &[(FeatureMatrix, IndexList)], n_tokens: usize) -> Result<FeatureMatrix> {
    let dim = parts
        .first()
        .map(|(m, _)| m.dim())
        .ok_or_else(|| AttentionError::Coverage("no parts to scatter".into()))?;
    let mut out = Array2::zeros((n_tokens, dim));
    let mut owned = vec![false; n_tokens];
    for (part, idx) in parts {
        if part.dim() != dim {
            return Err(AttentionError::Dimension(format!(
                "part dim {} differs from {dim}",
                part.dim()
            )));
        }
        if part.n_tokens() != idx.len() {
            return Err(AttentionError::Dimension(format!(
                "part has {} rows but {} positions",
                part.n_tokens(),
                idx.len()
            )));
        }
        for (row, &p) in idx.positions().iter().enumerate() {
            if p >= n_tokens {
                return Err(AttentionError::Coverage(format!(
                    "position {p} out of range for {n_tokens} tokens"
                )));
            }
            if owned[p] {
                return Err(AttentionError::Coverage(format!(
                    "position {p} claimed by two parts"
                )));
            }
            owned[p] = true;
            out.row_mut(p).assign(&part.data.row(row));
        }
    }
    if let Some(gap) = owned.iter().position(|o| !o) {
        return Err(AttentionError::Coverage(format!(
            "position {gap} not covered by any part"
        )));
    }
    Ok(FeatureMatrix { data: out })
}
