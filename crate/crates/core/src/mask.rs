//! Source/target mask policies per editing task, mask refinement from
//! aggregated cross-attention, and the morphology used by those policies.

use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::KeyMask;
use crate::control::CrossAttentionAggregate;
use crate::grid;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask value {value} at ({y}, {x}) outside [0, 1]")]
    OutOfRange { y: usize, x: usize, value: f64 },
    #[error("refinement needs a cross-attention aggregate at step {step}")]
    MissingAggregate { step: usize },
    #[error("aggregated cross-attention map is constant")]
    DegenerateMap,
    #[error("invalid mask policy: {0}")]
    InvalidConfig(String),
    #[error("mask resolution {got:?} does not match {expected:?}")]
    Resolution {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("mask image: {0}")]
    Image(#[from] image::ImageError),
    #[error("mask io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// Full-resolution mask with values in `[0, 1]`; its binary view thresholds
/// at 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    values: Array2<f64>,
}

impl SpatialMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((y, x), &value)) = values
            .indexed_iter()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(MaskError::OutOfRange { y, x, value });
        }
        Ok(Self { values })
    }

    pub fn zeros(resolution: (usize, usize)) -> Self {
        Self {
            values: Array2::zeros(resolution),
        }
    }

    pub fn ones(resolution: (usize, usize)) -> Self {
        Self {
            values: Array2::ones(resolution),
        }
    }

    pub fn from_binary(bits: &Array2<bool>) -> Self {
        Self {
            values: bits.mapv(|b| if b { 1.0 } else { 0.0 }),
        }
    }

    pub fn from_fn(resolution: (usize, usize), f: impl Fn(usize, usize) -> bool) -> Self {
        Self::from_binary(&Array2::from_shape_fn(resolution, |(y, x)| f(y, x)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// `(height, width)`
    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn binarized(&self) -> Array2<bool> {
        self.values.mapv(|v| v >= 0.5)
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|v| **v >= 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    /// Re-thresholded copy holding only 0 and 1.
    pub fn to_binary(&self) -> Self {
        Self::from_binary(&self.binarized())
    }

    pub fn complement(&self) -> Self {
        Self {
            values: self.binarized().mapv(|b| if b { 0.0 } else { 1.0 }),
        }
    }

    /// Nearest-neighbour resize of the binary view.
    pub fn resized(&self, resolution: (usize, usize)) -> Self {
        Self::from_binary(&grid::resample_nearest(&self.binarized(), resolution))
    }

    pub fn iou(&self, other: &SpatialMask) -> f64 {
        let (a, b) = (self.binarized(), other.binarized());
        let inter = a.iter().zip(b.iter()).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(b.iter()).filter(|(x, y)| **x || **y).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        let (h, w) = self.resolution();
        let bits = self.binarized();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([if bits[[y as usize, x as usize]] { 255 } else { 0 }])
        })
    }

    /// Nonzero pixels become 1. Colour images are reduced to luma first.
    pub fn from_image(img: &image::DynamicImage) -> Self {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Self::from_fn((h as usize, w as usize), |y, x| {
            gray.get_pixel(x as u32, y as u32)[0] != 0
        })
    }

    /// Single-channel 8-bit PNG, set pixels written as 255.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_gray_image()
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_image(&image::load_from_memory(bytes)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_image(&image::open(path)?))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ReplaceObject,
    ChangePoseView,
    AlterBackground,
    RemoveObject,
    ModifyRegion,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::ReplaceObject,
        TaskKind::ChangePoseView,
        TaskKind::AlterBackground,
        TaskKind::RemoveObject,
        TaskKind::ModifyRegion,
    ];

    /// Short name used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            TaskKind::ReplaceObject => "replace",
            TaskKind::ChangePoseView => "pose",
            TaskKind::AlterBackground => "background",
            TaskKind::RemoveObject => "remove",
            TaskKind::ModifyRegion => "region",
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.cli_name() == s)
            .ok_or_else(|| format!("unknown task '{s}' (expected replace, pose, background, remove or region)"))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.cli_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    None,
    #[default]
    FromCrossAttention,
    HullExtension,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizeRule {
    /// Threshold at `mean + 0.5 * std` of the normalized map.
    #[default]
    MeanPlusStd,
    FixedThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicyConfig {
    pub hull_dilation_px: usize,
    pub expand_px: usize,
    pub refinement: Refinement,
    pub binarize_rule: BinarizeRule,
}

impl Default for MaskPolicyConfig {
    fn default() -> Self {
        Self {
            hull_dilation_px: 8,
            expand_px: 0,
            refinement: Refinement::FromCrossAttention,
            binarize_rule: BinarizeRule::MeanPlusStd,
        }
    }
}

impl MaskPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if let BinarizeRule::FixedThreshold(theta) = self.binarize_rule {
            if !(theta > 0.0 && theta < 1.0) {
                return Err(MaskError::InvalidConfig(format!(
                    "fixed threshold {theta} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Target mask for one denoising step.
pub fn target_mask_policy(
    task: TaskKind,
    source: &SpatialMask,
    aggregate: Option<&CrossAttentionAggregate>,
    cfg: &MaskPolicyConfig,
    step_index: usize,
    switch_step: usize,
) -> Result<SpatialMask> {
    match task {
        TaskKind::RemoveObject => Ok(SpatialMask::zeros(source.resolution())),
        TaskKind::AlterBackground => Ok(source.clone()),
        TaskKind::ModifyRegion => Ok(dilate(source, cfg.expand_px)),
        TaskKind::ReplaceObject | TaskKind::ChangePoseView => {
            if step_index < switch_step {
                return Ok(source.clone());
            }
            match cfg.refinement {
                Refinement::None => Ok(source.clone()),
                Refinement::HullExtension => Ok(hull_extension(source, cfg)),
                Refinement::FromCrossAttention => {
                    let aggregate = aggregate
                        .filter(|a| a.sample_count() > 0)
                        .ok_or(MaskError::MissingAggregate { step: step_index })?;
                    match refine_mask_from_attention(aggregate, cfg, source.resolution()) {
                        Err(MaskError::DegenerateMap) => {
                            log::warn!("constant cross-attention map at step {step_index}; using hull extension");
                            Ok(hull_extension(source, cfg))
                        }
                        other => other,
                    }
                }
            }
        }
    }
}

fn hull_extension(source: &SpatialMask, cfg: &MaskPolicyConfig) -> SpatialMask {
    dilate(&convex_hull(source), cfg.hull_dilation_px)
}

/// Mean aggregate map, min-max normalized and binarized on the reference
/// grid, then upsampled (nearest) to `resolution`.
pub fn refine_mask_from_attention(
    aggregate: &CrossAttentionAggregate,
    cfg: &MaskPolicyConfig,
    resolution: (usize, usize),
) -> Result<SpatialMask> {
    cfg.validate()?;
    let mean = aggregate
        .mean_map()
        .ok_or(MaskError::MissingAggregate { step: 0 })?;
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > f64::EPSILON * hi.abs().max(1e-300)) {
        return Err(MaskError::DegenerateMap);
    }
    let normalized = mean.mapv(|v| (v - lo) / (hi - lo));
    let threshold = match cfg.binarize_rule {
        BinarizeRule::MeanPlusStd => {
            let mu = normalized.mean().unwrap_or(0.0);
            mu + 0.5 * normalized.std(0.0)
        }
        BinarizeRule::FixedThreshold(theta) => theta,
    };
    let bits = normalized.mapv(|v| v >= threshold);
    Ok(SpatialMask::from_binary(&grid::resample_nearest(&bits, resolution)))
}

/// Per-site token mask: area-average to the grid, binarize at 0.5, flatten
/// row-major.
pub fn resample_mask(mask: &SpatialMask, token_grid: (usize, usize)) -> KeyMask {
    let averaged = grid::resample_area(&mask.values, token_grid);
    KeyMask::from_bools(averaged.iter().map(|v| *v >= 0.5 - 1e-12).collect())
}

/// Grayscale dilation (max filter) with a disk of the given radius.
pub fn dilate(mask: &SpatialMask, radius_px: usize) -> SpatialMask {
    if radius_px == 0 {
        return mask.clone();
    }
    let r = radius_px as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let (h, w) = mask.resolution();
    let src = &mask.values;
    let values = Array2::from_shape_fn((h, w), |(y, x)| {
        offsets
            .iter()
            .filter_map(|(dy, dx)| {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w)
                    .then(|| src[[sy as usize, sx as usize]])
            })
            .fold(0.0, f64::max)
    });
    SpatialMask { values }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise hull of integer points (monotone chain), without
/// collinear boundary points.
fn hull_polygon(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_polygon(poly: &[(i64, i64)], p: (i64, i64)) -> bool {
    match poly.len() {
        0 => false,
        1 => poly[0] == p,
        2 => {
            let (a, b) = (poly[0], poly[1]);
            cross(a, b, p) == 0
                && p.0 >= a.0.min(b.0)
                && p.0 <= a.0.max(b.0)
                && p.1 >= a.1.min(b.1)
                && p.1 <= a.1.max(b.1)
        }
        n => (0..n).all(|i| cross(poly[i], poly[(i + 1) % n], p) >= 0),
    }
}

/// Binary convex hull of the set pixels (pixel centres on the integer grid).
pub fn convex_hull(mask: &SpatialMask) -> SpatialMask {
    let bits = mask.binarized();
    let pts: Vec<(i64, i64)> = bits
        .indexed_iter()
        .filter(|(_, b)| **b)
        .map(|((y, x), _)| (x as i64, y as i64))
        .collect();
    let poly = hull_polygon(pts);
    SpatialMask::from_fn(mask.resolution(), |y, x| {
        inside_polygon(&poly, (x as i64, y as i64))
    })
}
