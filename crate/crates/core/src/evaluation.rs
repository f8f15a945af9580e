//! IMBA-style dataset loading, CLIPScore and masked background distance,
//! and report output.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{self, MaskError, SpatialMask, TaskKind};
use crate::tensor::ImageTensor;

/// Published means for the full benchmark, shown next to ours.
pub const PUBLISHED_CLIP_SCORE: f64 = 29.26;
pub const PUBLISHED_LPIPS_BACKGROUND: f64 = 0.149;

/// Category counts of the complete benchmark.
pub const FULL_COUNTS: CategoryCounts = CategoryCounts {
    total: 104,
    retention: 43,
    modification: 97,
    background: 7,
};

/// Object-region dilation applied before the background metric.
pub const BACKGROUND_DILATION_PX: usize = 8;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset load failed:\n  {}", .offenders.join("\n  "))]
    Load { offenders: Vec<String> },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("category counts {found:?} do not match {expected:?}")]
    CountMismatch {
        expected: CategoryCounts,
        found: CategoryCounts,
    },
    #[error("metric client failed: {0}")]
    Client(String),
    #[error("images differ in size: {0:?} vs {1:?}")]
    Size((usize, usize), (usize, usize)),
    #[error("no records to report")]
    EmptyReport,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbaSample {
    pub id: String,
    /// Relative to the dataset root.
    pub image: PathBuf,
    pub target_prompt: String,
    pub source_mask: PathBuf,
    pub task: TaskKind,
    pub retain_object: bool,
    /// Word of `target_prompt` naming the object; optional.
    #[serde(default)]
    pub object_word: String,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub total: usize,
    pub retention: usize,
    pub modification: usize,
    pub background: usize,
}

impl CategoryCounts {
    pub fn of(samples: &[ImbaSample]) -> Self {
        let background = samples.iter().filter(|s| s.task == TaskKind::AlterBackground).count();
        Self {
            total: samples.len(),
            retention: samples.iter().filter(|s| s.retain_object).count(),
            modification: samples.len() - background,
            background,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbaManifest {
    #[serde(default)]
    pub partial: bool,
    pub counts: CategoryCounts,
    pub samples: Vec<ImbaSample>,
}

#[derive(Debug, Clone)]
pub struct ImbaDataset {
    pub root: PathBuf,
    pub partial: bool,
    pub samples: Vec<ImbaSample>,
}

impl ImbaDataset {
    pub fn image_path(&self, s: &ImbaSample) -> PathBuf {
        self.root.join(&s.image)
    }

    pub fn mask_path(&self, s: &ImbaSample) -> PathBuf {
        self.root.join(&s.source_mask)
    }

    pub fn counts(&self) -> CategoryCounts {
        CategoryCounts::of(&self.samples)
    }
}

/// Loads and validates `<root>/manifest.json`.
pub fn load_imba(root: &Path) -> Result<ImbaDataset> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| EvalError::Load {
        offenders: vec![format!("{}: {e}", path.display())],
    })?;
    let manifest: ImbaManifest = serde_json::from_str(&text).map_err(|e| EvalError::Load {
        offenders: vec![format!("{}: {e}", path.display())],
    })?;
    let mut offenders = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for s in &manifest.samples {
        if !seen.insert(&s.id) {
            offenders.push(format!("{}: duplicate id", s.id));
        }
        for (what, p) in [("image", &s.image), ("mask", &s.source_mask)] {
            if !root.join(p).is_file() {
                offenders.push(format!("{}: missing {what} {}", s.id, p.display()));
            }
        }
        if s.task == TaskKind::RemoveObject && s.retain_object {
            offenders.push(format!("{}: object removal cannot retain the object", s.id));
        }
        if s.task != TaskKind::RemoveObject && s.target_prompt.trim().is_empty() {
            offenders.push(format!("{}: empty target prompt", s.id));
        }
    }
    if !offenders.is_empty() {
        return Err(EvalError::Load { offenders });
    }
    let found = CategoryCounts::of(&manifest.samples);
    if found != manifest.counts {
        return Err(EvalError::CountMismatch {
            expected: manifest.counts,
            found,
        });
    }
    if !manifest.partial && found != FULL_COUNTS {
        return Err(EvalError::CountMismatch {
            expected: FULL_COUNTS,
            found,
        });
    }
    Ok(ImbaDataset {
        root: root.to_path_buf(),
        partial: manifest.partial,
        samples: manifest.samples,
    })
}

/// Joint image-text embedding service.
pub trait EmbeddingClient: Send + Sync {
    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// `100 * max(0, cos(image, text))`.
pub fn clip_score(image: &ImageTensor, prompt: &str, client: &dyn EmbeddingClient) -> Result<f64> {
    let a = client.embed_image(image)?;
    let b = client.embed_text(prompt)?;
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Client(format!(
            "embedding sizes {} and {} are incompatible",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (dot / (na * nb)).max(0.0))
}

/// Perceptual distance between equally sized images.
pub trait PerceptualMetric: Send + Sync {
    /// Short tag written next to reported numbers.
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// Weight-free perceptual proxy: at each level of a 2x box pyramid, per-pixel
/// features (centered RGB, luminance gradients) are unit-normalized and
/// compared by mean squared distance; levels are summed.
#[derive(Debug, Clone, Copy)]
pub struct PyramidMetric {
    pub levels: usize,
}

impl Default for PyramidMetric {
    fn default() -> Self {
        Self { levels: 4 }
    }
}

fn box_down(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(k, y, xx)| {
        x.slice(s![k, 2 * y..2 * y + 2, 2 * xx..2 * xx + 2]).sum() / 4.0
    })
}

fn pixel_features(x: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let lum = Array2::from_shape_fn((h, w), |(y, xx)| {
        0.299 * x[[0, y, xx]] + 0.587 * x[[1, y, xx]] + 0.114 * x[[2, y, xx]]
    });
    let mut f = Array3::from_shape_fn((5, h, w), |(k, y, xx)| match k {
        0..=2 => x[[k, y, xx]] - 0.5,
        3 if xx + 1 < w => lum[[y, xx + 1]] - lum[[y, xx]],
        4 if y + 1 < h => lum[[y + 1, xx]] - lum[[y, xx]],
        _ => 0.0,
    });
    for y in 0..h {
        for xx in 0..w {
            let mut col = f.slice_mut(s![.., y, xx]);
            let n = col.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            col.mapv_inplace(|v| v / n);
        }
    }
    f
}

impl PerceptualMetric for PyramidMetric {
    fn name(&self) -> &str {
        "pyramid-proxy-v1"
    }

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if a.resolution() != b.resolution() {
            return Err(EvalError::Size(a.resolution(), b.resolution()));
        }
        let (mut x, mut y) = (a.data.clone(), b.data.clone());
        let mut total = 0.0;
        for level in 0..self.levels.max(1) {
            if level > 0 {
                if x.dim().1 < 2 || x.dim().2 < 2 {
                    break;
                }
                x = box_down(&x);
                y = box_down(&y);
            }
            let (fx, fy) = (pixel_features(&x), pixel_features(&y));
            let pixels = (fx.dim().1 * fx.dim().2) as f64;
            total += (&fx - &fy).mapv(|v| v * v).sum() / pixels;
        }
        Ok(total)
    }
}

/// Both images with the dilated object region set to zero.
pub fn mask_out_object(image: &ImageTensor, source_mask: &SpatialMask) -> Result<ImageTensor> {
    if source_mask.resolution() != image.resolution() {
        return Err(EvalError::Size(source_mask.resolution(), image.resolution()));
    }
    let region = mask::dilate(source_mask, BACKGROUND_DILATION_PX).binarized();
    let mut out = image.data.clone();
    for ((_, y, x), v) in out.indexed_iter_mut() {
        if region[[y, x]] {
            *v = 0.0;
        }
    }
    Ok(ImageTensor::new(out))
}

/// Perceptual distance restricted to the background: the object region,
/// dilated by 8 px, is zeroed in both images first.
pub fn background_lpips(
    original: &ImageTensor,
    edited: &ImageTensor,
    source_mask: &SpatialMask,
    metric: &dyn PerceptualMetric,
) -> Result<f64> {
    if original.resolution() != edited.resolution() {
        return Err(EvalError::Size(original.resolution(), edited.resolution()));
    }
    metric.distance(&mask_out_object(original, source_mask)?, &mask_out_object(edited, source_mask)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: String,
    /// `None` when the embedding client was unavailable or failed.
    pub clip_score: Option<f64>,
    pub lpips_background: f64,
    pub wall_time_s: f64,
}

/// Scores one edit. A failing embedding client leaves the sample unscored
/// for CLIPScore rather than failing it.
pub fn score_edit(
    sample_id: &str,
    original: &ImageTensor,
    edited: &ImageTensor,
    source_mask: &SpatialMask,
    prompt: &str,
    clip: Option<&dyn EmbeddingClient>,
    metric: &dyn PerceptualMetric,
    wall_time_s: f64,
) -> Result<MetricRecord> {
    let clip_score = match clip {
        Some(c) => match clip_score(edited, prompt, c) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("{sample_id}: CLIPScore unavailable: {e}");
                None
            }
        },
        None => None,
    };
    Ok(MetricRecord {
        sample_id: sample_id.to_string(),
        clip_score,
        lpips_background: background_lpips(original, edited, source_mask, metric)?,
        wall_time_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub samples: usize,
    pub clip_scored: usize,
    pub mean_clip_score: Option<f64>,
    pub mean_lpips_background: f64,
    pub mean_wall_time_s: f64,
    pub methodology: String,
}

pub fn summarize(records: &[MetricRecord], methodology: &str) -> Result<ReportSummary> {
    if records.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let n = records.len() as f64;
    let clips: Vec<f64> = records.iter().filter_map(|r| r.clip_score).collect();
    Ok(ReportSummary {
        samples: records.len(),
        clip_scored: clips.len(),
        mean_clip_score: (!clips.is_empty()).then(|| clips.iter().sum::<f64>() / clips.len() as f64),
        mean_lpips_background: records.iter().map(|r| r.lpips_background).sum::<f64>() / n,
        mean_wall_time_s: records.iter().map(|r| r.wall_time_s).sum::<f64>() / n,
        methodology: methodology.to_string(),
    })
}

pub fn render_text(summary: &ReportSummary) -> String {
    let clip = summary
        .mean_clip_score
        .map(|c| format!("{c:.2}"))
        .unwrap_or_else(|| "n/a".into());
    let mut out = String::new();
    out.push_str(&format!("{:<28} {:>10} {:>18} {:>9}\n", "", "CLIPScore", "LPIPS-background", "samples"));
    out.push_str(&format!(
        "{:<28} {:>10} {:>18.4} {:>9}\n",
        "this run",
        clip,
        summary.mean_lpips_background,
        format!("{}/{}", summary.clip_scored, summary.samples)
    ));
    out.push_str(&format!(
        "{:<28} {:>10.2} {:>18.3} {:>9}\n",
        "published (reference only)", PUBLISHED_CLIP_SCORE, PUBLISHED_LPIPS_BACKGROUND, 104
    ));
    out.push_str(&format!(
        "\nbackground metric: {}; mean wall time {:.2} s\n",
        summary.methodology, summary.mean_wall_time_s
    ));
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    sample_id: String,
    clip_score: Option<f64>,
    lpips_background: f64,
    wall_time_s: f64,
}

/// Writes `<out>.txt` and `<out>.csv`; returns the summary.
pub fn report(records: &[MetricRecord], out: &Path, methodology: &str) -> Result<ReportSummary> {
    let summary = summarize(records, methodology)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out.with_extension("txt"), render_text(&summary))?;
    write_records_csv(records, &out.with_extension("csv"))?;
    Ok(summary)
}

pub fn write_records_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(CsvRow {
            sample_id: r.sample_id.clone(),
            clip_score: r.clip_score,
            lpips_background: r.lpips_background,
            wall_time_s: r.wall_time_s,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(MetricRecord {
                sample_id: row.sample_id,
                clip_score: row.clip_score,
                lpips_background: row.lpips_background,
                wall_time_s: row.wall_time_s,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>, Vec<f64>);

    impl EmbeddingClient for Fixed {
        fn embed_image(&self, _: &ImageTensor) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }

        fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
            Ok(self.1.clone())
        }
    }

    struct Down;

    impl EmbeddingClient for Down {
        fn embed_image(&self, _: &ImageTensor) -> Result<Vec<f64>> {
            Err(EvalError::Client("offline".into()))
        }

        fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
            Err(EvalError::Client("offline".into()))
        }
    }

    fn img(f: impl Fn(usize, usize, usize) -> f64) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((3, 32, 32), |(c, y, x)| f(c, y, x)))
    }

    #[test]
    fn clip_score_endpoints() {
        let im = img(|_, _, _| 0.5);
        assert!((clip_score(&im, "x", &Fixed(vec![1.0, 2.0], vec![2.0, 4.0])).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(clip_score(&im, "x", &Fixed(vec![1.0, 0.0], vec![0.0, 3.0])).unwrap(), 0.0);
        assert_eq!(clip_score(&im, "x", &Fixed(vec![1.0, 0.0], vec![-1.0, 0.0])).unwrap(), 0.0);
        assert!(clip_score(&im, "x", &Fixed(vec![1.0], vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn identical_images_have_zero_background_distance() {
        let a = img(|c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        let m = SpatialMask::from_fn((32, 32), |y, x| y < 10 && x < 10);
        assert!(background_lpips(&a, &a.clone(), &m, &PyramidMetric::default()).unwrap().abs() < 1e-6);
    }

    #[test]
    fn object_region_edits_are_invisible() {
        let a = img(|c, y, x| ((c * 3 + y + 2 * x) % 11) as f64 / 11.0);
        let m = SpatialMask::from_fn((32, 32), |y, x| (12..20).contains(&y) && (12..20).contains(&x));
        let region = mask::dilate(&m, BACKGROUND_DILATION_PX).binarized();
        let mut b = a.clone();
        for ((_, y, x), v) in b.data.indexed_iter_mut() {
            if region[[y, x]] {
                *v = 1.0 - *v;
            }
        }
        let metric = PyramidMetric::default();
        assert!(background_lpips(&a, &b, &m, &metric).unwrap() < 1e-4);
        assert!(metric.distance(&a, &b).unwrap() > 1e-2);
        let before = b.clone();
        background_lpips(&a, &b, &m, &metric).unwrap();
        assert_eq!(before.data, b.data);
        let mut c = b.clone();
        c.data[[0, 0, 0]] = 0.9;
        c.data[[1, 0, 0]] = 0.1;
        assert!(background_lpips(&a, &c, &m, &metric).unwrap() > 1e-4);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let a = img(|_, _, _| 0.0);
        let b = ImageTensor::new(Array3::zeros((3, 16, 16)));
        let m = SpatialMask::zeros((32, 32));
        assert!(matches!(
            background_lpips(&a, &b, &m, &PyramidMetric::default()),
            Err(EvalError::Size(..))
        ));
    }

    #[test]
    fn failing_clip_client_leaves_sample_unscored() {
        let a = img(|_, _, _| 0.3);
        let m = SpatialMask::zeros((32, 32));
        let r = score_edit("s", &a, &a, &m, "p", Some(&Down), &PyramidMetric::default(), 1.0).unwrap();
        assert_eq!(r.clip_score, None);
        assert_eq!(r.lpips_background, 0.0);
    }

    fn rec(id: &str, clip: Option<f64>, lp: f64) -> MetricRecord {
        MetricRecord {
            sample_id: id.into(),
            clip_score: clip,
            lpips_background: lp,
            wall_time_s: 2.0,
        }
    }

    #[test]
    fn summary_means() {
        assert!(matches!(summarize(&[], "m"), Err(EvalError::EmptyReport)));
        let one = summarize(&[rec("a", Some(30.0), 0.1)], "m").unwrap();
        assert_eq!(one.mean_clip_score, Some(30.0));
        assert_eq!(one.mean_lpips_background, 0.1);
        let two = summarize(&[rec("a", Some(30.0), 0.1), rec("b", Some(20.0), 0.3)], "m").unwrap();
        assert_eq!(two.mean_clip_score, Some(25.0));
        assert!((two.mean_lpips_background - 0.2).abs() < 1e-15);
        let partial = summarize(&[rec("a", None, 0.1), rec("b", Some(20.0), 0.3)], "m").unwrap();
        assert_eq!((partial.clip_scored, partial.mean_clip_score), (1, Some(20.0)));
    }

    #[test]
    fn report_files_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            rec("a", Some(29.123456789012345), 0.1 + 0.2),
            rec("b,quoted", None, 1e-17),
            rec("c", Some(0.0), f64::MIN_POSITIVE),
        ];
        let out = dir.path().join("r/report");
        report(&records, &out, "pyramid-proxy-v1").unwrap();
        let back = read_records_csv(&out.with_extension("csv")).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.clip_score.map(f64::to_bits), b.clip_score.map(f64::to_bits));
            assert_eq!(a.lpips_background.to_bits(), b.lpips_background.to_bits());
        }
        let text = std::fs::read_to_string(out.with_extension("txt")).unwrap();
        assert!(text.contains("published (reference only)"));
        assert!(text.contains("29.26") && text.contains("0.149"));
        assert!(text.contains("pyramid-proxy-v1"));
    }

    fn write_set(dir: &Path, samples: &[ImbaSample], counts: CategoryCounts, partial: bool) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::create_dir_all(dir.join("masks")).unwrap();
        for s in samples {
            std::fs::write(dir.join(&s.image), b"x").unwrap();
            std::fs::write(dir.join(&s.source_mask), b"x").unwrap();
        }
        let m = ImbaManifest {
            partial,
            counts,
            samples: samples.to_vec(),
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
    }

    fn sample(i: usize, task: TaskKind, retain: bool) -> ImbaSample {
        ImbaSample {
            id: format!("s{i:03}"),
            image: format!("images/s{i:03}.png").into(),
            target_prompt: "a photo of a dog".into(),
            source_mask: format!("masks/s{i:03}.png").into(),
            task,
            retain_object: retain,
            object_word: "dog".into(),
            notes: String::new(),
        }
    }

    fn full_set() -> Vec<ImbaSample> {
        (0..104)
            .map(|i| {
                let task = if i < 7 { TaskKind::AlterBackground } else { TaskKind::ReplaceObject };
                sample(i, task, i >= 7 && i < 50)
            })
            .collect()
    }

    #[test]
    fn full_layout_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), &full_set(), FULL_COUNTS, false);
        let ds = load_imba(dir.path()).unwrap();
        assert!(!ds.partial);
        assert_eq!(ds.counts(), FULL_COUNTS);
    }

    #[test]
    fn claimed_full_count_with_ten_samples_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), &full_set()[..10], FULL_COUNTS, false);
        assert!(matches!(load_imba(dir.path()), Err(EvalError::CountMismatch { .. })));
        let dir = tempfile::tempdir().unwrap();
        let ten = &full_set()[..10];
        write_set(dir.path(), ten, CategoryCounts::of(ten), false);
        assert!(matches!(load_imba(dir.path()), Err(EvalError::CountMismatch { .. })));
        let dir = tempfile::tempdir().unwrap();
        write_set(dir.path(), ten, CategoryCounts::of(ten), true);
        assert!(load_imba(dir.path()).unwrap().partial);
    }

    #[test]
    fn offenders_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = vec![sample(0, TaskKind::RemoveObject, true), sample(1, TaskKind::ReplaceObject, false)];
        samples[1].target_prompt.clear();
        write_set(dir.path(), &samples, CategoryCounts::of(&samples), true);
        std::fs::remove_file(dir.path().join("masks/s001.png")).unwrap();
        match load_imba(dir.path()) {
            Err(EvalError::Load { offenders }) => {
                assert_eq!(offenders.len(), 3, "{offenders:?}");
                assert!(offenders.iter().any(|o| o.contains("s001: missing mask")));
            }
            other => panic!("{other:?}"),
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_imba(empty.path()), Err(EvalError::Load { .. })));
        std::fs::write(empty.path().join(MANIFEST_FILE), "{").unwrap();
        assert!(matches!(load_imba(empty.path()), Err(EvalError::Load { .. })));
    }
}
