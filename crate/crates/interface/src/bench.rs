//! Resumable benchmark over an IMBA-format dataset.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use cpam_core::backend::DiffusionBackend;
use cpam_core::evaluation::{
    load_imba, report, score_edit, EmbeddingClient, ImbaSample, MetricRecord, PerceptualMetric, PyramidMetric,
    ReportSummary,
};
use cpam_core::mask::SpatialMask;
use cpam_core::mask_input::{MaskResolver, MaskSpec};
use cpam_core::pipeline::{edit_image, Controllers, EditParams, EditRequest, NoObserver};
use cpam_core::tensor::ImageTensor;

use crate::{write_atomic, InterfaceError};

pub struct BenchOptions {
    pub dataset: PathBuf,
    pub limit: Option<usize>,
    /// Report path without extension; `.txt` and `.csv` are written.
    pub report: PathBuf,
    /// Checkpoints and edited images.
    pub work_dir: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub controllers: Controllers,
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub summary: ReportSummary,
    pub records: Vec<MetricRecord>,
    /// Samples computed in this run; the rest came from checkpoints.
    pub computed: usize,
}

pub fn sample_request(root: &Path, s: &ImbaSample, steps: usize, seed: u64, controllers: Controllers) -> EditRequest {
    let mut params = EditParams::new(s.task, &s.target_prompt, &s.object_word);
    params.steps = steps;
    params.seed = seed;
    params.controllers = controllers;
    params.schedule.retain_object = s.retain_object;
    EditRequest {
        image: root.join(&s.image),
        source_mask_spec: MaskSpec::File {
            path: root.join(&s.source_mask),
        },
        params,
    }
}

fn checkpoint_path(work_dir: &Path, id: &str) -> PathBuf {
    work_dir.join("records").join(format!("{id}.json"))
}

/// Runs every sample without a checkpoint, then writes the report. Each
/// record is persisted atomically as soon as it is scored, so an
/// interrupted run resumes where it stopped.
pub fn run_bench(
    opts: &BenchOptions,
    backend: &Arc<dyn DiffusionBackend>,
    clip: Option<&dyn EmbeddingClient>,
) -> Result<BenchOutcome, InterfaceError> {
    let dataset = load_imba(&opts.dataset)?;
    let samples: Vec<&ImbaSample> = dataset.samples.iter().take(opts.limit.unwrap_or(usize::MAX)).collect();
    let metric = PyramidMetric::default();
    let resolver = MaskResolver::new(None);
    let mut records = Vec::with_capacity(samples.len());
    let mut computed = 0;
    for (i, s) in samples.iter().enumerate() {
        let ckpt = checkpoint_path(&opts.work_dir, &s.id);
        if ckpt.exists() {
            records.push(serde_json::from_slice(&std::fs::read(&ckpt)?)?);
            continue;
        }
        log::info!("[{}/{}] {} ({})", i + 1, samples.len(), s.id, s.task);
        let request = sample_request(&opts.dataset, s, opts.steps, opts.seed, opts.controllers);
        let t0 = Instant::now();
        let result = edit_image(&request, backend.as_ref(), &resolver, &mut NoObserver)?;
        let wall = t0.elapsed().as_secs_f64();
        let edited_path = opts.work_dir.join("edits").join(format!("{}.png", s.id));
        write_atomic(
            &edited_path,
            &result.edited_image.to_png_bytes().map_err(|e| InterfaceError::Store(e.to_string()))?,
        )?;
        let original = ImageTensor::load(&request.image).map_err(|e| InterfaceError::Store(e.to_string()))?;
        let mask = SpatialMask::load(&dataset.mask_path(s)).map_err(|e| InterfaceError::Store(e.to_string()))?;
        let record = score_edit(
            &s.id,
            &original,
            &result.edited_image,
            &mask,
            &s.target_prompt,
            clip,
            &metric as &dyn PerceptualMetric,
            wall,
        )?;
        write_atomic(&ckpt, &serde_json::to_vec_pretty(&record)?)?;
        records.push(record);
        computed += 1;
    }
    let methodology = format!(
        "backend {}; {} of {} samples{}; {} steps, seed {}; controllers {:?}; background distance {}",
        backend.fingerprint(),
        records.len(),
        dataset.samples.len(),
        if dataset.partial { " (partial dataset)" } else { "" },
        opts.steps,
        opts.seed,
        opts.controllers,
        metric.name(),
    );
    let summary = report(&records, &opts.report, &methodology)?;
    Ok(BenchOutcome {
        summary,
        records,
        computed,
    })
}
