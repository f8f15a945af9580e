//! Editing loop: encode, invert, per-step target mask, hooked denoising with
//! the controllers on both guidance branches, guidance, decode.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{AttentionError, FeatureMatrix, IndexList, KeyMask};
use crate::backend::{
    AttentionCall, AttentionHook, BackendError, DiffusionBackend, HeadProjections, HookError, NoHooks,
    PromptEmbedding, SiteSpec,
};
use crate::control::{
    self, compose_location, localized_cross_attention, partitioned_attention, preserve_background,
    preserve_foreground, should_use_normal_self_attention, AttentionKind, AttentionSite, ControlError,
    CrossAttentionAggregate, EditSchedule, Route,
};
use crate::grid;
use crate::inversion::{self, InversionError, SiteFeatures, SourceFeatures};
use crate::mask::{self, MaskError, MaskPolicyConfig, Refinement, SpatialMask, TaskKind};
use crate::mask_input::{MaskInputError, MaskResolver, MaskSpec};
use crate::schedule::{self, ScheduleError};
use crate::tensor::{ImageTensor, LatentTensor};

pub use crate::schedule::{classifier_free_guidance, ddim_step};

pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_STEPS: usize = 50;
pub const MAX_GUIDANCE: f64 = 15.0;
pub const MIN_STEPS: usize = 10;
pub const MAX_STEPS: usize = 200;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("invalid mask at step {step}, site {site}: {reason}")]
    InvalidMask { step: usize, site: String, reason: String },
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error("backend failed at step {step} ({branch:?} branch): {source}")]
    Backend {
        step: usize,
        branch: Branch,
        #[source]
        source: BackendError,
    },
    #[error("backend failed: {0}")]
    Setup(#[source] BackendError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    MaskInput(#[from] MaskInputError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Errors caused by the request rather than by running it.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Validation(_) | PipelineError::MaskInput(_) | PipelineError::Mask(MaskError::InvalidConfig(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePolicy {
    /// Resample to the backend's native resolution and back.
    #[default]
    Resize,
    Reject,
}

/// Switches for the two controller families; both off gives plain
/// inversion-then-resampling with the target prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Controllers {
    pub preservation: bool,
    pub localized_extraction: bool,
}

impl Controllers {
    pub const ALL: Controllers = Controllers {
        preservation: true,
        localized_extraction: true,
    };
    pub const NONE: Controllers = Controllers {
        preservation: false,
        localized_extraction: false,
    };
}

impl Default for Controllers {
    fn default() -> Self {
        Self::ALL
    }
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

/// Everything about an edit except the input image and mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditParams {
    #[serde(default)]
    pub target_prompt: String,
    #[serde(default)]
    pub object_word: String,
    pub task: TaskKind,
    #[serde(default)]
    pub schedule: EditSchedule,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mask_policy: MaskPolicyConfig,
    #[serde(default)]
    pub size_policy: SizePolicy,
    #[serde(default)]
    pub controllers: Controllers,
}

impl EditParams {
    pub fn new(task: TaskKind, target_prompt: &str, object_word: &str) -> Self {
        Self {
            target_prompt: target_prompt.into(),
            object_word: object_word.into(),
            task,
            schedule: EditSchedule::default(),
            guidance_scale: DEFAULT_GUIDANCE,
            steps: DEFAULT_STEPS,
            seed: 0,
            mask_policy: MaskPolicyConfig::default(),
            size_policy: SizePolicy::default(),
            controllers: Controllers::default(),
        }
    }

    /// Numeric and schedule checks shared by every entry point.
    pub fn validate_settings(&self) -> Result<()> {
        if !(1.0..=MAX_GUIDANCE).contains(&self.guidance_scale) {
            return Err(PipelineError::Validation(format!(
                "guidance scale {} outside [1, {MAX_GUIDANCE}]",
                self.guidance_scale
            )));
        }
        if !(MIN_STEPS..=MAX_STEPS).contains(&self.steps) {
            return Err(PipelineError::Validation(format!(
                "steps {} outside [{MIN_STEPS}, {MAX_STEPS}]",
                self.steps
            )));
        }
        self.schedule
            .validate(self.steps)
            .map_err(|e| PipelineError::Validation(e.to_string()))?;
        self.mask_policy.validate()?;
        let refines = matches!(self.task, TaskKind::ReplaceObject | TaskKind::ChangePoseView);
        if refines && self.mask_policy.refinement == Refinement::FromCrossAttention && self.schedule.mask_switch_step == 0 {
            return Err(PipelineError::Validation(
                "mask switch step 0 leaves no recorded cross-attention for refinement".into(),
            ));
        }
        if self.task == TaskKind::RemoveObject && self.schedule.retain_object {
            return Err(PipelineError::Validation("object removal cannot retain the object".into()));
        }
        Ok(())
    }

    /// Full request validation: settings plus a target prompt for every task
    /// except removal.
    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        if self.task != TaskKind::RemoveObject && self.target_prompt.trim().is_empty() {
            return Err(PipelineError::Validation(format!(
                "task '{}' needs a target prompt",
                self.task
            )));
        }
        Ok(())
    }

    /// Schedule actually used: the request seed drives the mixing stream.
    pub fn effective_schedule(&self) -> EditSchedule {
        EditSchedule {
            rng_seed: self.seed,
            ..self.schedule.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub image: PathBuf,
    pub source_mask_spec: MaskSpec,
    #[serde(flatten)]
    pub params: EditParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inverting,
    Denoising,
    Decoding,
}

/// How a self- or cross-attention site was handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRoute {
    Plain,
    NormalMix,
    BackgroundOnly,
    Composed { object_gate: bool },
    Localized,
}

/// Instrumentation record for one site visit.
#[derive(Debug)]
pub struct SiteEvent<'a> {
    pub branch: Branch,
    pub site: AttentionSite,
    pub route: SiteRoute,
    pub heads: &'a [HeadProjections],
    pub source: Option<&'a SiteFeatures>,
    pub source_mask: &'a KeyMask,
    pub target_mask: &'a KeyMask,
    /// `None` when the backend's plain attention was kept.
    pub output: Option<&'a [FeatureMatrix]>,
}

pub trait EditObserver {
    fn on_phase(&mut self, _phase: Phase) {}

    /// Called after denoising step `k` of `n` (1-based).
    fn on_step(&mut self, _k: usize, _n: usize) {}

    fn wants_site_events(&self) -> bool {
        false
    }

    fn on_site(&mut self, _event: &SiteEvent<'_>) {}
}

pub struct NoObserver;

impl EditObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStep {
    pub step_index: usize,
    pub timestep: usize,
    #[serde(skip)]
    pub mask: Array2<bool>,
    pub ones: usize,
    pub sha256: String,
}

impl MaskStep {
    fn new(step_index: usize, timestep: usize, m: &SpatialMask) -> Self {
        let mask = m.binarized();
        let mut hasher = Sha256::new();
        hasher.update((mask.nrows() as u64).to_le_bytes());
        hasher.update((mask.ncols() as u64).to_le_bytes());
        hasher.update(mask.iter().map(|&b| b as u8).collect::<Vec<_>>());
        Self {
            step_index,
            timestep,
            ones: mask.iter().filter(|b| **b).count(),
            mask,
            sha256: hex::encode(hasher.finalize()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub encode_s: f64,
    pub invert_s: f64,
    pub steps_s: Vec<f64>,
    pub decode_s: f64,
    pub total_s: f64,
}

/// Configuration echo hashed into the result fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: String,
    pub backend_fingerprint: String,
    pub task: TaskKind,
    pub target_prompt: String,
    pub object_word: String,
    pub guidance_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub schedule: EditSchedule,
    pub mask_policy: MaskPolicyConfig,
    pub size_policy: SizePolicy,
    pub controllers: Controllers,
}

impl RunConfig {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone)]
pub struct EditResult {
    /// At the input image's resolution.
    pub edited_image: ImageTensor,
    pub final_latent: LatentTensor,
    pub mask_record: Vec<MaskStep>,
    pub timing: Timing,
    pub config: RunConfig,
    pub config_fingerprint: String,
    pub warnings: Vec<String>,
}

struct SiteMasks {
    by_grid: HashMap<(usize, usize), KeyMask>,
}

impl SiteMasks {
    fn new(m: &SpatialMask, sites: &[SiteSpec]) -> Self {
        let mut by_grid = HashMap::new();
        for s in sites {
            by_grid
                .entry(s.token_grid)
                .or_insert_with(|| mask::resample_mask(m, s.token_grid));
        }
        Self { by_grid }
    }

    fn get(&self, grid: (usize, usize)) -> &KeyMask {
        &self.by_grid[&grid]
    }
}

#[derive(Debug, Error)]
enum SiteFailure {
    #[error("{0}")]
    InvalidMask(String),
    #[error("no source features captured for {0}")]
    MissingSource(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

struct CpamHook<'a> {
    step_index: usize,
    branch: Branch,
    schedule: &'a EditSchedule,
    controllers: Controllers,
    source: &'a SourceFeatures,
    source_masks: &'a SiteMasks,
    target_masks: &'a SiteMasks,
    recorder: Option<(&'a mut CrossAttentionAggregate, &'a IndexList)>,
    observer: &'a mut dyn EditObserver,
}

impl<'a> CpamHook<'a> {
    fn self_attention(
        &self,
        call: &AttentionCall<'_>,
        site: &AttentionSite,
    ) -> std::result::Result<(SiteRoute, Option<Vec<FeatureMatrix>>, Option<&'a SiteFeatures>), SiteFailure> {
        if !self.controllers.preservation {
            return Ok((SiteRoute::Plain, None, None));
        }
        if should_use_normal_self_attention(site, self.schedule) {
            return Ok((SiteRoute::NormalMix, None, None));
        }
        if !self.schedule.background_active(site) {
            return Ok((SiteRoute::Plain, None, None));
        }
        let source: &'a SourceFeatures = self.source;
        let src = source
            .get(&site.layer_index)
            .filter(|f| f.site == call.site)
            .ok_or_else(|| SiteFailure::MissingSource(call.site.label()))?;
        let ms = self.source_masks.get(site.token_grid);
        let mt = self.target_masks.get(site.token_grid);
        let no_background = ms.all();
        let mut out = Vec::with_capacity(call.heads.len());
        let route = if !mt.any() {
            if no_background {
                return Err(SiteFailure::InvalidMask(
                    "source mask covers every token, nothing to preserve".into(),
                ));
            }
            for (h, (k, v)) in call.heads.iter().zip(src.keys.iter().zip(&src.values)) {
                out.push(preserve_background(&h.q, k, v, ms)?);
            }
            SiteRoute::BackgroundOnly
        } else {
            if no_background && !mt.all() {
                return Err(SiteFailure::InvalidMask(
                    "source mask leaves no background while the target mask does".into(),
                ));
            }
            for (h, (k_src, v_src)) in call.heads.iter().zip(src.keys.iter().zip(&src.values)) {
                let fg = preserve_foreground(&h.q, &h.k, &h.v, k_src, v_src, mt, site, self.schedule)?;
                if mt.all() {
                    out.push(fg);
                } else {
                    let bg = preserve_background(&h.q, k_src, v_src, ms)?;
                    out.push(compose_location(&fg, &bg, mt)?);
                }
            }
            SiteRoute::Composed {
                object_gate: self.schedule.object_gate_open(site),
            }
        };
        Ok((route, Some(out), Some(src)))
    }

    fn cross_attention(
        &mut self,
        call: &AttentionCall<'_>,
        site: &AttentionSite,
    ) -> std::result::Result<(SiteRoute, Option<Vec<FeatureMatrix>>), SiteFailure> {
        if let Some((aggregate, tokens)) = self.recorder.as_mut() {
            let mut probs: Option<Array2<f64>> = None;
            for h in call.heads {
                let p = control::cross_attention_probs(&h.q, &h.k)?;
                probs = Some(match probs {
                    Some(acc) => acc + p,
                    None => p,
                });
            }
            if let Some(p) = probs {
                aggregate.record(site, &(p / call.heads.len() as f64), tokens)?;
            }
        }
        if !self.controllers.localized_extraction {
            return Ok((SiteRoute::Plain, None));
        }
        let null = call
            .aux
            .first()
            .ok_or_else(|| SiteFailure::MissingSource(format!("null context at {}", call.site.label())))?;
        let mt = self.target_masks.get(site.token_grid);
        let out = call
            .heads
            .iter()
            .zip(null)
            .map(|(h, (k_null, v_null))| localized_cross_attention(&h.q, &h.k, &h.v, k_null, v_null, mt))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((SiteRoute::Localized, Some(out)))
    }
}

impl AttentionHook for CpamHook<'_> {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> std::result::Result<Option<Vec<FeatureMatrix>>, HookError> {
        let site = call.site.at_step(self.step_index);
        let (route, out, src) = match call.site.kind {
            AttentionKind::SelfAttention => self.self_attention(call, &site)?,
            AttentionKind::CrossAttention => {
                let (route, out) = self.cross_attention(call, &site)?;
                (route, out, None)
            }
        };
        if self.observer.wants_site_events() {
            self.observer.on_site(&SiteEvent {
                branch: self.branch,
                site,
                route,
                heads: call.heads,
                source: src,
                source_mask: self.source_masks.get(site.token_grid),
                target_mask: self.target_masks.get(site.token_grid),
                output: out.as_deref(),
            });
        }
        Ok(out)
    }
}

fn site_error(step: usize, branch: Branch, err: BackendError) -> PipelineError {
    if let BackendError::Hook { site, source } = &err {
        if let Some(SiteFailure::InvalidMask(reason)) = source.downcast_ref::<SiteFailure>() {
            return PipelineError::InvalidMask {
                step,
                site: site.clone(),
                reason: reason.clone(),
            };
        }
    }
    PipelineError::Backend {
        step,
        branch,
        source: err,
    }
}

fn prepare_image(image: &ImageTensor, native: (usize, usize), policy: SizePolicy) -> Result<ImageTensor> {
    if image.resolution() == native {
        return Ok(image.clone());
    }
    match policy {
        SizePolicy::Resize => Ok(image.resized(native)),
        SizePolicy::Reject => Err(PipelineError::Validation(format!(
            "image is {:?}, backend works at {:?}",
            image.resolution(),
            native
        ))),
    }
}

/// Runs one edit on an already loaded image and resolved source mask.
pub fn edit_prepared(
    image: &ImageTensor,
    source_mask: &SpatialMask,
    params: &EditParams,
    backend: &dyn DiffusionBackend,
    observer: &mut dyn EditObserver,
) -> Result<EditResult> {
    params.validate_settings()?;
    if source_mask.resolution() != image.resolution() {
        return Err(MaskError::Resolution {
            got: source_mask.resolution(),
            expected: image.resolution(),
        }
        .into());
    }
    let started = Instant::now();
    let desc = backend.descriptor();
    let schedule = params.effective_schedule();
    let mut warnings = Vec::new();
    let mut timing = Timing::default();

    let cond = backend
        .encode_text(&params.target_prompt, Some(&params.object_word).filter(|w| !w.is_empty()).map(|w| w.as_str()))
        .map_err(PipelineError::Setup)?;
    let null = inversion::null_embedding(backend).map_err(PipelineError::Setup)?;
    if cond.truncated {
        warnings.push("target prompt truncated".to_string());
    }
    let mut mask_policy = params.mask_policy.clone();
    let refines = matches!(params.task, TaskKind::ReplaceObject | TaskKind::ChangePoseView);
    if refines && mask_policy.refinement == Refinement::FromCrossAttention && cond.object_token_positions.is_empty() {
        log::warn!("object word {:?} not found in the prompt; using hull extension", params.object_word);
        warnings.push(format!(
            "object word {:?} not in target prompt; refinement fell back to hull extension",
            params.object_word
        ));
        mask_policy.refinement = Refinement::HullExtension;
    }

    observer.on_phase(Phase::Inverting);
    let t0 = Instant::now();
    let native = prepare_image(image, desc.image_resolution(), params.size_policy)?;
    let z0 = backend.encode_image(&native).map_err(PipelineError::Setup)?;
    timing.encode_s = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let trace = inversion::ddim_invert(&z0, backend, params.steps)?;
    timing.invert_s = t0.elapsed().as_secs_f64();

    observer.on_phase(Phase::Denoising);
    let ts = trace.timesteps().to_vec();
    let source_masks = SiteMasks::new(source_mask, &desc.sites);
    let mut aggregate = CrossAttentionAggregate::default();
    let mut mask_record = Vec::with_capacity(params.steps);
    let mut z = trace.z_t().clone();
    for step_index in 0..params.steps {
        let t_step = Instant::now();
        let i = params.steps - step_index;
        let (t, t_prev) = (ts[i], ts[i - 1]);
        let target = mask::target_mask_policy(
            params.task,
            source_mask,
            Some(&aggregate),
            &mask_policy,
            step_index,
            schedule.mask_switch_step,
        )?;
        mask_record.push(MaskStep::new(step_index, t, &target));
        let target_masks = SiteMasks::new(&target, &desc.sites);
        let source = inversion::source_features(&trace, i, backend)?;

        let eps_c = {
            let mut hook = CpamHook {
                step_index,
                branch: Branch::Conditional,
                schedule: &schedule,
                controllers: params.controllers,
                source: &source,
                source_masks: &source_masks,
                target_masks: &target_masks,
                recorder: Some((&mut aggregate, &cond.object_token_positions)),
                observer: &mut *observer,
            };
            backend
                .predict_noise(&z, t, &cond, &[&null], &mut hook)
                .map_err(|e| site_error(step_index, Branch::Conditional, e))?
                .eps
        };
        let eps_u = {
            let mut hook = CpamHook {
                step_index,
                branch: Branch::Unconditional,
                schedule: &schedule,
                controllers: params.controllers,
                source: &source,
                source_masks: &source_masks,
                target_masks: &target_masks,
                recorder: None,
                observer: &mut *observer,
            };
            backend
                .predict_noise(&z, t, &null, &[&null], &mut hook)
                .map_err(|e| site_error(step_index, Branch::Unconditional, e))?
                .eps
        };
        let eps = classifier_free_guidance(&eps_c, &eps_u, params.guidance_scale);
        z = schedule::ddim_step(&z, &eps, t, t_prev, &desc.schedule)?;
        timing.steps_s.push(t_step.elapsed().as_secs_f64());
        observer.on_step(step_index + 1, params.steps);
    }

    observer.on_phase(Phase::Decoding);
    let t0 = Instant::now();
    let decoded = backend.decode_latent(&z).map_err(PipelineError::Setup)?;
    let edited_image = decoded.resized(image.resolution());
    timing.decode_s = t0.elapsed().as_secs_f64();
    timing.total_s = started.elapsed().as_secs_f64();

    let config = RunConfig {
        backend: desc.name.clone(),
        backend_fingerprint: backend.fingerprint(),
        task: params.task,
        target_prompt: params.target_prompt.clone(),
        object_word: params.object_word.clone(),
        guidance_scale: params.guidance_scale,
        steps: params.steps,
        seed: params.seed,
        schedule,
        mask_policy,
        size_policy: params.size_policy,
        controllers: params.controllers,
    };
    Ok(EditResult {
        edited_image,
        final_latent: z,
        mask_record,
        timing,
        config_fingerprint: config.fingerprint(),
        config,
        warnings,
    })
}

/// Loads the image, resolves the source mask and runs the edit.
pub fn edit_image(
    request: &EditRequest,
    backend: &dyn DiffusionBackend,
    resolver: &MaskResolver,
    observer: &mut dyn EditObserver,
) -> Result<EditResult> {
    request.params.validate()?;
    let image = ImageTensor::load(&request.image)?;
    let source_mask = resolver.resolve(&request.source_mask_spec, &image)?;
    edit_prepared(&image, &source_mask, &request.params, backend, observer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    pub guidance_scale: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE,
            steps: DEFAULT_STEPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub image: ImageTensor,
    pub latent: LatentTensor,
}

/// Seeded standard-normal starting latent.
pub fn initial_noise(shape: (usize, usize, usize), seed: u64, tag: usize) -> LatentTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array4::from_shape_simple_fn((1, shape.0, shape.1, shape.2), || StandardNormal.sample(&mut rng));
    LatentTensor::new(data, tag)
}

fn sample(
    backend: &dyn DiffusionBackend,
    params: &SynthesisParams,
    cond: &PromptEmbedding,
    aux: &[&PromptEmbedding],
    cond_hook: &mut dyn AttentionHook,
) -> Result<SynthesisResult> {
    if !(1.0..=MAX_GUIDANCE).contains(&params.guidance_scale) {
        return Err(PipelineError::Validation(format!(
            "guidance scale {} outside [1, {MAX_GUIDANCE}]",
            params.guidance_scale
        )));
    }
    let desc = backend.descriptor();
    let ts = desc.schedule.trajectory(params.steps)?;
    let null = inversion::null_embedding(backend).map_err(PipelineError::Setup)?;
    let mut z = initial_noise(desc.latent_shape, params.seed, ts[params.steps]);
    for (step, i) in (1..=params.steps).rev().enumerate() {
        let eps_c = backend
            .predict_noise(&z, ts[i], cond, aux, cond_hook)
            .map_err(|e| site_error(step, Branch::Conditional, e))?
            .eps;
        let eps_u = backend
            .predict_noise(&z, ts[i], &null, &[], &mut NoHooks)
            .map_err(|e| site_error(step, Branch::Unconditional, e))?
            .eps;
        let eps = classifier_free_guidance(&eps_c, &eps_u, params.guidance_scale);
        z = schedule::ddim_step(&z, &eps, ts[i], ts[i - 1], &desc.schedule)?;
    }
    let image = backend.decode_latent(&z).map_err(PipelineError::Setup)?;
    Ok(SynthesisResult { image, latent: z })
}

/// Plain guided sampling from seeded noise.
pub fn text_to_image(prompt: &str, backend: &dyn DiffusionBackend, params: &SynthesisParams) -> Result<SynthesisResult> {
    let cond = backend.encode_text(prompt, None).map_err(PipelineError::Setup)?;
    sample(backend, params, &cond, &[], &mut NoHooks)
}

/// Cross-attention router for region prompts: each token attends only to
/// the prompt whose region covers most of its cell. Context 0 is the
/// primary conditioning, context `j > 0` is auxiliary context `j - 1`.
pub struct RegionRouter {
    assignments: HashMap<(usize, usize), Vec<KeyMask>>,
}

impl RegionRouter {
    pub fn new(masks: &[&SpatialMask], sites: &[SiteSpec]) -> Result<Self> {
        check_partition(masks)?;
        let mut assignments = HashMap::new();
        for s in sites {
            assignments.entry(s.token_grid).or_insert_with(|| {
                let cover: Vec<Array2<f64>> = masks
                    .iter()
                    .map(|m| grid::resample_area(&m.to_binary().values().clone(), s.token_grid))
                    .collect();
                let n = s.n_tokens();
                let owner: Vec<usize> = (0..n)
                    .map(|p| {
                        let (y, x) = (p / s.token_grid.1, p % s.token_grid.1);
                        (0..cover.len())
                            .fold((0, f64::MIN), |best, j| if cover[j][[y, x]] > best.1 { (j, cover[j][[y, x]]) } else { best })
                            .0
                    })
                    .collect();
                (0..masks.len())
                    .map(|j| KeyMask::from_bools(owner.iter().map(|&o| o == j).collect()))
                    .collect()
            });
        }
        Ok(Self { assignments })
    }

    /// Token ownership for region `j` at `grid`.
    pub fn tokens(&self, grid: (usize, usize), j: usize) -> Option<&KeyMask> {
        self.assignments.get(&grid).and_then(|v| v.get(j))
    }
}

fn check_partition(masks: &[&SpatialMask]) -> Result<()> {
    let first = masks
        .first()
        .ok_or_else(|| PipelineError::Validation("at least one region prompt is required".into()))?;
    let res = first.resolution();
    if masks.iter().any(|m| m.resolution() != res) {
        return Err(PipelineError::Validation("region masks differ in resolution".into()));
    }
    let bins: Vec<Array2<bool>> = masks.iter().map(|m| m.binarized()).collect();
    for y in 0..res.0 {
        for x in 0..res.1 {
            let owners = bins.iter().filter(|b| b[[y, x]]).count();
            if owners != 1 {
                return Err(PipelineError::Control(ControlError::Attention(AttentionError::Coverage(format!(
                    "pixel ({y}, {x}) is covered by {owners} region masks"
                )))));
            }
        }
    }
    Ok(())
}

impl AttentionHook for RegionRouter {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> std::result::Result<Option<Vec<FeatureMatrix>>, HookError> {
        if call.site.kind != AttentionKind::CrossAttention {
            return Ok(None);
        }
        let masks = &self.assignments[&call.site.token_grid];
        let mut out = Vec::with_capacity(call.heads.len());
        for (h, head) in call.heads.iter().enumerate() {
            let mut routes = Vec::with_capacity(masks.len());
            for (j, tokens) in masks.iter().enumerate() {
                let (keys, values) = if j == 0 {
                    (&head.k, &head.v)
                } else {
                    let kv = &call.aux[j - 1][h];
                    (&kv.0, &kv.1)
                };
                routes.push(Route { keys, values, tokens });
            }
            out.push(partitioned_attention(&head.q, &routes)?);
        }
        Ok(Some(out))
    }

    fn observes(&self, site: &SiteSpec) -> bool {
        site.kind == AttentionKind::CrossAttention
    }
}

/// Generation where each region's tokens attend only to that region's
/// prompt. Masks must partition the image.
pub fn multi_region_synthesis(
    regions: &[(String, SpatialMask)],
    backend: &dyn DiffusionBackend,
    params: &SynthesisParams,
) -> Result<SynthesisResult> {
    let masks: Vec<&SpatialMask> = regions.iter().map(|(_, m)| m).collect();
    let mut router = RegionRouter::new(&masks, &backend.descriptor().sites)?;
    let embeddings = regions
        .iter()
        .map(|(p, _)| backend.encode_text(p, None))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(PipelineError::Setup)?;
    let aux: Vec<&PromptEmbedding> = embeddings[1..].iter().collect();
    sample(backend, params, &embeddings[0], &aux, &mut router)
}

/// Serialized description of one edit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub created_unix_s: u64,
    pub request: serde_json::Value,
    pub config: RunConfig,
    pub config_fingerprint: String,
    pub output_image: String,
    pub output_sha256: String,
    pub final_latent_sha256: String,
    pub mask_record: Vec<MaskStep>,
    pub mask_thumbnails: String,
    pub timing: Timing,
    pub warnings: Vec<String>,
}

pub const THUMBNAIL_SIDE: usize = 64;

/// Writes the edited PNG at `out`, the M_t thumbnails next to it and a
/// `<stem>.manifest.json`. Returns the manifest.
pub fn write_run_outputs(result: &EditResult, request: &impl Serialize, out: &Path) -> Result<RunManifest> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let png = result.edited_image.to_png_bytes()?;
    std::fs::write(out, &png)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("edit").to_string();
    let thumbs = out.with_file_name(format!("{stem}_masks"));
    std::fs::create_dir_all(&thumbs)?;
    for m in &result.mask_record {
        let (h, w) = m.mask.dim();
        let scale = (THUMBNAIL_SIDE as f64 / h.max(w) as f64).min(1.0);
        let grid = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
        let small = grid::resample_nearest(&m.mask, grid);
        SpatialMask::from_binary(&small).save_png(&thumbs.join(format!("step_{:03}.png", m.step_index)))?;
    }
    let manifest = RunManifest {
        created_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        request: serde_json::to_value(request)?,
        config: result.config.clone(),
        config_fingerprint: result.config_fingerprint.clone(),
        output_image: out.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        output_sha256: hex::encode(Sha256::digest(&png)),
        final_latent_sha256: result.final_latent.digest(),
        mask_record: result.mask_record.clone(),
        mask_thumbnails: thumbs.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        timing: result.timing.clone(),
        warnings: result.warnings.clone(),
    };
    let path = out.with_file_name(format!("{stem}.manifest.json"));
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::rename(tmp, path)?;
    Ok(manifest)
}
