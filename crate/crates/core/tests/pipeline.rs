use std::sync::atomic::{AtomicUsize, Ordering};

use cpam_core::attention::FeatureMatrix;
use cpam_core::backend::{
    AttentionCall, AttentionHook, BackendDescriptor, BackendError, DiffusionBackend, ForwardOutput, HeadProjections,
    HookError, PromptEmbedding, ToyBackend,
};
use cpam_core::control::{preserve_background, AttentionKind, EditSchedule};
use cpam_core::inversion::{ddim_invert, reconstruct};
use cpam_core::mask::{resample_mask, MaskPolicyConfig, Refinement, SpatialMask, TaskKind};
use cpam_core::mask_input::{MaskResolver, MaskSpec};
use cpam_core::pipeline::{
    edit_image, edit_prepared, initial_noise, multi_region_synthesis, text_to_image, write_run_outputs, Controllers,
    EditObserver, EditParams, EditRequest, NoObserver, PipelineError, RegionRouter, RunManifest, SiteEvent, SiteRoute,
    SizePolicy, SynthesisParams, MAX_GUIDANCE,
};
use cpam_core::tensor::{ImageTensor, LatentTensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..0.8)).collect();
    ImageTensor::new(Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
        let wave = 0.2 * ((x as f64 + y as f64 * (c as f64 + 1.0)) / 5.0).sin();
        (base[c] + wave + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
    }))
}

fn object_mask() -> SpatialMask {
    SpatialMask::from_fn((16, 16), |y, x| (5..11).contains(&y) && (4..10).contains(&x))
}

fn background_mad(a: &ImageTensor, b: &ImageTensor, m: &SpatialMask) -> f64 {
    let bits = m.binarized();
    let (mut sum, mut n) = (0.0, 0.0);
    for ((c, y, x), v) in a.data.indexed_iter() {
        if !bits[[y, x]] {
            sum += (v - b.data[[c, y, x]]).abs();
            n += 1.0;
        }
    }
    sum / n
}

fn no_edit(seed: u64) -> EditParams {
    let mut p = EditParams::new(TaskKind::ModifyRegion, "", "");
    p.seed = seed;
    p
}

#[derive(Default)]
struct RemovalAudit {
    background_only: usize,
    normal_mix: usize,
    other_self: usize,
    mismatched: usize,
    steps: Vec<(usize, usize)>,
}

impl EditObserver for RemovalAudit {
    fn on_step(&mut self, k: usize, n: usize) {
        self.steps.push((k, n));
    }

    fn wants_site_events(&self) -> bool {
        true
    }

    fn on_site(&mut self, e: &SiteEvent<'_>) {
        if e.site.kind != AttentionKind::SelfAttention {
            return;
        }
        match e.route {
            SiteRoute::BackgroundOnly => {
                self.background_only += 1;
                let src = e.source.expect("background route carries source features");
                let out = e.output.expect("background route replaces the output");
                for (h, head) in e.heads.iter().enumerate() {
                    let expected = preserve_background(&head.q, &src.keys[h], &src.values[h], e.source_mask).unwrap();
                    if expected.data() != out[h].data() {
                        self.mismatched += 1;
                    }
                }
            }
            SiteRoute::NormalMix => self.normal_mix += 1,
            _ => self.other_self += 1,
        }
    }
}

#[test]
fn removal_routes_every_gated_site_to_background() {
    let b = ToyBackend::default();
    let mut audit = RemovalAudit::default();
    let params = EditParams::new(TaskKind::RemoveObject, "", "");
    let r = edit_prepared(&image(1), &object_mask(), &params, &b, &mut audit).unwrap();
    assert_eq!(r.mask_record.len(), 50);
    assert!(r.mask_record.iter().all(|m| m.ones == 0 && m.mask.iter().all(|b| !b)));
    assert_eq!(audit.other_self, 0);
    assert_eq!(audit.mismatched, 0);
    // 2 self sites x 2 branches x 50 steps
    assert_eq!(audit.background_only + audit.normal_mix, 200);
    assert!(audit.background_only > 150);
    assert_eq!(audit.steps, (1..=50).map(|k| (k, 50)).collect::<Vec<_>>());
}

#[test]
fn defaults_reach_the_fingerprint() {
    let params: EditParams = serde_json::from_str(r#"{"task":"replace_object","target_prompt":"a tiger","object_word":"tiger"}"#).unwrap();
    assert_eq!(params.guidance_scale, 7.5);
    assert_eq!(params.steps, 50);
    let b = ToyBackend::default();
    let r = edit_prepared(&image(2), &object_mask(), &params, &b, &mut NoObserver).unwrap();
    assert_eq!(r.config.guidance_scale, 7.5);
    assert_eq!(r.config.steps, 50);
    assert_eq!(r.config_fingerprint, r.config.fingerprint());
    let json = serde_json::to_value(&r.config).unwrap();
    assert_eq!(json["guidance_scale"], 7.5);
    assert_eq!(json["steps"], 50);
    let mut other = params.clone();
    other.guidance_scale = 8.0;
    let r2 = edit_prepared(&image(2), &object_mask(), &other, &b, &mut NoObserver).unwrap();
    assert_ne!(r.config_fingerprint, r2.config_fingerprint);
}

#[test]
fn no_edit_control_stays_near_plain_reconstruction() {
    let b = ToyBackend::default();
    for seed in 0..2 {
        let img = image(seed);
        let z0 = b.encode_image(&img).unwrap();
        let plain = reconstruct(&ddim_invert(&z0, &b, 50).unwrap(), &b).unwrap();
        let plain_err = plain.relative_l2(&z0);
        let r = edit_prepared(&img, &object_mask(), &no_edit(seed), &b, &mut NoObserver).unwrap();
        let err = r.final_latent.relative_l2(&z0);
        assert!(err <= 1.5 * plain_err, "seed {seed}: {err} vs plain {plain_err}");
        assert!(r.edited_image.psnr(&img) > 30.0);
    }
}

#[test]
fn identical_requests_are_bitwise_identical() {
    let b = ToyBackend::default();
    let params = EditParams::new(TaskKind::ReplaceObject, "a photo of a tiger", "tiger");
    let a = edit_prepared(&image(3), &object_mask(), &params, &b, &mut NoObserver).unwrap();
    let c = edit_prepared(&image(3), &object_mask(), &params, &b, &mut NoObserver).unwrap();
    assert_eq!(a.mask_record, c.mask_record);
    assert_eq!(a.final_latent.data, c.final_latent.data);
    assert_eq!(a.edited_image.to_png_bytes().unwrap(), c.edited_image.to_png_bytes().unwrap());
    let mut reseeded = params.clone();
    reseeded.seed = 99;
    let d = edit_prepared(&image(3), &object_mask(), &reseeded, &b, &mut NoObserver).unwrap();
    assert_ne!(a.final_latent.data, d.final_latent.data);
}

struct Counting {
    inner: ToyBackend,
    calls: AtomicUsize,
}

impl DiffusionBackend for Counting {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn encode_text(&self, prompt: &str, object_word: Option<&str>) -> Result<PromptEmbedding, BackendError> {
        self.inner.encode_text(prompt, object_word)
    }

    fn predict_noise(
        &self,
        z: &LatentTensor,
        timestep: usize,
        cond: &PromptEmbedding,
        aux: &[&PromptEmbedding],
        hooks: &mut dyn AttentionHook,
    ) -> Result<ForwardOutput, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise(z, timestep, cond, aux, hooks)
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<LatentTensor, BackendError> {
        self.inner.encode_image(image)
    }

    fn decode_latent(&self, z: &LatentTensor) -> Result<ImageTensor, BackendError> {
        self.inner.decode_latent(z)
    }
}

#[test]
fn three_forward_passes_per_step() {
    let b = Counting {
        inner: ToyBackend::default(),
        calls: AtomicUsize::new(0),
    };
    let mut params = EditParams::new(TaskKind::ReplaceObject, "a photo of a tiger", "tiger");
    params.steps = 20;
    edit_prepared(&image(4), &object_mask(), &params, &b, &mut NoObserver).unwrap();
    // inversion passes, then cond + uncond + source features per step
    assert_eq!(b.calls.load(Ordering::SeqCst), 20 + 3 * 20);
}

#[test]
fn mask_record_follows_the_task_table() {
    let b = ToyBackend::default();
    let m = object_mask();
    let bits = m.binarized();
    let run = |task, prompt: &str, word: &str, policy: MaskPolicyConfig| {
        let mut p = EditParams::new(task, prompt, word);
        p.steps = 20;
        p.mask_policy = policy;
        edit_prepared(&image(5), &m, &p, &b, &mut NoObserver).unwrap().mask_record
    };
    let remove = run(TaskKind::RemoveObject, "", "", MaskPolicyConfig::default());
    assert!(remove.iter().all(|s| s.ones == 0));
    let background = run(TaskKind::AlterBackground, "a beach", "", MaskPolicyConfig::default());
    assert!(background.iter().all(|s| s.mask == bits));
    for refinement in [Refinement::FromCrossAttention, Refinement::HullExtension] {
        let policy = MaskPolicyConfig {
            refinement,
            hull_dilation_px: 2,
            ..Default::default()
        };
        let replace = run(TaskKind::ReplaceObject, "a photo of a tiger", "tiger", policy);
        assert_eq!(replace.len(), 20);
        assert!(replace[..10].iter().all(|s| s.mask == bits), "{refinement:?}");
        assert!(replace[10..].iter().any(|s| s.mask != bits), "{refinement:?}");
    }
    let none = run(
        TaskKind::ReplaceObject,
        "a photo of a tiger",
        "tiger",
        MaskPolicyConfig {
            refinement: Refinement::None,
            ..Default::default()
        },
    );
    assert!(none.iter().all(|s| s.mask == bits));
    for (i, s) in remove.iter().enumerate() {
        assert_eq!(s.step_index, i);
    }
}

#[test]
fn full_source_mask_with_removal_is_an_invalid_mask() {
    let b = ToyBackend::default();
    let mut params = EditParams::new(TaskKind::RemoveObject, "", "");
    params.steps = 10;
    params.schedule.normal_attention_fraction = 0.0;
    let err = edit_prepared(&image(6), &SpatialMask::ones((16, 16)), &params, &b, &mut NoObserver).unwrap_err();
    match err {
        PipelineError::InvalidMask { step, site, .. } => {
            assert_eq!(step, 0);
            assert_eq!(site, "self[0]@8x8");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn controllers_never_hurt_the_background() {
    let b = ToyBackend::default();
    let m = object_mask();
    for seed in 0..3 {
        let img = image(seed);
        let control = edit_prepared(&img, &m, &no_edit(seed), &b, &mut NoObserver).unwrap();
        for (task, prompt, word) in [
            (TaskKind::RemoveObject, "", ""),
            (TaskKind::ReplaceObject, "a photo of a tiger", "tiger"),
        ] {
            let mut p = EditParams::new(task, prompt, word);
            p.seed = seed;
            let with = edit_prepared(&img, &m, &p, &b, &mut NoObserver).unwrap();
            p.controllers = Controllers::NONE;
            let without = edit_prepared(&img, &m, &p, &b, &mut NoObserver).unwrap();
            let (d_with, d_without) = (
                background_mad(&with.edited_image, &control.edited_image, &m),
                background_mad(&without.edited_image, &control.edited_image, &m),
            );
            assert!(d_with <= d_without, "{task} seed {seed}: {d_with} > {d_without}");
        }
    }
}

#[test]
fn request_validation() {
    let ok = EditParams::new(TaskKind::ReplaceObject, "a tiger", "tiger");
    assert!(ok.validate().is_ok());
    let bad = |f: &dyn Fn(&mut EditParams)| {
        let mut p = ok.clone();
        f(&mut p);
        p.validate().unwrap_err()
    };
    assert!(bad(&|p| p.guidance_scale = 0.5).is_validation());
    assert!(bad(&|p| p.guidance_scale = 15.5).is_validation());
    assert!(bad(&|p| p.steps = 9).is_validation());
    assert!(bad(&|p| p.steps = 201).is_validation());
    assert!(bad(&|p| p.target_prompt = "  ".into()).is_validation());
    assert!(bad(&|p| p.schedule.mask_switch_step = 0).is_validation());
    assert!(bad(&|p| p.schedule.normal_attention_fraction = 1.5).is_validation());
    let mut hi = ok.clone();
    hi.guidance_scale = MAX_GUIDANCE;
    assert!(hi.validate().is_ok());
    let remove = EditParams::new(TaskKind::RemoveObject, "", "");
    assert!(remove.validate().is_ok());
    let mut retained = remove.clone();
    retained.schedule = EditSchedule {
        retain_object: true,
        ..Default::default()
    };
    assert!(retained.validate().is_err());
}

#[test]
fn size_policy() {
    let b = ToyBackend::default();
    let big = image(7).resized((32, 24));
    let mask = object_mask().resized((32, 24));
    let mut p = EditParams::new(TaskKind::RemoveObject, "", "");
    p.steps = 10;
    let r = edit_prepared(&big, &mask, &p, &b, &mut NoObserver).unwrap();
    assert_eq!(r.edited_image.resolution(), (32, 24));
    p.size_policy = SizePolicy::Reject;
    assert!(edit_prepared(&big, &mask, &p, &b, &mut NoObserver).unwrap_err().is_validation());
    assert!(edit_prepared(&big, &object_mask(), &p, &b, &mut NoObserver).is_err());
}

#[test]
fn missing_object_word_falls_back_to_hull() {
    let b = ToyBackend::default();
    let mut p = EditParams::new(TaskKind::ReplaceObject, "a striped cat", "tiger");
    p.steps = 12;
    let r = edit_prepared(&image(8), &object_mask(), &p, &b, &mut NoObserver).unwrap();
    assert_eq!(r.config.mask_policy.refinement, Refinement::HullExtension);
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn edit_image_resolves_file_masks() {
    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("in.png");
    let mask_path = dir.path().join("mask.png");
    image(9).save_png(&img_path).unwrap();
    object_mask().save_png(&mask_path).unwrap();
    let mut params = EditParams::new(TaskKind::RemoveObject, "", "");
    params.steps = 10;
    let req = EditRequest {
        image: img_path.clone(),
        source_mask_spec: MaskSpec::File { path: mask_path },
        params,
    };
    let json = serde_json::to_string(&req).unwrap();
    assert_eq!(serde_json::from_str::<EditRequest>(&json).unwrap(), req);
    let b = ToyBackend::default();
    let resolver = MaskResolver::new(None);
    let r = edit_image(&req, &b, &resolver, &mut NoObserver).unwrap();
    let direct = edit_prepared(
        &ImageTensor::load(&img_path).unwrap(),
        &object_mask(),
        &req.params,
        &b,
        &mut NoObserver,
    )
    .unwrap();
    assert_eq!(r.final_latent.data, direct.final_latent.data);

    let out = dir.path().join("out").join("edit.png");
    let manifest = write_run_outputs(&r, &req, &out).unwrap();
    assert!(out.exists());
    assert_eq!(manifest.mask_record.len(), 10);
    assert_eq!(std::fs::read_dir(dir.path().join("out/edit_masks")).unwrap().count(), 10);
    let text = std::fs::read_to_string(dir.path().join("out/edit.manifest.json")).unwrap();
    let back: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back.config_fingerprint, r.config_fingerprint);
    assert_eq!(back.timing.steps_s.len(), 10);
}

#[test]
fn single_region_equals_text_to_image() {
    let b = ToyBackend::default();
    let params = SynthesisParams {
        steps: 10,
        seed: 3,
        ..Default::default()
    };
    let plain = text_to_image("a red barn", &b, &params).unwrap();
    let routed = multi_region_synthesis(&[("a red barn".into(), SpatialMask::ones((16, 16)))], &b, &params).unwrap();
    let diff = plain
        .latent
        .data
        .iter()
        .zip(routed.latent.data.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn region_synthesis_rejects_bad_partitions() {
    let b = ToyBackend::default();
    let params = SynthesisParams::default();
    assert!(multi_region_synthesis(&[], &b, &params).is_err());
    let left = SpatialMask::from_fn((16, 16), |_, x| x < 8);
    let wide = SpatialMask::from_fn((16, 16), |_, x| x < 10);
    let right = left.complement();
    assert!(multi_region_synthesis(&[("a".into(), wide), ("b".into(), right.clone())], &b, &params).is_err());
    assert!(multi_region_synthesis(&[("a".into(), left.clone())], &b, &params).is_err());
    assert!(multi_region_synthesis(&[("a".into(), left), ("b".into(), right)], &b, &SynthesisParams { steps: 10, ..params }).is_ok());
}

struct Recording<'a> {
    router: &'a mut RegionRouter,
    first_cross: Option<Vec<FeatureMatrix>>,
}

impl AttentionHook for Recording<'_> {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> Result<Option<Vec<FeatureMatrix>>, HookError> {
        let out = self.router.on_attention(call)?;
        if call.site.kind == AttentionKind::CrossAttention && call.site.layer_index == 0 {
            self.first_cross = out.clone();
        }
        Ok(out)
    }
}

#[test]
fn left_tokens_ignore_the_right_prompt() {
    let b = ToyBackend::default();
    let left = SpatialMask::from_fn((16, 16), |_, x| x < 8);
    let right = left.complement();
    let mut router = RegionRouter::new(&[&left, &right], &b.descriptor().sites).unwrap();
    let grid = (8, 8);
    let left_tokens = resample_mask(&left, grid);
    assert_eq!(router.tokens(grid, 0), Some(&left_tokens));
    let cond = b.encode_text("a red barn", None).unwrap();
    let aux = b.encode_text("a blue sea", None).unwrap();
    let mut perturbed = aux.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    perturbed.token_embeddings.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    let z = initial_noise((12, 8, 8), 4, 981);
    let mut outputs = Vec::new();
    for a in [&aux, &perturbed] {
        let mut hook = Recording {
            router: &mut router,
            first_cross: None,
        };
        b.predict_noise(&z, 981, &cond, &[a], &mut hook).unwrap();
        outputs.push(hook.first_cross.unwrap());
    }
    let mut inside = 0.0f64;
    let mut outside = 0.0f64;
    for (h0, h1) in outputs[0].iter().zip(&outputs[1]) {
        for tok in 0..64 {
            let d = (&h0.row(tok) - &h1.row(tok)).mapv(f64::abs).fold(0.0, |m: f64, v| m.max(*v));
            if left_tokens.get(tok) {
                outside = outside.max(d);
            } else {
                inside = inside.max(d);
            }
        }
    }
    assert!(outside <= 1e-12, "{outside}");
    assert!(inside > 1e-6);
}

#[test]
fn router_direct_call_routes_each_region() {
    let b = ToyBackend::default();
    let top = SpatialMask::from_fn((16, 16), |y, _| y < 8);
    let mut router = RegionRouter::new(&[&top, &top.complement()], &b.descriptor().sites).unwrap();
    let site = b.descriptor().sites[3].clone();
    assert_eq!(site.kind, AttentionKind::CrossAttention);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rand_fm = |n: usize| FeatureMatrix::new(Array2::from_shape_fn((n, 8), |_| rng.random_range(-1.0..1.0))).unwrap();
    let heads: Vec<HeadProjections> = (0..2)
        .map(|_| HeadProjections {
            q: rand_fm(16),
            k: rand_fm(8),
            v: rand_fm(8),
        })
        .collect();
    let aux = vec![(0..2).map(|_| (rand_fm(8), rand_fm(8))).collect::<Vec<_>>()];
    let call = AttentionCall {
        site,
        heads: &heads,
        aux: &aux,
    };
    let out = router.on_attention(&call).unwrap().unwrap();
    for (h, head) in heads.iter().enumerate() {
        let own = cpam_core::attention::scaled_dot_attention(&head.q, &head.k, &head.v).unwrap();
        let other = cpam_core::attention::scaled_dot_attention(&head.q, &aux[0][h].0, &aux[0][h].1).unwrap();
        for tok in 0..16 {
            let expected = if tok < 8 { own.row(tok) } else { other.row(tok) };
            let d = (&out[h].row(tok) - &expected).mapv(f64::abs).fold(0.0, |m: f64, v| m.max(*v));
            assert!(d < 1e-12);
        }
    }
}
