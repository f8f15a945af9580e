mod common;

use std::sync::Arc;

use common::{client, config, image, read_events, serve, spawn_router};
use cpam_core::mask::SpatialMask;
use cpam_core::mask_input::{Click, DiskSegmenter, MaskSpec, RleMask, SegmentQuery, SegmentationClient};
use cpam_core::pipeline::EditParams;
use cpam_core::mask::TaskKind;
use cpam_interface::jobs::{EditJob, JobRequest, JobState, Priority};
use cpam_interface::segment::stub_router;
use cpam_interface::service::MaskRequest;
use cpam_interface::store::JobStore;
use reqwest::StatusCode;
use serde_json::Value;

const SIDE: usize = 16;

fn object_mask() -> SpatialMask {
    SpatialMask::from_fn((SIDE, SIDE), |y, x| (5..11).contains(&y) && (4..10).contains(&x))
}

fn upload(c: &reqwest::blocking::Client, base: &str, seed: u64) -> (String, String) {
    let png = image(seed, SIDE).to_png_bytes().unwrap();
    let r = c.post(format!("{base}/images")).body(png).send().unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let image_id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
    let r = c
        .post(format!("{base}/masks"))
        .header("content-type", "image/png")
        .body(object_mask().to_png_bytes().unwrap())
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let mask_id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
    (image_id, mask_id)
}

fn edit_body(image_id: &str, mask_id: &str, steps: usize) -> Value {
    serde_json::json!({
        "image_id": image_id,
        "mask_id": mask_id,
        "task": "replace_object",
        "target_prompt": "a photo of a tiger",
        "object_word": "tiger",
        "steps": steps,
        "seed": 3,
    })
}

fn wait_done(c: &reqwest::blocking::Client, base: &str, job: &str) -> EditJob {
    let r = c.get(format!("{base}/edits/{job}/events")).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    read_events(r);
    c.get(format!("{base}/edits/{job}")).send().unwrap().json().unwrap()
}

#[test]
fn painted_mask_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let s = serve(config(dir.path(), 8), None, false);
    let c = client();
    let png = object_mask().to_png_bytes().unwrap();
    let r = c
        .post(format!("{}/masks", s.base))
        .header("content-type", "image/png")
        .body(png.clone())
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let body: Value = r.json().unwrap();
    assert_eq!(body["ones"], 36);
    let got = c.get(format!("{}/masks/{}", s.base, body["id"].as_str().unwrap())).send().unwrap();
    assert_eq!(got.headers()["content-type"], "image/png");
    assert_eq!(got.bytes().unwrap().as_ref(), png.as_slice());
}

#[test]
fn click_masks_through_the_stub_service_round_trip() {
    let stub: Arc<dyn SegmentationClient> = Arc::new(DiskSegmenter { radius: 4.0 });
    let (stub_base, _stub_rt) = spawn_router(stub_router(stub));
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 8);
    cfg.segmentation_endpoint = Some(stub_base);
    let s = serve(cfg, None, false);
    let c = client();
    let (image_id, _) = upload(&c, &s.base, 1);
    let req = MaskRequest {
        image_id,
        spec: MaskSpec::Clicks {
            points: vec![Click { x: 8, y: 7, positive: true }],
        },
    };
    let r = c.post(format!("{}/masks", s.base)).json(&req).send().unwrap();
    assert_eq!(r.status(), StatusCode::CREATED, "{:?}", r.text());
    let body: Value = r.json().unwrap();
    let id = body["id"].as_str().unwrap();
    let first = c.get(format!("{}/masks/{id}", s.base)).send().unwrap().bytes().unwrap();
    let second = c.get(format!("{}/masks/{id}", s.base)).send().unwrap().bytes().unwrap();
    assert_eq!(first, second);
    let decoded = SpatialMask::from_png_bytes(&first).unwrap();
    let expected = DiskSegmenter { radius: 4.0 }
        .segment(
            &image(1, SIDE),
            &SegmentQuery::Clicks {
                points: vec![Click { x: 8, y: 7, positive: true }],
            },
        )
        .unwrap();
    assert_eq!(RleMask::encode(&decoded.binarized()), expected.mask);
    assert_eq!(decoded.values().iter().filter(|v| **v != 0.0 && **v != 1.0).count(), 0);

    let bad = MaskRequest {
        image_id: body["id"].as_str().unwrap().to_string(),
        spec: MaskSpec::TextPhrase { phrase: "x".into() },
    };
    let r = c.post(format!("{}/masks", s.base)).json(&bad).send().unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[test]
fn result_before_done_is_409_then_events_count_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let s = serve(config(dir.path(), 8), None, false);
    let c = client();
    let (image_id, mask_id) = upload(&c, &s.base, 2);
    let r = c.post(format!("{}/edits", s.base)).json(&edit_body(&image_id, &mask_id, 50)).send().unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    let accepted: Value = r.json().unwrap();
    assert_eq!(accepted["state"], "queued");
    let job = accepted["job_id"].as_str().unwrap().to_string();
    let r = c.get(format!("{}/edits/{job}/result", s.base)).send().unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);

    s.service.start_workers();
    let events = read_events(c.get(format!("{}/edits/{job}/events", s.base)).send().unwrap());
    let seqs: Vec<u64> = events.iter().map(|(id, _)| *id).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    let steps: Vec<usize> = events
        .iter()
        .filter_map(|(_, e)| match e.state {
            JobState::Denoising { step, of } => {
                assert_eq!(of, 50);
                Some(step)
            }
            _ => None,
        })
        .collect();
    assert_eq!(steps, (1..=50).collect::<Vec<_>>());
    assert_eq!(events.first().unwrap().1.state, JobState::Inverting);
    assert_eq!(events.last().unwrap().1.state, JobState::Done);

    let r = c.get(format!("{}/edits/{job}/result", s.base)).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let png = r.bytes().unwrap();
    let edited = cpam_core::tensor::ImageTensor::from_bytes(&png).unwrap();
    assert_eq!(edited.resolution(), (SIDE, SIDE));
    let state: EditJob = c.get(format!("{}/edits/{job}", s.base)).send().unwrap().json().unwrap();
    let result_id = state.result_image_id.unwrap();
    let again = c.get(format!("{}/images/{result_id}", s.base)).send().unwrap().bytes().unwrap();
    assert_eq!(again, png);

    let resumed = read_events(
        c.get(format!("{}/edits/{job}/events", s.base))
            .header("Last-Event-ID", "40")
            .send()
            .unwrap(),
    );
    assert_eq!(resumed.first().unwrap().0, 41);
    assert_eq!(resumed.len(), events.len() - 40);
}

#[test]
fn errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let s = serve(config(dir.path(), 1), None, false);
    let c = client();
    let (image_id, mask_id) = upload(&c, &s.base, 3);
    let unknown = "0".repeat(64);
    assert_eq!(
        c.get(format!("{}/edits/nope", s.base)).send().unwrap().status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        c.get(format!("{}/edits/nope/events", s.base)).send().unwrap().status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        c.get(format!("{}/masks/{unknown}", s.base)).send().unwrap().status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        c.get(format!("{}/images/../../etc", s.base)).send().unwrap().status(),
        StatusCode::NOT_FOUND
    );
    let mut body = edit_body(&image_id, &mask_id, 50);
    body["target_prompt"] = "".into();
    assert_eq!(
        c.post(format!("{}/edits", s.base)).json(&body).send().unwrap().status(),
        StatusCode::BAD_REQUEST
    );
    let mut body = edit_body(&image_id, &mask_id, 50);
    body["guidance_scale"] = 99.0.into();
    assert_eq!(
        c.post(format!("{}/edits", s.base)).json(&body).send().unwrap().status(),
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        c.post(format!("{}/edits", s.base)).body("{").send().unwrap().status(),
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        c.post(format!("{}/edits", s.base))
            .json(&edit_body(&unknown, &mask_id, 50))
            .send()
            .unwrap()
            .status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        c.post(format!("{}/images", s.base)).body("not an image").send().unwrap().status(),
        StatusCode::BAD_REQUEST
    );
    let ok = c.post(format!("{}/edits", s.base)).json(&edit_body(&image_id, &mask_id, 50)).send().unwrap();
    assert_eq!(ok.status(), StatusCode::ACCEPTED);
    let full = c.post(format!("{}/edits", s.base)).json(&edit_body(&image_id, &mask_id, 50)).send().unwrap();
    assert_eq!(full.status(), StatusCode::SERVICE_UNAVAILABLE);
    let health: Value = c.get(format!("{}/healthz", s.base)).send().unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["queued"], 1);
}

#[test]
fn jobs_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (queued_id, image_id, mask_id) = {
        let s = serve(config(dir.path(), 8), None, false);
        let c = client();
        let (image_id, mask_id) = upload(&c, &s.base, 4);
        let r: Value = c
            .post(format!("{}/edits", s.base))
            .json(&edit_body(&image_id, &mask_id, 10))
            .send()
            .unwrap()
            .json()
            .unwrap();
        (r["job_id"].as_str().unwrap().to_string(), image_id, mask_id)
    };
    let store = JobStore::open(dir.path()).unwrap();
    let mut params = EditParams::new(TaskKind::ReplaceObject, "a photo of a tiger", "tiger");
    params.steps = 10;
    store
        .save(&EditJob {
            job_id: "interrupted".into(),
            request: JobRequest {
                image_id,
                mask_id,
                priority: Priority::High,
                params,
            },
            state: JobState::Denoising { step: 4, of: 10 },
            created_unix_ms: 1,
            updated_unix_ms: 2,
            result_image_id: None,
            config_fingerprint: None,
            warnings: vec![],
            events: vec![],
        })
        .unwrap();

    let s = serve(config(dir.path(), 8), None, true);
    let c = client();
    let failed: EditJob = c.get(format!("{}/edits/interrupted", s.base)).send().unwrap().json().unwrap();
    assert!(matches!(failed.state, JobState::Failed { .. }), "{:?}", failed.state);
    let done = wait_done(&c, &s.base, &queued_id);
    assert_eq!(done.state, JobState::Done);
    assert!(done.config_fingerprint.is_some());
}

#[test]
fn priority_classes_drain_first() {
    let dir = tempfile::tempdir().unwrap();
    let s = serve(config(dir.path(), 8), None, false);
    let c = client();
    let (image_id, mask_id) = upload(&c, &s.base, 5);
    let mut ids = Vec::new();
    for prio in ["low", "normal", "high"] {
        let mut body = edit_body(&image_id, &mask_id, 10);
        body["priority"] = prio.into();
        let r: Value = c.post(format!("{}/edits", s.base)).json(&body).send().unwrap().json().unwrap();
        ids.push(r["job_id"].as_str().unwrap().to_string());
    }
    s.service.start_workers();
    let jobs: Vec<EditJob> = ids.iter().map(|id| wait_done(&c, &s.base, id)).collect();
    assert!(jobs.iter().all(|j| j.state == JobState::Done));
    let started = |j: &EditJob| j.events[0].at_unix_ms;
    assert!(started(&jobs[2]) <= started(&jobs[1]));
    assert!(started(&jobs[1]) <= started(&jobs[0]));
}
