mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use common::image;
use cpam_core::evaluation::read_records_csv;
use cpam_core::mask::SpatialMask;
use cpam_core::pipeline::RunManifest;
use serde_json::Value;

fn cpam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpam")).args(args).output().unwrap()
}

fn micro() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../datasets/imba-micro")
}

fn inputs(dir: &Path) -> (String, String) {
    let img = dir.join("in.png");
    let mask = dir.join("mask.png");
    image(7, 32).save_png(&img).unwrap();
    SpatialMask::from_fn((32, 32), |y, x| (10..22).contains(&y) && (8..20).contains(&x))
        .save_png(&mask)
        .unwrap();
    (img.display().to_string(), mask.display().to_string())
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_prompt_for_replace_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = inputs(dir.path());
    let out = dir.path().join("o.png").display().to_string();
    let o = cpam(&["edit", "--image", &img, "--mask", &mask, "--task", "replace", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--prompt"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = inputs(dir.path());
    let o = cpam(&["edit", "--image", &img, "--mask", &mask, "--task", "remove"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"));
    let o = cpam(&["edit", "--image", &img, "--task", "remove", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cpam(&["edit", "--image", &img, "--mask", &mask, "--task", "teleport", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cpam(&[
        "edit", "--image", &img, "--mask", &mask, "--task", "replace", "--prompt", "a cat", "--guidance", "40", "--out",
        "x.png",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = cpam(&["edit", "--image", "/nonexistent.png", "--mask", &mask, "--task", "remove", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cpam(&[
        "edit", "--image", &img, "--clicks", "1,2,?", "--task", "remove", "--out", "x.png",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = cpam(&["edit", "--image", &img, "--mask-text", "the ball", "--task", "remove", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unreachable_segmentation_service_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = inputs(dir.path());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}");
    let out = dir.path().join("o.png").display().to_string();
    let o = cpam(&[
        "edit", "--image", &img, "--clicks", "12,12", "--task", "remove", "--segment-endpoint", &endpoint, "--out", &out,
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn remove_writes_all_zero_target_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = inputs(dir.path());
    let out = dir.path().join("removed.png");
    let o = cpam(&[
        "edit", "--image", &img, "--mask", &mask, "--task", "remove", "--out", &out.display().to_string(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.exists());
    let manifest: RunManifest =
        serde_json::from_slice(&std::fs::read(dir.path().join("removed.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.mask_record.len(), 50);
    assert!(manifest.mask_record.iter().all(|m| m.ones == 0));
    assert_eq!(std::fs::read_dir(dir.path().join("removed_masks")).unwrap().count(), 50);
}

#[test]
fn bench_limit_zero_and_bad_dataset_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r").display().to_string();
    let o = cpam(&["bench", "--dataset", &micro().display().to_string(), "--limit", "0", "--report", &report]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));
    let o = cpam(&["bench", "--dataset", "/nonexistent", "--report", &report]);
    assert_eq!(o.status.code(), Some(2));
}

fn record_files(dir: &Path) -> usize {
    std::fs::read_dir(dir.join("records")).map(|d| d.count()).unwrap_or(0)
}

#[test]
fn bench_resumes_after_kill_without_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report");
    let work = dir.path().join("work");
    let args = [
        "bench".to_string(),
        "--dataset".into(),
        micro().display().to_string(),
        "--report".into(),
        report.display().to_string(),
        "--work-dir".into(),
        work.display().to_string(),
    ];
    let mut child = Command::new(env!("CARGO_BIN_EXE_cpam"))
        .args(&args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let t0 = Instant::now();
    while record_files(&work) < 2 && t0.elapsed() < Duration::from_secs(300) {
        if child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    child.wait().unwrap();
    let before = record_files(&work);
    assert!(before >= 2);
    let first = std::fs::read(work.join("records/m001.json")).unwrap();

    let o = Command::new(env!("CARGO_BIN_EXE_cpam")).args(&args).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(record_files(&work), 6);
    assert_eq!(std::fs::read(work.join("records/m001.json")).unwrap(), first);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("6 records"), "{stdout}");
    let records = read_records_csv(&report.with_extension("csv")).unwrap();
    let mut ids: Vec<_> = records.iter().map(|r| r.sample_id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids, ["m001", "m002", "m003", "m004", "m005", "m006"]);
    assert_eq!(records.len(), 6);
    let text = std::fs::read_to_string(report.with_extension("txt")).unwrap();
    assert!(text.contains("pyramid-proxy-v1"));
}

#[test]
fn config_file_selects_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "backend = \"nope\"\n").unwrap();
    let (img, mask) = inputs(dir.path());
    let out = dir.path().join("o.png").display().to_string();
    let base = ["edit", "--image", &img, "--mask", &mask, "--task", "remove", "--steps", "10", "--out", &out];
    let mut args = base.to_vec();
    args.extend(["--config", cfg.to_str().unwrap()]);
    let o = cpam(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown backend"));
    std::fs::write(&cfg, "backend = \"toy\"\nqueue_size = 4\n").unwrap();
    let o = cpam(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("o.manifest.json")).unwrap()).unwrap();
    assert!(manifest["config"]["backend"].as_str().unwrap().starts_with("toy"));
}
