#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use cpam_core::backend::ToyBackend;
use cpam_core::mask_input::SegmentationClient;
use cpam_core::tensor::ImageTensor;
use cpam_interface::config::Config;
use cpam_interface::jobs::JobEvent;
use cpam_interface::service::Service;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Server {
    pub base: String,
    pub service: Service,
    pub rt: tokio::runtime::Runtime,
}

impl Drop for Server {
    fn drop(&mut self) {
        self.service.shutdown();
    }
}

pub fn spawn_router(router: axum::Router) -> (String, tokio::runtime::Runtime) {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, router).await.unwrap() });
    (format!("http://{addr}"), rt)
}

pub fn config(store: &Path, queue_size: usize) -> Config {
    Config {
        store_path: store.to_path_buf(),
        queue_size,
        ..Config::default()
    }
}

pub fn serve(config: Config, segmenter: Option<Arc<dyn SegmentationClient>>, workers: bool) -> Server {
    let service = Service::open(config, Arc::new(ToyBackend::default()), segmenter).unwrap();
    if workers {
        service.start_workers();
    }
    let (base, rt) = spawn_router(service.router());
    Server { base, service, rt }
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(600))
        .build()
        .unwrap()
}

pub fn image(seed: u64, side: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(Array3::from_shape_fn((3, side, side), |(c, y, x)| {
        (0.5 + 0.3 * ((x + 2 * y + c) as f64 / 4.0).sin() + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
    }))
}

/// Reads an SSE body to its end and returns the decoded events.
pub fn read_events(resp: reqwest::blocking::Response) -> Vec<(u64, JobEvent)> {
    let mut out = Vec::new();
    let mut id = None;
    for line in BufReader::new(resp).lines() {
        let line = line.unwrap();
        if let Some(v) = line.strip_prefix("id:") {
            id = Some(v.trim().parse().unwrap());
        } else if let Some(v) = line.strip_prefix("data:") {
            let e: JobEvent = serde_json::from_str(v.trim()).unwrap();
            out.push((id.take().unwrap(), e));
        }
    }
    out
}
