//! HTTP segmentation client and a stub server speaking the same contract.
//!
//! `POST /segment`, multipart with an `image` part (PNG) and a `spec` part
//! (JSON [`SegmentQuery`]). The reply is a JSON [`SegmentResponse`].

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Multipart, State};
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use cpam_core::mask_input::{MaskInputError, SegmentQuery, SegmentResponse, SegmentationClient};
use cpam_core::tensor::ImageTensor;
use reqwest::blocking::{multipart, Client};

pub struct HttpSegmenter {
    endpoint: String,
    client: Client,
    pub attempts: usize,
    pub backoff: Duration,
}

impl HttpSegmenter {
    pub fn new(endpoint: &str) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            client: Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("HTTP client"),
            attempts: 3,
            backoff: Duration::from_millis(100),
        }
    }

    fn once(&self, png: &[u8], spec: &str) -> Result<SegmentResponse, Attempt> {
        let form = multipart::Form::new()
            .part(
                "image",
                multipart::Part::bytes(png.to_vec())
                    .file_name("image.png")
                    .mime_str("image/png")
                    .expect("static mime"),
            )
            .text("spec", spec.to_string());
        let resp = self
            .client
            .post(format!("{}/segment", self.endpoint))
            .multipart(form)
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {body}")));
        }
        resp.json().map_err(|e| Attempt::Fatal(format!("bad response body: {e}")))
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl SegmentationClient for HttpSegmenter {
    fn segment(&self, image: &ImageTensor, query: &SegmentQuery) -> Result<SegmentResponse, MaskInputError> {
        let png = image
            .to_png_bytes()
            .map_err(|e| MaskInputError::InvalidSpec(e.to_string()))?;
        let spec = serde_json::to_string(query).map_err(|e| MaskInputError::InvalidSpec(e.to_string()))?;
        let mut last = String::new();
        for attempt in 0..self.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.backoff * (1 << (attempt - 1)));
            }
            match self.once(&png, &spec) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(m)) => return Err(MaskInputError::Rejected(m)),
                Err(Attempt::Retry(m)) => {
                    log::warn!("segmentation attempt {} failed: {m}", attempt + 1);
                    last = m;
                }
            }
        }
        Err(MaskInputError::Transport {
            attempts: self.attempts.max(1),
            message: last,
        })
    }
}

async fn segment_handler(
    State(client): State<Arc<dyn SegmentationClient>>,
    mut form: Multipart,
) -> Result<Json<SegmentResponse>, (StatusCode, String)> {
    let bad = |m: String| (StatusCode::BAD_REQUEST, m);
    let (mut image, mut spec) = (None, None);
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        match field.name() {
            Some("image") => image = Some(field.bytes().await.map_err(|e| bad(e.to_string()))?),
            Some("spec") => spec = Some(field.bytes().await.map_err(|e| bad(e.to_string()))?),
            _ => {}
        }
    }
    let image = ImageTensor::from_bytes(&image.ok_or_else(|| bad("missing image part".into()))?)
        .map_err(|e| bad(e.to_string()))?;
    let query: SegmentQuery =
        serde_json::from_slice(&spec.ok_or_else(|| bad("missing spec part".into()))?).map_err(|e| bad(e.to_string()))?;
    tokio::task::spawn_blocking(move || client.segment(&image, &query))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
        .map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

/// Router serving `client` over the segmentation contract.
pub fn stub_router(client: Arc<dyn SegmentationClient>) -> Router {
    Router::new().route("/segment", post(segment_handler)).with_state(client)
}
