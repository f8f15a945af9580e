//! CLIP ViT-B/32 embeddings for prompt-alignment scoring.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::{ClipConfig, ClipModel};
use cpam_core::evaluation::{EmbeddingClient, EvalError};
use cpam_core::tensor::ImageTensor;
use ndarray::{s, Array3};
use tokenizers::Tokenizer;

const MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
const CONTEXT: usize = 77;
const EOS: u32 = 49407;

fn client_err(e: impl std::fmt::Display) -> EvalError {
    EvalError::Client(e.to_string())
}

pub struct ClipScorer {
    model: ClipModel,
    tokenizer: Tokenizer,
    image_size: usize,
    device: Device,
}

impl ClipScorer {
    /// `weights`: `model.safetensors` of a ViT-B/32 CLIP checkpoint.
    pub fn load(weights: &Path, tokenizer: &Path, device: &Device) -> Result<Self, EvalError> {
        let config = ClipConfig::vit_base_patch32();
        let vs = unsafe { VarBuilder::from_mmaped_safetensors(&[weights], DType::F32, device) }.map_err(client_err)?;
        Ok(Self {
            model: ClipModel::new(vs, &config).map_err(client_err)?,
            tokenizer: Tokenizer::from_file(tokenizer).map_err(client_err)?,
            image_size: config.image_size,
            device: device.clone(),
        })
    }
}

/// Shorter side to `side`, centre crop, CLIP normalization.
pub fn clip_preprocess(image: &ImageTensor, side: usize) -> Array3<f32> {
    let (h, w) = image.resolution();
    let scale = side as f64 / h.min(w) as f64;
    let (nh, nw) = (((h as f64 * scale).round() as usize).max(side), ((w as f64 * scale).round() as usize).max(side));
    let resized = image.resized((nh, nw));
    let (y0, x0) = ((nh - side) / 2, (nw - side) / 2);
    let crop = resized.data.slice(s![.., y0..y0 + side, x0..x0 + side]);
    Array3::from_shape_fn((3, side, side), |(c, y, x)| ((crop[[c, y, x]] - MEAN[c]) / STD[c]) as f32)
}

fn to_vec(t: Tensor) -> Result<Vec<f64>, EvalError> {
    t.flatten_all()
        .and_then(|t| t.to_dtype(DType::F64))
        .and_then(|t| t.to_vec1())
        .map_err(client_err)
}

impl EmbeddingClient for ClipScorer {
    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>, EvalError> {
        let pixels = clip_preprocess(image, self.image_size);
        let side = self.image_size;
        let t = Tensor::from_vec(pixels.into_raw_vec_and_offset().0, (1, 3, side, side), &self.device)
            .map_err(client_err)?;
        to_vec(self.model.get_image_features(&t).map_err(client_err)?)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let mut ids = self.tokenizer.encode(text, true).map_err(client_err)?.get_ids().to_vec();
        if ids.len() > CONTEXT {
            ids.truncate(CONTEXT);
            ids[CONTEXT - 1] = EOS;
        }
        ids.resize(CONTEXT, EOS);
        let t = Tensor::new(ids.as_slice(), &self.device)
            .and_then(|t| t.unsqueeze(0))
            .map_err(client_err)?;
        to_vec(self.model.get_text_features(&t).map_err(client_err)?)
    }
}
