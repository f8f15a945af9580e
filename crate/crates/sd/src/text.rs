//! Prompt encoders producing `(tokens, embed_dim)` contexts.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config};
use cpam_core::attention::IndexList;
use cpam_core::backend::{find_token_span, simple_words, BackendError, PromptEmbedding};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use tokenizers::Tokenizer;

use crate::model_err;

pub trait TextEncoder: Send + Sync {
    fn max_tokens(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn fingerprint(&self) -> String;
    fn encode(&self, prompt: &str, object_word: Option<&str>) -> Result<PromptEmbedding, BackendError>;
}

const BOS: u32 = 49406;
const EOS: u32 = 49407;

/// CLIP ViT-L/14 text tower with its BPE tokenizer.
pub struct ClipText {
    model: ClipTextTransformer,
    tokenizer: Tokenizer,
    max_tokens: usize,
    embed_dim: usize,
    device: Device,
    fingerprint: String,
}

impl ClipText {
    pub fn load(weights: &Path, tokenizer: &Path, device: &Device, fingerprint: String) -> Result<Self, BackendError> {
        let config = Config::v1_5();
        let vs = unsafe { VarBuilder::from_mmaped_safetensors(&[weights], DType::F32, device) }.map_err(model_err)?;
        let model = ClipTextTransformer::new(vs, &config).map_err(model_err)?;
        let tokenizer = Tokenizer::from_file(tokenizer).map_err(|e| BackendError::Model(e.to_string()))?;
        Ok(Self {
            model,
            tokenizer,
            max_tokens: 77,
            embed_dim: 768,
            device: device.clone(),
            fingerprint,
        })
    }

    fn ids(&self, text: &str) -> Result<Vec<u32>, BackendError> {
        let enc = self
            .tokenizer
            .encode(text, false)
            .map_err(|e| BackendError::Model(e.to_string()))?;
        Ok(enc.get_ids().iter().copied().filter(|&i| i != BOS && i != EOS).collect())
    }
}

impl TextEncoder for ClipText {
    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn encode(&self, prompt: &str, object_word: Option<&str>) -> Result<PromptEmbedding, BackendError> {
        let mut body = self.ids(prompt)?;
        let truncated = body.len() > self.max_tokens - 2;
        if truncated {
            log::warn!("prompt truncated to {} tokens: {prompt:?}", self.max_tokens - 2);
            body.truncate(self.max_tokens - 2);
        }
        let mut ids = Vec::with_capacity(self.max_tokens);
        ids.push(BOS);
        ids.extend(&body);
        ids.push(EOS);
        ids.resize(self.max_tokens, EOS);
        let positions = match object_word {
            Some(w) => {
                let needle = self.ids(w)?;
                let hay: Vec<String> = ids.iter().map(u32::to_string).collect();
                let needle: Vec<String> = needle.iter().map(u32::to_string).collect();
                find_token_span(&hay[..body.len() + 1], &needle)
            }
            None => Vec::new(),
        };
        let token_texts = ids[..body.len() + 2]
            .iter()
            .map(|&i| self.tokenizer.id_to_token(i).unwrap_or_default())
            .collect();
        let input = Tensor::new(ids.as_slice(), &self.device)
            .and_then(|t| t.unsqueeze(0))
            .map_err(model_err)?;
        let hidden = self
            .model
            .forward(&input)
            .and_then(|t| t.squeeze(0))
            .and_then(|t| t.to_dtype(DType::F64))
            .and_then(|t| t.to_vec2::<f64>())
            .map_err(model_err)?;
        let flat: Vec<f64> = hidden.into_iter().flatten().collect();
        let token_embeddings = Array2::from_shape_vec((self.max_tokens, self.embed_dim), flat)
            .map_err(|e| BackendError::Model(e.to_string()))?;
        Ok(PromptEmbedding {
            token_embeddings,
            token_texts,
            object_token_positions: IndexList::new(positions, self.max_tokens)?,
            truncated,
        })
    }
}

/// Word-level encoder with hash-derived embeddings. Deterministic and
/// weight-free, for exercising the UNet without a text tower.
#[derive(Debug, Clone)]
pub struct HashedText {
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl HashedText {
    fn embedding(&self, token: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.embed_dim);
        let mut counter = 0u32;
        while out.len() < self.embed_dim {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(counter.to_le_bytes());
            h.update(token.as_bytes());
            for chunk in h.finalize().chunks(2) {
                let v = u16::from_le_bytes([chunk[0], chunk[1]]) as f64 / 65535.0;
                out.push(2.0 * v - 1.0);
            }
            counter += 1;
        }
        out.truncate(self.embed_dim);
        out
    }
}

impl TextEncoder for HashedText {
    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn fingerprint(&self) -> String {
        format!("hashed-text-{}-{}-{}", self.seed, self.max_tokens, self.embed_dim)
    }

    fn encode(&self, prompt: &str, object_word: Option<&str>) -> Result<PromptEmbedding, BackendError> {
        let mut words = simple_words(prompt);
        let truncated = words.len() > self.max_tokens - 2;
        words.truncate(self.max_tokens - 2);
        let mut tokens = vec!["<bos>".to_string()];
        tokens.extend(words);
        tokens.push("<eos>".to_string());
        let mut emb = Array2::zeros((self.max_tokens, self.embed_dim));
        for i in 0..self.max_tokens {
            let t = tokens.get(i).map(String::as_str).unwrap_or("<eos>");
            for (j, v) in self.embedding(t).into_iter().enumerate() {
                emb[[i, j]] = v;
            }
        }
        let positions = object_word
            .map(|w| find_token_span(&tokens, &simple_words(w)))
            .unwrap_or_default();
        Ok(PromptEmbedding {
            token_embeddings: emb,
            token_texts: tokens,
            object_token_positions: IndexList::new(positions, self.max_tokens)?,
            truncated,
        })
    }
}
