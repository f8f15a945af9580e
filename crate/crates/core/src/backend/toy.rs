use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    dispatch_hook, find_token_span, simple_words, AttentionCall, AttentionHook, BackendDescriptor, BackendError,
    DiffusionBackend, ForwardOutput, HeadProjections, PromptEmbedding, SiteSpec,
};
use crate::attention::{FeatureMatrix, IndexList};
use crate::control::AttentionKind;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, LatentTensor};

const CHANNELS: usize = 12;
const LATENT: usize = 8;
const FACTOR: usize = 2;
const HIDDEN: usize = 16;
const HEADS: usize = 2;
const EMBED: usize = 8;
const TEXT_TOKENS: usize = 8;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    /// Multiplier on the network output.
    pub out_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { seed: 0, out_scale: 0.1 }
    }
}

/// Weights of one residual block; matrices act on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    pub self_q: Array2<f64>,
    pub self_k: Array2<f64>,
    pub self_v: Array2<f64>,
    pub self_o: Array2<f64>,
    pub cross_q: Array2<f64>,
    pub cross_k: Array2<f64>,
    pub cross_v: Array2<f64>,
    pub cross_o: Array2<f64>,
    pub ff: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    /// `(12 x 12)` orthogonal patch map.
    pub vae: Array2<f64>,
    pub w_in: Array2<f64>,
    pub w_time: Array2<f64>,
    pub blocks: [ToyBlock; 2],
    pub w_out: Array2<f64>,
    pub out_scale: f64,
}

/// Small deterministic latent denoiser: 16x16 RGB images, `(12, 8, 8)`
/// latents, two residual blocks (8x8 and 4x4 token grids) each with one
/// self- and one cross-attention site.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: ToyConfig,
    params: ToyParams,
    descriptor: BackendDescriptor,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut m = gaussian(rng, n, n);
    for i in 0..n {
        for j in 0..i {
            let dot = m.row(i).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-dot, &prev);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

/// `[sin(t f_1), cos(t f_1), ...]` with `f_k = k pi / 2000`, slow enough
/// that neighbouring sampler timesteps see similar features.
pub fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let f = std::f64::consts::PI / 2000.0 * (i + 1) as f64;
        out[2 * i] = (t as f64 * f).sin();
        out[2 * i + 1] = (t as f64 * f).cos();
    }
    out
}

/// Output gain `cos(pi t / 2T)`: full strength at the clean end, vanishing
/// at the noisy end.
pub fn time_scale(t: usize, train_timesteps: usize) -> f64 {
    (std::f64::consts::FRAC_PI_2 * t as f64 / train_timesteps as f64).cos()
}

fn split_heads(m: &Array2<f64>) -> Result<Vec<FeatureMatrix>, BackendError> {
    let hd = m.ncols() / HEADS;
    (0..HEADS)
        .map(|h| Ok(FeatureMatrix::new(m.slice(s![.., h * hd..(h + 1) * hd]).to_owned())?))
        .collect()
}

fn concat_heads(heads: &[FeatureMatrix]) -> Array2<f64> {
    let views: Vec<_> = heads.iter().map(|h| h.data().view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("heads share token count")
}

fn pool2(h: &Array2<f64>, side: usize) -> Array2<f64> {
    let half = side / 2;
    Array2::from_shape_fn((half * half, h.ncols()), |(i, c)| {
        let (y, x) = (i / half, i % half);
        let mut acc = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                acc += h[[(2 * y + dy) * side + 2 * x + dx, c]];
            }
        }
        acc / 4.0
    })
}

fn upsample2(h: &Array2<f64>, half: usize) -> Array2<f64> {
    let side = half * 2;
    Array2::from_shape_fn((side * side, h.ncols()), |(i, c)| {
        let (y, x) = (i / side, i % side);
        h[[(y / 2) * half + x / 2, c]]
    })
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vae = orthogonal(&mut rng, CHANNELS);
        let w_in = gaussian(&mut rng, CHANNELS, HIDDEN);
        let w_time = gaussian(&mut rng, HIDDEN, HIDDEN);
        let mut block = || ToyBlock {
            self_q: gaussian(&mut rng, HIDDEN, HIDDEN),
            self_k: gaussian(&mut rng, HIDDEN, HIDDEN),
            self_v: gaussian(&mut rng, HIDDEN, HIDDEN),
            self_o: gaussian(&mut rng, HIDDEN, HIDDEN),
            cross_q: gaussian(&mut rng, HIDDEN, HIDDEN),
            cross_k: gaussian(&mut rng, EMBED, HIDDEN),
            cross_v: gaussian(&mut rng, EMBED, HIDDEN),
            cross_o: gaussian(&mut rng, HIDDEN, HIDDEN),
            ff: gaussian(&mut rng, HIDDEN, HIDDEN),
        };
        let blocks = [block(), block()];
        let w_out = gaussian(&mut rng, HIDDEN, CHANNELS);
        let params = ToyParams {
            vae,
            w_in,
            w_time,
            blocks,
            w_out,
            out_scale: config.out_scale,
        };
        let site = |kind, layer_index, side| SiteSpec {
            kind,
            layer_index,
            token_grid: (side, side),
            heads: HEADS,
            head_dim: HIDDEN / HEADS,
        };
        let descriptor = BackendDescriptor {
            name: "toy".into(),
            latent_shape: (CHANNELS, LATENT, LATENT),
            downsample_factor: FACTOR,
            sites: vec![
                site(AttentionKind::SelfAttention, 0, LATENT),
                site(AttentionKind::CrossAttention, 0, LATENT),
                site(AttentionKind::SelfAttention, 1, LATENT / 2),
                site(AttentionKind::CrossAttention, 1, LATENT / 2),
            ],
            text_tokens: TEXT_TOKENS,
            embed_dim: EMBED,
            schedule: NoiseSchedule::stable_diffusion(),
        };
        Self {
            config,
            params,
            descriptor,
        }
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    /// `[<bos>, words.., <eos>, <pad>..]` padded to the context length, and
    /// whether words were dropped.
    pub fn tokenize(&self, prompt: &str) -> (Vec<String>, bool) {
        let mut words = simple_words(prompt);
        let truncated = words.len() > TEXT_TOKENS - 2;
        words.truncate(TEXT_TOKENS - 2);
        let mut tokens = vec![BOS.to_string()];
        tokens.extend(words);
        tokens.push(EOS.to_string());
        tokens.resize(TEXT_TOKENS, PAD.to_string());
        (tokens, truncated)
    }

    /// Each coordinate is a 16-bit slice of `sha256(seed_le || token)`
    /// mapped to `[-1, 1]`.
    pub fn token_embedding(&self, token: &str) -> Array1<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        Array1::from_shape_fn(EMBED, |j| {
            let v = u16::from_le_bytes([digest[2 * j], digest[2 * j + 1]]);
            v as f64 / 65_535.0 * 2.0 - 1.0
        })
    }

    fn attend(
        &self,
        site: SiteSpec,
        x: &Array2<f64>,
        context: &Array2<f64>,
        w: [&Array2<f64>; 4],
        aux: &[&PromptEmbedding],
        hooks: &mut dyn AttentionHook,
    ) -> Result<Array2<f64>, BackendError> {
        let [wq, wk, wv, wo] = w;
        let q = split_heads(&x.dot(wq))?;
        let k = split_heads(&context.dot(wk))?;
        let v = split_heads(&context.dot(wv))?;
        let heads: Vec<HeadProjections> = q
            .into_iter()
            .zip(k)
            .zip(v)
            .map(|((q, k), v)| HeadProjections { q, k, v })
            .collect();
        let aux_kv = aux
            .iter()
            .map(|e| {
                let k = split_heads(&e.token_embeddings.dot(wk))?;
                let v = split_heads(&e.token_embeddings.dot(wv))?;
                Ok(k.into_iter().zip(v).collect())
            })
            .collect::<Result<Vec<Vec<_>>, BackendError>>()?;
        let call = AttentionCall {
            site,
            heads: &heads,
            aux: &aux_kv,
        };
        let out = dispatch_hook(hooks, &call)?;
        Ok(concat_heads(&out).dot(wo))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        index: usize,
        h: Array2<f64>,
        cond: &PromptEmbedding,
        aux: &[&PromptEmbedding],
        hooks: &mut dyn AttentionHook,
        visited: &mut Vec<SiteSpec>,
    ) -> Result<Array2<f64>, BackendError> {
        let b = &self.params.blocks[index];
        let self_site = self.descriptor.sites[2 * index];
        let cross_site = self.descriptor.sites[2 * index + 1];
        visited.push(self_site);
        let a = &h + &self.attend(self_site, &h, &h, [&b.self_q, &b.self_k, &b.self_v, &b.self_o], &[], hooks)?;
        visited.push(cross_site);
        let c = &a + &self.attend(
            cross_site,
            &a,
            &cond.token_embeddings,
            [&b.cross_q, &b.cross_k, &b.cross_v, &b.cross_o],
            aux,
            hooks,
        )?;
        Ok(&c + &c.dot(&b.ff).mapv(f64::tanh))
    }

    fn check_embedding(&self, e: &PromptEmbedding) -> Result<(), BackendError> {
        if e.token_embeddings.ncols() != EMBED || e.n_tokens() == 0 {
            return Err(BackendError::Model(format!(
                "prompt embedding has shape {:?}, expected (*, {EMBED})",
                e.token_embeddings.dim()
            )));
        }
        Ok(())
    }
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new(ToyConfig::default())
    }
}

/// `(1, C, H, W)` latent to `(H*W, C)` token rows.
pub(crate) fn latent_tokens(z: &Array4<f64>) -> Array2<f64> {
    let (_, c, h, w) = z.dim();
    Array2::from_shape_fn((h * w, c), |(i, ch)| z[[0, ch, i / w, i % w]])
}

pub(crate) fn tokens_to_latent(t: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn((1, t.ncols(), h, w), |(_, ch, y, x)| t[[y * w + x, ch]])
}

impl DiffusionBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"toy-v1");
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(self.config.out_scale.to_le_bytes());
        format!("toy-{}", &hex::encode(hasher.finalize())[..16])
    }

    fn encode_text(&self, prompt: &str, object_word: Option<&str>) -> Result<PromptEmbedding, BackendError> {
        let (tokens, truncated) = self.tokenize(prompt);
        if truncated {
            log::warn!("prompt truncated to {} words: {prompt:?}", TEXT_TOKENS - 2);
        }
        let mut emb = Array2::zeros((TEXT_TOKENS, EMBED));
        for (i, t) in tokens.iter().enumerate() {
            emb.row_mut(i).assign(&self.token_embedding(t));
        }
        let positions = object_word
            .map(|w| find_token_span(&tokens, &simple_words(w)))
            .unwrap_or_default();
        let object_token_positions = IndexList::new(positions, TEXT_TOKENS)?;
        Ok(PromptEmbedding {
            token_embeddings: emb,
            token_texts: tokens,
            object_token_positions,
            truncated,
        })
    }

    fn predict_noise(
        &self,
        z: &LatentTensor,
        timestep: usize,
        cond: &PromptEmbedding,
        aux_contexts: &[&PromptEmbedding],
        hooks: &mut dyn AttentionHook,
    ) -> Result<ForwardOutput, BackendError> {
        self.descriptor.check_latent(z)?;
        self.check_embedding(cond)?;
        for a in aux_contexts {
            self.check_embedding(a)?;
        }
        let p = &self.params;
        let temb = timestep_features(timestep, HIDDEN).dot(&p.w_time);
        let h = latent_tokens(&z.data).dot(&p.w_in) + &temb;
        let mut visited = Vec::with_capacity(self.descriptor.sites.len());
        let h = self.block(0, h, cond, aux_contexts, hooks, &mut visited)?;
        let pooled = pool2(&h, LATENT);
        let deep = self.block(1, pooled.clone(), cond, aux_contexts, hooks, &mut visited)?;
        let h = &h + &upsample2(&(&deep - &pooled), LATENT / 2);
        let eps = h.dot(&p.w_out) * (p.out_scale * time_scale(timestep, self.descriptor.schedule.train_timesteps()));
        let eps = LatentTensor::new(tokens_to_latent(&eps, LATENT, LATENT), timestep);
        if !eps.is_finite() {
            return Err(BackendError::NonFinite(format!("noise prediction at t={timestep}")));
        }
        Ok(ForwardOutput { eps, visited })
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<LatentTensor, BackendError> {
        let expected = self.descriptor.image_resolution();
        if image.resolution() != expected || image.data.dim().0 != 3 {
            return Err(BackendError::ImageSize {
                expected,
                got: image.resolution(),
            });
        }
        let patches = Array2::from_shape_fn((LATENT * LATENT, CHANNELS), |(i, j)| {
            let (y, x) = (i / LATENT, i % LATENT);
            let (c, dy, dx) = (j / 4, (j / 2) % 2, j % 2);
            2.0 * image.data[[c, FACTOR * y + dy, FACTOR * x + dx]] - 1.0
        });
        let z = patches.dot(&self.params.vae);
        Ok(LatentTensor::new(tokens_to_latent(&z, LATENT, LATENT), 0))
    }

    fn decode_latent(&self, z: &LatentTensor) -> Result<ImageTensor, BackendError> {
        self.descriptor.check_latent(z)?;
        let patches = latent_tokens(&z.data).dot(&self.params.vae.t());
        let side = LATENT * FACTOR;
        let data = ndarray::Array3::from_shape_fn((3, side, side), |(c, py, px)| {
            let i = (py / FACTOR) * LATENT + px / FACTOR;
            let j = c * 4 + (py % FACTOR) * 2 + px % FACTOR;
            (patches[[i, j]] + 1.0) / 2.0
        });
        Ok(ImageTensor::new(data))
    }
}
