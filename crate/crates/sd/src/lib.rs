//! Stable Diffusion 1.x backend on candle.
//!
//! Weights use the diffusers directory layout:
//! `unet/diffusion_pytorch_model.safetensors`,
//! `vae/diffusion_pytorch_model.safetensors`,
//! `text_encoder/model.safetensors` and `tokenizer/tokenizer.json`.

mod codec;
mod scorer;
mod text;
mod unet;

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use cpam_core::backend::{
    AttentionHook, BackendDescriptor, BackendError, DiffusionBackend, ForwardOutput, PromptEmbedding,
};
use cpam_core::schedule::NoiseSchedule;
use cpam_core::tensor::{ImageTensor, LatentTensor};
use ndarray::{Array3, Array4};
use sha2::{Digest, Sha256};

pub use codec::{sd_vae_config, LatentCodec, VaeCodec, SD_LATENT_SCALE};
pub use scorer::{clip_preprocess, ClipScorer};
pub use text::{ClipText, HashedText, TextEncoder};
pub use unet::{HookedUnet, UnetConfig};

pub const WEIGHTS_ENV: &str = "CPAM_SD_WEIGHTS";
pub const SD15_RESOLUTION: usize = 512;

pub(crate) fn model_err(e: candle_core::Error) -> BackendError {
    BackendError::Model(e.to_string())
}

/// Weights directory named by `CPAM_SD_WEIGHTS`, if it exists.
pub fn weights_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(WEIGHTS_ENV)
        .map(PathBuf::from)
        .filter(|p| p.join("unet").is_dir())
}

/// Cheap content fingerprint: size plus the first and last MiB.
pub fn file_fingerprint(path: &Path) -> Result<String, BackendError> {
    use std::io::{Seek, SeekFrom};
    const CHUNK: u64 = 1 << 20;
    let mut f = File::open(path)?;
    let len = f.metadata()?.len();
    let mut hasher = Sha256::new();
    hasher.update(len.to_le_bytes());
    let mut buf = vec![0u8; CHUNK.min(len) as usize];
    f.read_exact(&mut buf)?;
    hasher.update(&buf);
    f.seek(SeekFrom::Start(len - buf.len() as u64))?;
    f.read_exact(&mut buf)?;
    hasher.update(&buf);
    Ok(hex::encode(hasher.finalize())[..16].to_string())
}

pub struct SdBackend {
    unet: HookedUnet,
    text: Box<dyn TextEncoder>,
    codec: Box<dyn LatentCodec>,
    descriptor: BackendDescriptor,
    device: Device,
    fingerprint: String,
}

impl SdBackend {
    /// Loads SD-1.5 at 512x512 from a diffusers directory.
    pub fn load(dir: &Path, device: &Device) -> Result<Self, BackendError> {
        let unet_path = dir.join("unet/diffusion_pytorch_model.safetensors");
        let vae_path = dir.join("vae/diffusion_pytorch_model.safetensors");
        let clip_path = dir.join("text_encoder/model.safetensors");
        let tok_path = [dir.join("tokenizer/tokenizer.json"), dir.join("tokenizer.json")]
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| BackendError::Model(format!("no tokenizer.json under {}", dir.display())))?;
        let vs = unsafe { VarBuilder::from_mmaped_safetensors(&[&unet_path], DType::F32, device) }.map_err(model_err)?;
        let unet = HookedUnet::new(vs, UnetConfig::sd15()).map_err(model_err)?;
        let text = ClipText::load(&clip_path, &tok_path, device, file_fingerprint(&clip_path)?)?;
        let codec = VaeCodec::load(&vae_path, device, file_fingerprint(&vae_path)?)?;
        let fp = format!("sd15-{}", file_fingerprint(&unet_path)?);
        Self::from_parts(
            unet,
            Box::new(text),
            Box::new(codec),
            (SD15_RESOLUTION, SD15_RESOLUTION),
            device.clone(),
            &fp,
        )
    }

    pub fn from_parts(
        unet: HookedUnet,
        text: Box<dyn TextEncoder>,
        codec: Box<dyn LatentCodec>,
        resolution: (usize, usize),
        device: Device,
        name: &str,
    ) -> Result<Self, BackendError> {
        let f = codec.downsample_factor();
        let unit = f << (unet.config().block_channels.len() - 1);
        if resolution.0 % unit != 0 || resolution.1 % unit != 0 {
            return Err(BackendError::Model(format!(
                "resolution {resolution:?} must be a multiple of {unit}"
            )));
        }
        if text.embed_dim() != unet.config().context_dim {
            return Err(BackendError::Model(format!(
                "text width {} does not match UNet context {}",
                text.embed_dim(),
                unet.config().context_dim
            )));
        }
        let latent_hw = (resolution.0 / f, resolution.1 / f);
        let descriptor = BackendDescriptor {
            name: name.to_string(),
            latent_shape: (codec.latent_channels(), latent_hw.0, latent_hw.1),
            downsample_factor: f,
            sites: unet.config().sites(latent_hw),
            text_tokens: text.max_tokens(),
            embed_dim: text.embed_dim(),
            schedule: NoiseSchedule::stable_diffusion(),
        };
        let mut hasher = Sha256::new();
        for part in [name.to_string(), text.fingerprint(), codec.fingerprint(), format!("{resolution:?}")] {
            hasher.update(part.as_bytes());
            hasher.update([0]);
        }
        let fingerprint = format!("{name}-{}", &hex::encode(hasher.finalize())[..16]);
        Ok(Self {
            unet,
            text,
            codec,
            descriptor,
            device,
            fingerprint,
        })
    }

    fn context(&self, e: &PromptEmbedding) -> Result<Tensor, BackendError> {
        let (t, d) = e.token_embeddings.dim();
        if (t, d) != (self.descriptor.text_tokens, self.descriptor.embed_dim) {
            return Err(BackendError::Model(format!(
                "text context {:?}, expected {:?}",
                (t, d),
                (self.descriptor.text_tokens, self.descriptor.embed_dim)
            )));
        }
        let flat: Vec<f32> = e.token_embeddings.iter().map(|&v| v as f32).collect();
        Tensor::from_vec(flat, (1, t, d), &self.device).map_err(model_err)
    }

    fn to_device(&self, data: &Array4<f64>) -> Result<Tensor, BackendError> {
        let flat: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        Tensor::from_vec(flat, data.dim(), &self.device).map_err(model_err)
    }

    fn from_device(t: &Tensor) -> Result<Array4<f64>, BackendError> {
        let dims = t.dims4().map_err(model_err)?;
        let flat: Vec<f64> = t
            .to_dtype(DType::F64)
            .and_then(|t| t.flatten_all())
            .and_then(|t| t.to_vec1())
            .map_err(model_err)?;
        Array4::from_shape_vec(dims, flat).map_err(|e| BackendError::Model(e.to_string()))
    }
}

impl DiffusionBackend for SdBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn encode_text(&self, prompt: &str, object_word: Option<&str>) -> Result<PromptEmbedding, BackendError> {
        self.text.encode(prompt, object_word)
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
        let context = self.context(cond)?;
        let aux = aux_contexts
            .iter()
            .map(|a| self.context(a))
            .collect::<Result<Vec<_>, _>>()?;
        let mut pass = unet::Pass {
            hooks,
            aux: &aux,
            sites: &self.descriptor.sites,
            next_site: 0,
            visited: Vec::with_capacity(self.descriptor.sites.len()),
        };
        let eps = self
            .unet
            .forward(&self.to_device(&z.data)?, timestep as f64, &context, &mut pass)?;
        let eps = LatentTensor::new(Self::from_device(&eps)?, timestep);
        if !eps.is_finite() {
            return Err(BackendError::NonFinite(format!("noise prediction at t={timestep}")));
        }
        Ok(ForwardOutput {
            eps,
            visited: pass.visited,
        })
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<LatentTensor, BackendError> {
        let expected = self.descriptor.image_resolution();
        if image.resolution() != expected || image.data.dim().0 != 3 {
            return Err(BackendError::ImageSize {
                expected,
                got: image.resolution(),
            });
        }
        let (h, w) = expected;
        let flat: Vec<f32> = image.data.iter().map(|&v| (2.0 * v - 1.0) as f32).collect();
        let x = Tensor::from_vec(flat, (1, 3, h, w), &self.device).map_err(model_err)?;
        let z = Self::from_device(&self.codec.encode(&x)?)?;
        Ok(LatentTensor::new(z, 0))
    }

    fn decode_latent(&self, z: &LatentTensor) -> Result<ImageTensor, BackendError> {
        self.descriptor.check_latent(z)?;
        let x = self.codec.decode(&self.to_device(&z.data)?)?;
        let x = Self::from_device(&x)?;
        let (_, c, h, w) = x.dim();
        let data = Array3::from_shape_fn((c, h, w), |(c, y, x_)| ((x[[0, c, y, x_]] + 1.0) / 2.0).clamp(0.0, 1.0));
        Ok(ImageTensor::new(data))
    }
}
