//! Image and latent conversion.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::vae::{AutoEncoderKL, AutoEncoderKLConfig};
use cpam_core::backend::BackendError;

use crate::model_err;

pub const SD_LATENT_SCALE: f64 = 0.18215;

pub trait LatentCodec: Send + Sync {
    fn latent_channels(&self) -> usize;
    fn downsample_factor(&self) -> usize;
    fn fingerprint(&self) -> String;
    /// `(1, 3, H, W)` in `[-1, 1]` to a scaled latent.
    fn encode(&self, image: &Tensor) -> Result<Tensor, BackendError>;
    /// Inverse of [`LatentCodec::encode`], output in `[-1, 1]`.
    fn decode(&self, latent: &Tensor) -> Result<Tensor, BackendError>;
}

pub fn sd_vae_config() -> AutoEncoderKLConfig {
    AutoEncoderKLConfig {
        block_out_channels: vec![128, 256, 512, 512],
        layers_per_block: 2,
        latent_channels: 4,
        norm_num_groups: 32,
        use_quant_conv: true,
        use_post_quant_conv: true,
    }
}

/// KL autoencoder returning the posterior mean.
pub struct VaeCodec {
    vae: AutoEncoderKL,
    scale: f64,
    factor: usize,
    fingerprint: String,
}

impl VaeCodec {
    pub fn load(path: &Path, device: &Device, fingerprint: String) -> Result<Self, BackendError> {
        let tensors = candle_core::safetensors::load(path, device).map_err(model_err)?;
        Self::from_tensors(tensors, sd_vae_config(), SD_LATENT_SCALE, device, fingerprint)
    }

    /// The posterior's log-variance rows of `quant_conv` are replaced by a
    /// constant -1e4, so `sample()` returns the mean exactly.
    pub fn from_tensors(
        mut tensors: HashMap<String, Tensor>,
        config: AutoEncoderKLConfig,
        scale: f64,
        device: &Device,
        fingerprint: String,
    ) -> Result<Self, BackendError> {
        if !config.use_quant_conv {
            return Err(BackendError::Model("VAE without quant_conv is not supported".into()));
        }
        let c = config.latent_channels;
        let w = tensors
            .get("quant_conv.weight")
            .ok_or_else(|| BackendError::Model("missing quant_conv.weight".into()))?
            .to_dtype(DType::F32)
            .map_err(model_err)?;
        let b = tensors
            .get("quant_conv.bias")
            .ok_or_else(|| BackendError::Model("missing quant_conv.bias".into()))?
            .to_dtype(DType::F32)
            .map_err(model_err)?;
        let w = Tensor::cat(&[w.narrow(0, 0, c).map_err(model_err)?, w.narrow(0, c, c).and_then(|t| t.zeros_like()).map_err(model_err)?], 0)
            .map_err(model_err)?;
        let b = Tensor::cat(
            &[b.narrow(0, 0, c).map_err(model_err)?, Tensor::full(-1e4f32, c, device).map_err(model_err)?],
            0,
        )
        .map_err(model_err)?;
        tensors.insert("quant_conv.weight".into(), w);
        tensors.insert("quant_conv.bias".into(), b);
        let factor = 1 << (config.block_out_channels.len() - 1);
        let vs = VarBuilder::from_tensors(tensors, DType::F32, device);
        let vae = AutoEncoderKL::new(vs, 3, 3, config).map_err(model_err)?;
        Ok(Self {
            vae,
            scale,
            factor,
            fingerprint,
        })
    }
}

impl LatentCodec for VaeCodec {
    fn latent_channels(&self) -> usize {
        self.vae.config.latent_channels
    }

    fn downsample_factor(&self) -> usize {
        self.factor
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor, BackendError> {
        self.vae
            .encode(image)
            .and_then(|d| d.sample())
            .and_then(|z| z * self.scale)
            .map_err(model_err)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor, BackendError> {
        (latent / self.scale)
            .and_then(|z| self.vae.decode(&z))
            .map_err(model_err)
    }
}
