//! Latent and image containers shared by the backend, inversion and pipeline.

use std::path::Path;

use image::{imageops::FilterType, RgbImage};
use ndarray::{Array3, Array4};
use sha2::{Digest, Sha256};

/// `(batch, channels, height, width)` latent tagged with the noise-schedule
/// timestep it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Array4<f64>,
    pub timestep_tag: usize,
}

impl LatentTensor {
    pub fn new(data: Array4<f64>, timestep_tag: usize) -> Self {
        Self { data, timestep_tag }
    }

    pub fn zeros(shape: (usize, usize, usize), timestep_tag: usize) -> Self {
        Self {
            data: Array4::zeros((1, shape.0, shape.1, shape.2)),
            timestep_tag,
        }
    }

    /// `(channels, height, width)` of the first batch item.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.data.dim();
        (c, h, w)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `||self - other|| / ||other||`
    pub fn relative_l2(&self, other: &LatentTensor) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.l2_norm().max(f64::MIN_POSITIVE)
    }

    pub fn with_tag(mut self, tag: usize) -> Self {
        self.timestep_tag = tag;
        self
    }

    /// SHA-256 over the little-endian bytes of every element.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.data.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// RGB image as `(3, height, width)` floats, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    /// `(height, width)`
    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self { data }
    }

    /// Quantizes to 8-bit with clamping.
    pub fn to_rgb(&self) -> RgbImage {
        let (h, w) = self.resolution();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> image::ImageResult<Self> {
        Ok(Self::from_rgb(&image::open(path)?.to_rgb8()))
    }

    pub fn from_bytes(bytes: &[u8]) -> image::ImageResult<Self> {
        Ok(Self::from_rgb(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.to_rgb().save_with_format(path, image::ImageFormat::Png)
    }

    pub fn to_png_bytes(&self) -> image::ImageResult<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Resampled copy (Catmull-Rom on the 8-bit view).
    pub fn resized(&self, resolution: (usize, usize)) -> Self {
        if resolution == self.resolution() {
            return self.clone();
        }
        let out = image::imageops::resize(
            &self.to_rgb(),
            resolution.1 as u32,
            resolution.0 as u32,
            FilterType::CatmullRom,
        );
        Self::from_rgb(&out)
    }

    /// PSNR in dB against a reference with peak value 1.
    pub fn psnr(&self, reference: &ImageTensor) -> f64 {
        let n = self.data.len() as f64;
        let mse = self
            .data
            .iter()
            .zip(reference.data.iter())
            .map(|(a, b)| (a.clamp(0.0, 1.0) - b.clamp(0.0, 1.0)).powi(2))
            .sum::<f64>()
            / n;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }
}
