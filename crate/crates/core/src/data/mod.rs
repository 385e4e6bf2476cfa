//! Images, labeled samples and the data sources that produce them.

mod augment;
mod distort;
mod manifest;
mod synth;

pub use augment::{augment, augment_with, AugmentOptions};
pub use distort::{
    apply_distortion, degrade, distort, noise_field, noise_std, DistortionKind, DistortionSpec,
};
pub use manifest::{load_manifest, read_manifest, write_manifest, LabelRange, ManifestEntry};
pub use synth::{
    aesthetic_labels, clean_image, generate_synthetic_sample, random_specs, synthetic_dataset,
    SyntheticConfig,
};

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::registry::DimensionRegistry;
use crate::{Error, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 32;

/// RGB image, channel-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image is {height}x{width}; both sides must be at least {MIN_SIDE}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::InvalidInput(format!(
                "expected {} values for a 3x{height}x{width} image, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    /// Clamps every value into [0, 1] (NaN becomes 0) before validating.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Rec. 601 luma per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
            .collect()
    }

    /// (3, H, W) tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (3, self.height, self.width), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }

    /// From a (3, H, W) tensor; values are clamped into [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_clamped(h, w, data)
    }

    /// Stacks images of equal size into a (B, 3, H, W) tensor.
    pub fn batch(images: &[ImageTensor], dtype: DType) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::InvalidInput(format!(
                    "batch mixes {h}x{w} and {}x{} images",
                    img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Decodes any 8- or 16-bit raster the `image` crate understands.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let mut data = vec![0f32; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c];
            }
        }
        Self::from_clamped(h, w, data)
    }

    /// Writes an 8-bit PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| (self.get(c, y, x) * 255.0).round() as u8);
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path)?;
        Ok(())
    }
}

/// Per-dimension labels aligned with a registry. `None` marks a missing
/// annotation; losses skip it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimLabels {
    pub values: Vec<Option<f64>>,
}

impl DimLabels {
    pub fn missing(len: usize) -> Self {
        DimLabels {
            values: vec![None; len],
        }
    }

    pub fn get(&self, registry: &DimensionRegistry, name: &str) -> Option<f64> {
        registry.index_of(name).and_then(|i| self.values[i])
    }

    pub fn mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_some).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDimSample {
    pub image: ImageTensor,
    pub labels: DimLabels,
    pub overall: f64,
    pub source: Source,
}

/// SplitMix64 finalizer over `seed ⊕ stream`, for deriving independent
/// sub-seeds from one user seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_invariants() {
        assert!(ImageTensor::filled(32, 32, [0.5; 3]).is_ok());
        assert!(ImageTensor::filled(31, 32, [0.5; 3]).is_err());
        assert!(ImageTensor::new(32, 32, vec![1.5; 3 * 32 * 32]).is_err());
        assert!(ImageTensor::new(32, 32, vec![f32::NAN; 3 * 32 * 32]).is_err());
        assert!(ImageTensor::new(32, 32, vec![0.0; 10]).is_err());
        let c = ImageTensor::from_clamped(32, 32, vec![2.0; 3 * 32 * 32]).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tensor_round_trip() {
        let img = clean_image(40, 36, 3);
        let back = ImageTensor::from_tensor(&img.to_tensor(DType::F32).unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = clean_image(33, 40, 9);
        let p = dir.path().join("x.png");
        img.save(&p).unwrap();
        let back = ImageTensor::load(&p).unwrap();
        assert_eq!((back.height(), back.width()), (33, 40));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn sixteen_bit_png_decodes_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(32, 32);
        for px in buf.pixels_mut() {
            *px = image::Rgb([65535, 32768, 0]);
        }
        buf.save(&p).unwrap();
        let img = ImageTensor::load(&p).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert!((img.get(1, 5, 5) - 0.5).abs() < 1e-4);
        assert_eq!(img.get(2, 31, 31), 0.0);
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
