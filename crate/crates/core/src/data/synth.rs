//! Synthetic scenes with analytically known per-dimension labels.
//!
//! Technical labels are `1 − severity` of the matching distortion (1 when
//! the distortion is absent). Aesthetic labels are fixed statistics of the
//! clean scene:
//!
//! - composition: `1 − d / √0.5`, where `d` is the distance from the image
//!   centre to the centroid of luminance edge energy (unit coordinates)
//! - light: `1 − 2·|mean luminance − 0.5|`
//! - color: `√(mean per-pixel channel variance / (2/9))`; 2/9 is the largest
//!   variance three values in [0, 1] can have
//! - content: entropy of a 16-bin luminance histogram divided by `ln 16`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, distort, DimLabels, DistortionKind, DistortionSpec, ImageTensor, Source};
use super::MultiDimSample;
use crate::registry::DimensionRegistry;
use crate::{Error, Result};

const HIST_BINS: usize = 16;

/// Procedural scene: a colour gradient, eight solid shapes clustered around
/// a random focus point, and a sinusoidal texture patch of fixed amplitude.
/// The result is renormalized so that every channel has the same mean (a
/// luminance in [0.45, 0.55]) and the luminance spread is exactly 0.2
/// before clamping; this keeps the distortions identifiable from the
/// distorted image alone.
pub fn clean_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let n = height * width;
    let mut px = vec![[0f64; 3]; n];

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random());
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random());
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / wf - 0.5;
            let v = (y as f64 + 0.5) / hf - 0.5;
            let t = (u * theta.cos() + v * theta.sin() + 0.5).clamp(0.0, 1.0);
            px[y * width + x] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t);
        }
    }

    let focus = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
    let spread: f64 = rng.random_range(0.08..0.3);
    let shapes = 8;
    for _ in 0..shapes {
        let cx = (focus[0] + spread * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0) * wf;
        let cy = (focus[1] + spread * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0) * hf;
        let rx = rng.random_range(0.04..0.22) * wf;
        let ry = rng.random_range(0.04..0.22) * hf;
        let ellipse = rng.random_bool(0.5);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random());
        for y in 0..height {
            for x in 0..width {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    px[y * width + x] = color;
                }
            }
        }
    }

    let freq: f64 = rng.random_range(0.2..0.3);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp: f64 = 0.2;
    let (x0, x1) = {
        let a = rng.random_range(0.0..0.6) * wf;
        (a, a + rng.random_range(0.25..0.4) * wf)
    };
    let (y0, y1) = {
        let a = rng.random_range(0.0..0.6) * hf;
        (a, a + rng.random_range(0.25..0.4) * hf)
    };
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            if xf >= x0 && xf < x1 && yf >= y0 && yf < y1 {
                let s = amp * (std::f64::consts::TAU * freq * (xf * phi.cos() + yf * phi.sin())).sin();
                for c in &mut px[y * width + x] {
                    *c += s;
                }
            }
        }
    }

    let saturation: f64 = rng.random_range(0.3..0.7);
    for p in &mut px {
        let g = (p[0] + p[1] + p[2]) / 3.0;
        for c in p.iter_mut() {
            *c = g + saturation * (*c - g);
        }
    }

    let target_mean: f64 = rng.random_range(0.45..0.55);
    let target_std: f64 = 0.2;
    let means: [f64; 3] = std::array::from_fn(|c| px.iter().map(|p| p[c]).sum::<f64>() / n as f64);
    let lum: Vec<f64> = px
        .iter()
        .map(|p| 0.299 * (p[0] - means[0]) + 0.587 * (p[1] - means[1]) + 0.114 * (p[2] - means[2]))
        .collect();
    let lum_std = (lum.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let gain = if lum_std > 1e-6 { target_std / lum_std } else { 1.0 };

    let mut data = vec![0f32; 3 * n];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = (target_mean + (p[c] - means[c]) * gain).clamp(0.0, 1.0) as f32;
        }
    }
    ImageTensor::from_clamped(height, width, data).expect("generator emits valid images")
}

/// `[composition, light, color, content]` statistics of an image.
pub fn aesthetic_labels(img: &ImageTensor) -> [f64; 4] {
    let (h, w) = (img.height(), img.width());
    let y = img.luminance();

    let (mut total, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v = y[r * w + c];
            let gx = if c + 1 < w { y[r * w + c + 1] - v } else { 0.0 };
            let gy = if r + 1 < h { y[(r + 1) * w + c] - v } else { 0.0 };
            let e = gx * gx + gy * gy;
            total += e;
            sx += e * (c as f64 + 0.5) / w as f64;
            sy += e * (r as f64 + 0.5) / h as f64;
        }
    }
    let composition = if total > 0.0 {
        let d = ((sx / total - 0.5).powi(2) + (sy / total - 0.5).powi(2)).sqrt();
        (1.0 - d / 0.5f64.sqrt()).clamp(0.0, 1.0)
    } else {
        1.0
    };

    let mean_lum = y.iter().sum::<f64>() / y.len() as f64;
    let light = (1.0 - 2.0 * (mean_lum - 0.5).abs()).clamp(0.0, 1.0);

    let n = h * w;
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let mut var_sum = 0.0;
    for i in 0..n {
        let v = [r[i] as f64, g[i] as f64, b[i] as f64];
        let m = (v[0] + v[1] + v[2]) / 3.0;
        var_sum += v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0;
    }
    let color = (var_sum / n as f64 / (2.0 / 9.0)).sqrt().clamp(0.0, 1.0);

    let mut hist = [0usize; HIST_BINS];
    for &v in &y {
        hist[((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1;
    }
    let entropy: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum();
    let content = (entropy / (HIST_BINS as f64).ln()).clamp(0.0, 1.0);

    [composition, light, color, content]
}

/// Distorts `clean` and attaches the analytic labels.
pub fn generate_synthetic_sample(
    clean: &ImageTensor,
    specs: &[DistortionSpec],
    seed: u64,
    registry: &DimensionRegistry,
) -> Result<MultiDimSample> {
    registry.validate()?;
    let image = distort(clean, specs, seed)?;
    let mut values = vec![None; registry.len()];
    for kind in DistortionKind::ALL {
        let idx = registry
            .index_of(kind.dimension())
            .ok_or_else(|| Error::UnknownDimension(kind.dimension().into()))?;
        let severity = specs
            .iter()
            .find(|s| s.kind == kind)
            .map_or(0.0, |s| s.severity);
        values[idx] = Some(1.0 - severity);
    }
    let aesthetic = aesthetic_labels(clean);
    for (name, v) in registry.aesthetic.iter().zip(aesthetic) {
        let idx = registry.index_of(name).expect("registry name");
        values[idx] = Some(v);
    }
    let overall = values.iter().map(|v| v.expect("all set")).sum::<f64>() / values.len() as f64;
    Ok(MultiDimSample {
        image,
        labels: DimLabels { values },
        overall,
        source: Source::Synthetic,
    })
}

/// Each family independently present with probability `presence`, severity
/// uniform in [0, max_severity].
pub fn random_specs(rng: &mut impl Rng, presence: f64, max_severity: f64) -> Vec<DistortionSpec> {
    DistortionKind::ALL
        .into_iter()
        .filter_map(|kind| {
            let present = rng.random_bool(presence);
            let severity: f64 = rng.random_range(0.0..=max_severity);
            present.then_some(DistortionSpec::new(kind, severity))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub size: usize,
    pub presence: f64,
    pub max_severity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            samples: 1000,
            size: 96,
            presence: 0.7,
            max_severity: 1.0,
            seed: 7,
        }
    }
}

/// Sample `i` depends only on `(cfg.seed, i)`.
pub fn synthetic_dataset(cfg: &SyntheticConfig, registry: &DimensionRegistry) -> Result<Vec<MultiDimSample>> {
    if !(0.0..=1.0).contains(&cfg.presence) {
        return Err(Error::Config(format!("presence {} outside [0, 1]", cfg.presence)));
    }
    if !(0.0..=1.0).contains(&cfg.max_severity) {
        return Err(Error::Config(format!("max_severity {} outside [0, 1]", cfg.max_severity)));
    }
    (0..cfg.samples)
        .map(|i| {
            let s = derive_seed(cfg.seed, i as u64);
            let clean = clean_image(cfg.size, cfg.size, derive_seed(s, 1));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, 2));
            let specs = random_specs(&mut rng, cfg.presence, cfg.max_severity);
            generate_synthetic_sample(&clean, &specs, derive_seed(s, 3), registry)
        })
        .collect()
}
