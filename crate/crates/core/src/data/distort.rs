//! Distortion families with severity in [0, 1]. Severity 0 is the identity
//! for every family, and each family degrades exactly one technical
//! dimension.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, ImageTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionKind {
    Blur,
    Noise,
    Contrast,
    Brightness,
    #[serde(rename = "colorshift")]
    ColorShift,
}

impl DistortionKind {
    /// Canonical application order.
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::Blur,
        DistortionKind::Noise,
        DistortionKind::Contrast,
        DistortionKind::Brightness,
        DistortionKind::ColorShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::Blur => "blur",
            DistortionKind::Noise => "noise",
            DistortionKind::Contrast => "contrast",
            DistortionKind::Brightness => "brightness",
            DistortionKind::ColorShift => "colorshift",
        }
    }

    /// The technical dimension this family degrades.
    pub fn dimension(self) -> &'static str {
        match self {
            DistortionKind::Blur => "sharpness",
            DistortionKind::Noise => "noisiness",
            DistortionKind::Contrast => "contrast",
            DistortionKind::Brightness => "brightness",
            DistortionKind::ColorShift => "colorfulness",
        }
    }

    fn stream(self) -> u64 {
        0xD15_0000 + self as u64
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown distortion kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub severity: f64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, severity: f64) -> Self {
        DistortionSpec { kind, severity }
    }
}

/// Standard deviation of the additive noise at a given severity.
pub fn noise_std(severity: f64) -> f64 {
    0.25 * severity
}

/// Unit-variance Gaussian field, one value per element of a 3×H×W image.
pub fn noise_field(seed: u64, height: usize, width: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3 * height * width)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

fn validate(specs: &[DistortionSpec]) -> Result<()> {
    for (i, s) in specs.iter().enumerate() {
        if specs[..i].iter().any(|t| t.kind == s.kind) {
            return Err(Error::DuplicateDistortion(s.kind.name()));
        }
        if !(0.0..=1.0).contains(&s.severity) {
            return Err(Error::InvalidInput(format!(
                "{} severity {} outside [0, 1]",
                s.kind.name(),
                s.severity
            )));
        }
    }
    Ok(())
}

/// Applies `specs` in canonical order. Each family draws its randomness from
/// its own stream of `seed`, so adding or removing one family leaves the
/// others' random draws unchanged.
pub fn distort(clean: &ImageTensor, specs: &[DistortionSpec], seed: u64) -> Result<ImageTensor> {
    validate(specs)?;
    let mut img = clean.clone();
    for kind in DistortionKind::ALL {
        if let Some(s) = specs.iter().find(|s| s.kind == kind) {
            img = apply_distortion(&img, *s, seed)?;
        }
    }
    Ok(img)
}

/// Restoration-side name for [`distort`].
pub fn degrade(clean: &ImageTensor, specs: &[DistortionSpec], seed: u64) -> Result<ImageTensor> {
    distort(clean, specs, seed)
}

pub fn apply_distortion(img: &ImageTensor, spec: DistortionSpec, seed: u64) -> Result<ImageTensor> {
    validate(std::slice::from_ref(&spec))?;
    if spec.severity == 0.0 {
        return Ok(img.clone());
    }
    let s = spec.severity;
    let (h, w) = (img.height(), img.width());
    let seed = derive_seed(seed, spec.kind.stream());
    let src = img.data();
    let data: Vec<f32> = match spec.kind {
        DistortionKind::Blur => gaussian_blur(img, 4.0 * s),
        DistortionKind::Noise => {
            let sigma = noise_std(s) as f32;
            src.iter()
                .zip(noise_field(seed, h, w))
                .map(|(&x, g)| x + sigma * g)
                .collect()
        }
        DistortionKind::Contrast => {
            let n = h * w;
            let mut out = Vec::with_capacity(src.len());
            for c in 0..3 {
                let ch = img.channel(c);
                let mean = (ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
                let s = s as f32;
                out.extend(ch.iter().map(|&v| (1.0 - s) * v + s * mean));
            }
            out
        }
        DistortionKind::Brightness => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let shift = (sign * 0.4 * s) as f32;
            src.iter().map(|&v| v + shift).collect()
        }
        DistortionKind::ColorShift => {
            let gains = color_gains(s, seed);
            let n = h * w;
            src.iter()
                .enumerate()
                .map(|(i, &v)| v * gains[i / n])
                .collect()
        }
    };
    ImageTensor::from_clamped(h, w, data)
}

/// Gains `1 + 0.5·s·e_c` with `e` a random permutation of (1, −1, u),
/// u ~ U(−1, 1): the strongest and weakest channels always sit at the ends
/// of the allowed range.
fn color_gains(severity: f64, seed: u64) -> [f32; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = [1.0, -1.0, rng.random_range(-1.0..=1.0)];
    e.shuffle(&mut rng);
    e.map(|e: f64| (1.0 + 0.5 * severity * e) as f32)
}

pub(super) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders, radius ⌈3σ⌉.
fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);

    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(3 * h * w);
    let mut tmp = vec![0f64; h * w];
    for c in 0..3 {
        let ch = img.channel(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * ch[y * w + reflect(x as isize + j as isize - radius, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - radius, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::clean_image;

    fn spec(kind: DistortionKind, s: f64) -> DistortionSpec {
        DistortionSpec::new(kind, s)
    }

    #[test]
    fn severity_zero_is_identity_for_every_kind() {
        let img = clean_image(48, 40, 1);
        for kind in DistortionKind::ALL {
            assert_eq!(apply_distortion(&img, spec(kind, 0.0), 3).unwrap(), img);
        }
        assert_eq!(distort(&img, &[], 3).unwrap(), img);
    }

    #[test]
    fn duplicate_kind_is_rejected_with_its_name() {
        let img = clean_image(32, 32, 1);
        let err = distort(
            &img,
            &[spec(DistortionKind::Noise, 0.1), spec(DistortionKind::Noise, 0.2)],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("noise"));
    }

    #[test]
    fn severity_out_of_range_is_rejected() {
        let img = clean_image(32, 32, 1);
        assert!(distort(&img, &[spec(DistortionKind::Blur, 1.5)], 0).is_err());
    }

    #[test]
    fn noise_on_checkerboard_equals_clamped_seeded_field() {
        let (h, w) = (64, 64);
        let mut data = vec![0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = if (x / 8 + y / 8) % 2 == 0 { 0.25 } else { 0.75 };
                }
            }
        }
        let clean = ImageTensor::new(h, w, data).unwrap();
        let seed = 42;
        let out = distort(&clean, &[spec(DistortionKind::Noise, 0.3)], seed).unwrap();
        let g = noise_field(derive_seed(seed, DistortionKind::Noise.stream()), h, w);
        let sigma = noise_std(0.3) as f32;
        for ((o, c), g) in out.data().iter().zip(clean.data()).zip(g) {
            assert_eq!(*o, (c + sigma * g).clamp(0.0, 1.0));
        }
        let again = distort(&clean, &[spec(DistortionKind::Noise, 0.3)], seed).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn streams_are_independent_of_other_kinds() {
        let img = clean_image(32, 32, 4);
        let only_noise = distort(&img, &[spec(DistortionKind::Noise, 0.5)], 9).unwrap();
        let with_bright = distort(
            &img,
            &[spec(DistortionKind::Noise, 0.5), spec(DistortionKind::Brightness, 0.0)],
            9,
        )
        .unwrap();
        assert_eq!(only_noise, with_bright);
    }

    #[test]
    fn blur_reduces_gradient_energy_monotonically() {
        let img = clean_image(64, 64, 2);
        let energy = |im: &ImageTensor| {
            let y = im.luminance();
            let w = im.width();
            (0..y.len() - 1)
                .filter(|i| (i + 1) % w != 0)
                .map(|i| (y[i + 1] - y[i]).powi(2))
                .sum::<f64>()
        };
        let mut last = energy(&img);
        for s in [0.1, 0.3, 0.6, 1.0] {
            let e = energy(&apply_distortion(&img, spec(DistortionKind::Blur, s), 0).unwrap());
            assert!(e < last, "blur {s}: {e} !< {last}");
            last = e;
        }
    }

    #[test]
    fn full_contrast_flattens_each_channel() {
        let img = clean_image(32, 32, 5);
        let flat = apply_distortion(&img, spec(DistortionKind::Contrast, 1.0), 0).unwrap();
        for c in 0..3 {
            let ch = flat.channel(c);
            assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-6));
        }
    }

    #[test]
    fn color_gains_span_the_range() {
        for seed in 0..20 {
            let g = color_gains(0.6, seed);
            let max = g.iter().cloned().fold(f32::MIN, f32::max);
            let min = g.iter().cloned().fold(f32::MAX, f32::min);
            assert!((max - 1.3).abs() < 1e-6 && (min - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in DistortionKind::ALL {
            assert_eq!(k.name().parse::<DistortionKind>().unwrap(), k);
        }
        assert!("jpeg".parse::<DistortionKind>().is_err());
    }
}
