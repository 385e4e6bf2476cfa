//! Toy restorer trained with an L1 term plus the critic losses, and the
//! weight-ratio sweep harness.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RestorationConfig, Variant};
use crate::data::{clean_image, degrade, derive_seed, DistortionSpec};
use crate::losses::{fr_loss, nr_loss, RatioOverride};
use crate::model::{to_quality_outputs, Mdiqa};
use crate::nn::{Conv2d, Init, ParamGroup, ParamStore, ParamTag};
use crate::train::AdamW;
use crate::{Error, ImageTensor, Result};

/// `out = x + net(x)`: a plain conv stack whose last layer starts at zero,
/// so a fresh restorer is the identity.
pub struct Restorer {
    store: ParamStore,
    layers: Vec<Conv2d>,
}

impl Restorer {
    pub fn new(width: usize, depth: usize, seed: u64, dtype: DType) -> Result<Self> {
        if depth < 2 || width == 0 {
            return Err(Error::Config("restorer needs depth >= 2 and a positive width".into()));
        }
        let mut store = ParamStore::new(dtype, seed);
        let tag = ParamTag::new(ParamGroup::Restorer, None);
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let c_in = if i == 0 { 3 } else { width };
            let layer = if i + 1 == depth {
                Conv2d::with_init(&mut store, &format!("restorer.conv{i}"), [3, c_in, 3, 3], Init::Zeros, Init::Zeros, 1, 1, tag)?
            } else {
                Conv2d::new(&mut store, &format!("restorer.conv{i}"), c_in, width, 3, 1, 1, tag)?
            };
            layers.push(layer);
        }
        Ok(Restorer { store, layers })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok((x + h)?)
    }

    pub fn restore(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let x = image.to_tensor(self.store.dtype())?.unsqueeze(0)?;
        ImageTensor::from_tensor(&self.forward(&x)?.squeeze(0)?)
    }
}

/// Loss coefficients and ratio override for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecipe {
    pub org: f64,
    pub nr: f64,
    pub fr: f64,
    pub ratios: RatioOverride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationRun {
    pub recipe: LossRecipe,
    pub degradation: Vec<DistortionSpec>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub width: usize,
    pub depth: usize,
    pub log_every: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl RestorationRun {
    pub fn from_config(cfg: &RestorationConfig, ratios: &RatioOverride) -> Self {
        let (nr, fr) = match cfg.variant {
            Variant::None => (0.0, 0.0),
            Variant::Nr => (cfg.lambda_nr, 0.0),
            Variant::Fr => (0.0, cfg.lambda_fr),
        };
        RestorationRun {
            recipe: LossRecipe {
                org: cfg.lambda_org,
                nr,
                fr,
                ratios: ratios.clone(),
            },
            degradation: cfg.degradation.clone(),
            steps: cfg.iterations,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            size: cfg.size,
            train_images: cfg.train_images,
            val_images: cfg.val_images,
            width: cfg.width,
            depth: cfg.depth,
            log_every: cfg.log_every,
            seed: cfg.seed,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.recipe;
        if r.nr != 0.0 && r.fr != 0.0 {
            return Err(Error::Config(
                "a restoration run uses either the no-reference or the full-reference loss, not both".into(),
            ));
        }
        for (name, v) in [("org", r.org), ("nr", r.nr), ("fr", r.fr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss coefficient {name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.train_images == 0 || self.val_images == 0 {
            return Err(Error::Config("batch size and image counts must be positive".into()));
        }
        if self.size < crate::data::MIN_SIDE {
            return Err(Error::Config(format!("image size must be at least {}", crate::data::MIN_SIDE)));
        }
        Ok(())
    }
}

/// (degraded, clean) pairs. Training and validation draw from disjoint
/// seed streams.
pub fn make_pairs(run: &RestorationRun, count: usize, stream: u64) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    (0..count)
        .map(|i| {
            let s = derive_seed(derive_seed(run.seed, stream), i as u64);
            let clean = clean_image(run.size, run.size, derive_seed(s, 0));
            let degraded = degrade(&clean, &run.degradation, derive_seed(s, 1))?;
            Ok((degraded, clean))
        })
        .collect()
}

/// Rec. 601 luma of a clamped image.
fn luma(img: &ImageTensor) -> Vec<f64> {
    img.luminance()
}

/// Mean of `gx² + gy²` over forward differences of luminance.
pub fn sharpness_proxy(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = luma(img);
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = y[r * w + c];
            let gx = if c + 1 < w { y[r * w + c + 1] - v } else { 0.0 };
            let gy = if r + 1 < h { y[(r + 1) * w + c] - v } else { 0.0 };
            s += gx * gx + gy * gy;
        }
    }
    s / (h * w) as f64
}

/// Mean of `(Y − box3(Y))²`, with the 3×3 box filter clamped at borders.
pub fn noisiness_proxy(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = luma(img);
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    sum += y[rr * w + cc];
                    n += 1.0;
                }
            }
            let d = y[r * w + c] - sum / n;
            s += d * d;
        }
    }
    s / (h * w) as f64
}

/// Critic scores and pixel statistics of restored validation images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub overall: f64,
    pub dims: Vec<(String, f64)>,
    pub sharpness_proxy: f64,
    pub noisiness_proxy: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestoreLog {
    pub step: usize,
    pub loss: f64,
    /// Critic overall on the validation set, on logging steps.
    pub val_overall: Option<f64>,
}

pub struct RestorationResult {
    pub restorer: Restorer,
    pub metrics: RunMetrics,
    pub log: Vec<RestoreLog>,
}

/// Restores every validation pair and scores the outputs with the critic.
pub fn evaluate_restorer(
    restorer: &Restorer,
    critic: &Mdiqa,
    pairs: &[(ImageTensor, ImageTensor)],
) -> Result<(RunMetrics, Vec<ImageTensor>)> {
    let mut outputs = Vec::with_capacity(pairs.len());
    let mut l1 = 0.0;
    for (degraded, clean) in pairs {
        let out = restorer.restore(degraded)?;
        l1 += out
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / out.data().len() as f64;
        outputs.push(out);
    }
    let n = pairs.len() as f64;
    let names = critic.dim_names();
    let mut overall = 0.0;
    let mut dims = vec![0.0; names.len()];
    for chunk in outputs.chunks(16) {
        let x = ImageTensor::batch(chunk, critic.dtype())?;
        for q in to_quality_outputs(&critic.forward(&x)?, &names)? {
            overall += q.overall;
            for (d, s) in dims.iter_mut().zip(q.dim_scores) {
                *d += s;
            }
        }
    }
    let metrics = RunMetrics {
        overall: overall / n,
        dims: names.into_iter().zip(dims.into_iter().map(|d| d / n)).collect(),
        sharpness_proxy: outputs.iter().map(sharpness_proxy).sum::<f64>() / n,
        noisiness_proxy: outputs.iter().map(noisiness_proxy).sum::<f64>() / n,
        l1: l1 / n,
    };
    Ok((metrics, outputs))
}

/// Trains a fresh restorer against a frozen critic. The critic must have
/// been built detached (see [`crate::train::Checkpoint::critic`]).
pub fn train_restorer(run: &RestorationRun, critic: &Mdiqa) -> Result<RestorationResult> {
    run.validate()?;
    run.recipe.ratios.factors(&critic.dim_names())?;
    let dtype = critic.dtype();
    let train = make_pairs(run, run.train_images, 1)?;
    let val = make_pairs(run, run.val_images, 2)?;
    let restorer = Restorer::new(run.width, run.depth, derive_seed(run.seed, 3), dtype)?;
    let vars = restorer.store.select(|_| true);
    let mut opt = AdamW::default();
    let mut log = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, 4));
    let r = &run.recipe;
    for step in 0..run.steps {
        let mut idx = Vec::with_capacity(run.batch_size);
        while idx.len() < run.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let x = ImageTensor::batch(&idx.iter().map(|&i| train[i].0.clone()).collect::<Vec<_>>(), dtype)?;
        let y = ImageTensor::batch(&idx.iter().map(|&i| train[i].1.clone()).collect::<Vec<_>>(), dtype)?;
        let out = restorer.forward(&x)?;
        let mut loss = ((&out - &y)?.abs()?.mean_all()? * r.org)?;
        // The critic only ever sees valid images; L1 on the raw output pulls
        // out-of-range pixels back.
        let seen = out.clamp(0.0, 1.0)?;
        if r.nr > 0.0 {
            loss = (loss + (nr_loss(&seen, critic, &r.ratios)? * r.nr)?)?;
        }
        if r.fr > 0.0 {
            loss = (loss + (fr_loss(&seen, &y, critic, &r.ratios)?.total * r.fr)?)?;
        }
        let grads = loss.backward()?;
        opt.step(&vars, &grads, run.lr, 0.0)?;
        let loss = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            return Err(Error::InvalidInput(format!("restoration loss became {loss} at step {step}")));
        }
        let logged = run.log_every > 0 && ((step + 1) % run.log_every == 0 || step + 1 == run.steps);
        let val_overall = if logged {
            Some(evaluate_restorer(&restorer, critic, &val)?.0.overall)
        } else {
            None
        };
        log.push(RestoreLog {
            step: step + 1,
            loss,
            val_overall,
        });
    }
    let (metrics, outputs) = evaluate_restorer(&restorer, critic, &val)?;
    if let Some(dir) = &run.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, img) in outputs.iter().enumerate() {
            img.save(&dir.join(format!("restored_{i:03}.png")))?;
        }
        let text = serde_json::to_string_pretty(&metrics)?;
        let p = dir.join("metrics.json");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(RestorationResult {
        restorer,
        metrics,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dim: String,
    pub rows: Vec<SweepRow>,
}

/// One run per ratio with `dim` scaled by it; everything else, including
/// every seed, is shared with `base`.
pub fn sweep_ratio(base: &RestorationRun, critic: &Mdiqa, dim: &str, ratios: &[f64]) -> Result<SweepReport> {
    if !critic.dim_names().iter().any(|n| n == dim) {
        return Err(Error::UnknownDimension(dim.to_string()));
    }
    if ratios.first() != Some(&1.0) || ratios.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(format!(
            "ratios must start at 1.0 and increase strictly, got {ratios:?}"
        )));
    }
    let rows = ratios
        .iter()
        .map(|&ratio| {
            let mut run = base.clone();
            run.recipe.ratios = base.recipe.ratios.clone().with(dim, ratio);
            run.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("ratio_{ratio}")));
            Ok(SweepRow {
                ratio,
                metrics: train_restorer(&run, critic)?.metrics,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        dim: dim.to_string(),
        rows,
    })
}

impl SweepReport {
    /// One row per ratio: critic overall, per-dimension scores, proxies.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Manifest(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["ratio".to_string(), "overall".to_string()];
        if let Some(r) = self.rows.first() {
            header.extend(r.metrics.dims.iter().map(|(n, _)| n.clone()));
        }
        header.extend(["sharpness_proxy", "noisiness_proxy", "l1"].map(String::from));
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let m = &r.metrics;
            let mut rec = vec![r.ratio.to_string(), m.overall.to_string()];
            rec.extend(m.dims.iter().map(|(_, v)| v.to_string()));
            rec.extend([m.sharpness_proxy, m.noisiness_proxy, m.l1].map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DistortionKind;

    #[test]
    fn fresh_restorer_is_identity() {
        let r = Restorer::new(8, 8, 0, DType::F32).unwrap();
        let clean = clean_image(48, 48, 1);
        let blurred = degrade(&clean, &[DistortionSpec::new(DistortionKind::Blur, 0.5)], 0).unwrap();
        assert_eq!(r.restore(&blurred).unwrap(), blurred);
    }

    #[test]
    fn degrade_is_reproducible() {
        let clean = clean_image(40, 40, 2);
        let specs = [
            DistortionSpec::new(DistortionKind::Noise, 0.4),
            DistortionSpec::new(DistortionKind::Blur, 0.2),
        ];
        assert_eq!(degrade(&clean, &specs, 5).unwrap(), degrade(&clean, &specs, 5).unwrap());
        assert_eq!(degrade(&clean, &[DistortionSpec::new(DistortionKind::Noise, 0.0)], 5).unwrap(), clean);
    }

    #[test]
    fn proxies_respond_to_blur_and_noise() {
        let clean = clean_image(64, 64, 3);
        let blurred = degrade(&clean, &[DistortionSpec::new(DistortionKind::Blur, 0.5)], 0).unwrap();
        let noisy = degrade(&clean, &[DistortionSpec::new(DistortionKind::Noise, 0.5)], 0).unwrap();
        assert!(sharpness_proxy(&blurred) < sharpness_proxy(&clean));
        assert!(noisiness_proxy(&noisy) > noisiness_proxy(&clean));
        let flat = ImageTensor::filled(32, 32, [0.3; 3]).unwrap();
        assert_eq!(sharpness_proxy(&flat), 0.0);
        assert!(noisiness_proxy(&flat) < 1e-20);
    }

    #[test]
    fn recipe_rejects_both_variants() {
        let mut run = RestorationRun::from_config(&RestorationConfig::default(), &RatioOverride::new());
        run.recipe.nr = 1.0;
        run.recipe.fr = 5.0;
        assert!(run.validate().is_err());
        run.recipe.fr = 0.0;
        assert!(run.validate().is_ok());
    }
}
