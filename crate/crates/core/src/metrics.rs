//! Correlation metrics and the repeated-split evaluation protocol.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::model::Mdiqa;
use crate::{Error, ImageTensor, MultiDimSample, Result};

fn check(pred: &[f64], label: &[f64]) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} predictions, {} labels",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples"));
    }
    if pred.iter().chain(label).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// 1-based ranks; tied values share the average of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check(pred, label)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let ml = label.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, l) in pred.iter().zip(label) {
        let (a, b) = (p - mp, l - ml);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson over tie-averaged ranks.
pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check(pred, label)?;
    plcc(&average_ranks(pred), &average_ranks(label))
}

/// Shuffles `0..n` with `seed` and cuts at `round(n · train_ratio)`.
pub fn split_indices(n: usize, train_ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64 * train_ratio).round() as usize).min(n);
    let test = idx.split_off(cut);
    (idx, test)
}

/// Scores for one image: overall and one value per dimension in
/// [`Predictor::dim_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub overall: f64,
    pub dims: Vec<f64>,
}

pub trait Predictor {
    /// Dimension names with their index in the sample label vectors.
    fn dims(&self) -> Vec<(String, usize)>;
    fn predict(&self, images: &[ImageTensor]) -> Result<Vec<Prediction>>;
}

impl Predictor for Mdiqa {
    fn dims(&self) -> Vec<(String, usize)> {
        self.dimensions().iter().map(|d| (d.name.clone(), d.index)).collect()
    }

    /// Runs consecutive same-sized images as batches of up to 16.
    fn predict(&self, images: &[ImageTensor]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        let mut start = 0;
        while start < images.len() {
            let size = (images[start].height(), images[start].width());
            let mut end = start + 1;
            while end < images.len() && end - start < 16 && (images[end].height(), images[end].width()) == size {
                end += 1;
            }
            for q in self.score_images(&images[start..end])? {
                out.push(Prediction {
                    overall: q.overall,
                    dims: q.dim_scores,
                });
            }
            start = end;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub splits: usize,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            splits: 10,
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

/// SRCC and PLCC for one target; `None` when undefined on the subset
/// (fewer than two labelled samples or constant values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
}

impl Correlation {
    pub fn compute(pred: &[f64], label: &[f64]) -> Self {
        Correlation {
            srcc: srcc(pred, label).ok(),
            plcc: plcc(pred, label).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: usize,
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub overall: Correlation,
    pub dims: Vec<(String, Correlation)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitReport>,
    pub mean_overall: Correlation,
    pub mean_dims: Vec<(String, Correlation)>,
}

/// Correlations on a given subset of samples.
pub fn correlate(
    preds: &[Prediction],
    samples: &[MultiDimSample],
    subset: &[usize],
    dims: &[(String, usize)],
) -> (Correlation, Vec<(String, Correlation)>) {
    let p: Vec<f64> = subset.iter().map(|&i| preds[i].overall).collect();
    let l: Vec<f64> = subset.iter().map(|&i| samples[i].overall).collect();
    let overall = Correlation::compute(&p, &l);
    let per_dim = dims
        .iter()
        .enumerate()
        .map(|(k, (name, idx))| {
            let (p, l): (Vec<f64>, Vec<f64>) = subset
                .iter()
                .filter_map(|&i| samples[i].labels.values[*idx].map(|l| (preds[i].dims[k], l)))
                .unzip();
            (name.clone(), Correlation::compute(&p, &l))
        })
        .collect();
    (overall, per_dim)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_corr<'a>(c: impl Iterator<Item = &'a Correlation> + Clone) -> Correlation {
    Correlation {
        srcc: mean_of(c.clone().map(|c| c.srcc)),
        plcc: mean_of(c.map(|c| c.plcc)),
    }
}

/// Scores every sample once, then reports correlations on the test part of
/// `cfg.splits` random splits. Split `k` uses seed `derive_seed(cfg.seed, k)`.
pub fn evaluate(model: &dyn Predictor, dataset: &[MultiDimSample], cfg: &EvalConfig) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if cfg.splits == 0 || !(0.0..1.0).contains(&cfg.train_ratio) {
        return Err(Error::Config(format!(
            "need at least one split and a train ratio in [0, 1), got {} and {}",
            cfg.splits, cfg.train_ratio
        )));
    }
    let images: Vec<ImageTensor> = dataset.iter().map(|s| s.image.clone()).collect();
    let preds = model.predict(&images)?;
    let dims = model.dims();
    let splits: Vec<SplitReport> = (0..cfg.splits)
        .map(|k| {
            let seed = derive_seed(cfg.seed, k as u64);
            let (train, test) = split_indices(dataset.len(), cfg.train_ratio, seed);
            let (overall, dims) = correlate(&preds, dataset, &test, &dims);
            SplitReport {
                split: k,
                seed,
                train: train.len(),
                test: test.len(),
                overall,
                dims,
            }
        })
        .collect();
    let mean_overall = mean_corr(splits.iter().map(|s| &s.overall));
    let mean_dims = dims
        .iter()
        .enumerate()
        .map(|(k, (name, _))| (name.clone(), mean_corr(splits.iter().map(|s| &s.dims[k].1))))
        .collect();
    Ok(EvalReport {
        splits,
        mean_overall,
        mean_dims,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Columns `split,target,srcc,plcc`; the final rows carry split `mean`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
        let mut rows: Vec<[String; 4]> = Vec::new();
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut push = |split: String, target: &str, c: &Correlation| {
            rows.push([split, target.to_string(), cell(c.srcc), cell(c.plcc)]);
        };
        for s in &self.splits {
            push(s.split.to_string(), "overall", &s.overall);
            for (name, c) in &s.dims {
                push(s.split.to_string(), name, c);
            }
        }
        push("mean".into(), "overall", &self.mean_overall);
        for (name, c) in &self.mean_dims {
            push("mean".into(), name, c);
        }
        let err = |e: csv::Error| Error::Manifest(e.to_string());
        w.write_record(["split", "target", "srcc", "plcc"]).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
