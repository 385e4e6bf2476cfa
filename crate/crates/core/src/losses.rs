//! Training objectives.
//!
//! The IQA loss is MSE plus a norm-in-norm term. The restoration losses use
//! a frozen model as a critic: the no-reference loss maximizes its overall
//! score, the full-reference loss matches per-dimension features against
//! the clean image. Both take a ratio override that scales selected
//! dimension weights.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::model::{Mdiqa, WeightVector};
use crate::{Error, Result};

/// Guard added under the square root when normalizing in [`nin_loss`].
pub const NIN_EPS: f64 = 1e-8;

/// Per-dimension multipliers on the weight vector. Absent names are 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RatioOverride {
    pub ratios: BTreeMap<String, f64>,
}

impl RatioOverride {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, dim: &str, lambda: f64) -> Self {
        self.ratios.insert(dim.to_string(), lambda);
        self
    }

    pub fn get(&self, dim: &str) -> f64 {
        self.ratios.get(dim).copied().unwrap_or(1.0)
    }

    pub fn is_identity(&self) -> bool {
        self.ratios.values().all(|&v| v == 1.0)
    }

    /// Parses `dim=λ`.
    pub fn parse_entry(s: &str) -> Result<(String, f64)> {
        let (dim, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("ratio `{s}` is not of the form dim=value")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("ratio `{s}` has a non-numeric value")))?;
        Ok((dim.trim().to_string(), v))
    }

    /// λ per name in `names` order; every overridden name must be among
    /// them and every λ positive.
    pub fn factors(&self, names: &[String]) -> Result<Vec<f64>> {
        for (dim, &l) in &self.ratios {
            if !names.iter().any(|n| n == dim) {
                return Err(Error::UnknownDimension(dim.clone()));
            }
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidInput(format!("ratio for `{dim}` must be positive, got {l}")));
            }
        }
        Ok(names.iter().map(|n| self.get(n)).collect())
    }

    /// Scales the columns of a (B, D) weight tensor.
    pub fn apply_tensor(&self, w: &Tensor, names: &[String]) -> Result<Tensor> {
        if self.ratios.is_empty() {
            return Ok(w.clone());
        }
        let f = Tensor::from_vec(self.factors(names)?, (1, names.len()), w.device())?.to_dtype(w.dtype())?;
        Ok(w.broadcast_mul(&f)?)
    }
}

/// `w'_D = λ_D · w_D`.
pub fn apply_override(w: &WeightVector, ov: &RatioOverride) -> Result<WeightVector> {
    let f = ov.factors(&w.names)?;
    Ok(WeightVector {
        names: w.names.clone(),
        values: w.values.iter().zip(f).map(|(w, l)| w * l).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub org: f64,
    pub nr: f64,
    pub fr: f64,
    pub alpha_nin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            org: 1.0,
            nr: 0.0,
            fr: 0.0,
            alpha_nin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("org", self.org), ("nr", self.nr), ("fr", self.fr), ("alpha_nin", self.alpha_nin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn unmasked(pred: &Tensor, label: &Tensor, mask: &[bool]) -> Result<(Tensor, Tensor)> {
    let n = pred.dim(0)?;
    if label.dim(0)? != n || mask.len() != n {
        return Err(Error::InvalidInput(format!(
            "length mismatch: pred {n}, label {}, mask {}",
            label.dim(0)?,
            mask.len()
        )));
    }
    if mask.iter().all(|&m| m) {
        return Ok((pred.clone(), label.clone()));
    }
    let idx: Vec<u32> = (0..n as u32).filter(|&i| mask[i as usize]).collect();
    let idx = Tensor::new(idx.as_slice(), pred.device())?;
    Ok((pred.index_select(&idx, 0)?, label.index_select(&idx, 0)?))
}

/// Mean squared error over entries whose mask is true.
pub fn mse_loss(pred: &Tensor, label: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidInput("every entry is masked".into()));
    }
    let (p, l) = unmasked(pred, label, mask)?;
    Ok((p - l)?.sqr()?.mean_all()?)
}

fn center_normalize(x: &Tensor) -> Result<Tensor> {
    let c = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
    let norm = (c.sqr()?.sum_keepdim(D::Minus1)? + NIN_EPS * NIN_EPS)?.sqrt()?;
    Ok(c.broadcast_div(&norm)?)
}

/// Squared distance between the centred, unit-normalized prediction and
/// label vectors. Invariant to positive affine maps of `pred`.
pub fn nin_loss(pred: &Tensor, label: &Tensor) -> Result<Tensor> {
    let n = pred.dim(0)?;
    if n < 2 {
        return Err(Error::InvalidInput(format!("norm-in-norm needs at least 2 entries, got {n}")));
    }
    if label.dim(0)? != n {
        return Err(Error::InvalidInput(format!("length mismatch: pred {n}, label {}", label.dim(0)?)));
    }
    let d = (center_normalize(pred)? - center_normalize(&label.detach())?)?;
    Ok(d.sqr()?.sum_all()?)
}

/// `mse + α·nin`. The norm-in-norm term is skipped when fewer than two
/// entries are unmasked or when the unmasked labels are all equal.
pub fn hybrid_iqa_loss(pred: &Tensor, label: &Tensor, mask: &[bool], alpha_nin: f64) -> Result<Tensor> {
    let mse = mse_loss(pred, label, mask)?;
    if alpha_nin == 0.0 || mask.iter().filter(|&&m| m).count() < 2 {
        return Ok(mse);
    }
    let (p, l) = unmasked(pred, label, mask)?;
    let lv = l.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if lv.iter().all(|&v| v == lv[0]) {
        return Ok(mse);
    }
    Ok((mse + (nin_loss(&p, &l)? * alpha_nin)?)?)
}

/// `−mean_i f(R_i, λ ⊙ w(R_i))`. `model` should be frozen so that only the
/// restored pixels receive gradients.
pub fn nr_loss(restored: &Tensor, model: &Mdiqa, ov: &RatioOverride) -> Result<Tensor> {
    if restored.dim(0)? == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let opts = model.inference_options();
    let heads = model.head_outputs(restored, opts)?;
    let w = ov.apply_tensor(&model.predict_weights(restored)?, &model.dim_names())?;
    Ok(model.fuse(&heads, &w)?.mean_all()?.neg()?)
}

/// Full-reference loss with its per-dimension decomposition.
#[derive(Debug, Clone)]
pub struct FrLoss {
    pub total: Tensor,
    /// One scalar per active dimension: `mean_i w_D,i · mean|ḡ_D(R_i) − ḡ_D(H_i)|`.
    pub terms: Vec<Tensor>,
}

/// Weights come from the reference image (no gradient) and are scaled by
/// the override.
pub fn fr_loss(restored: &Tensor, reference: &Tensor, model: &Mdiqa, ov: &RatioOverride) -> Result<FrLoss> {
    if restored.dims() != reference.dims() {
        return Err(Error::InvalidInput(format!(
            "restored {:?} and reference {:?} differ in shape",
            restored.dims(),
            reference.dims()
        )));
    }
    if restored.dim(0)? == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let opts = model.inference_options();
    let reference = reference.detach();
    let w = ov
        .apply_tensor(&model.predict_weights(&reference)?, &model.dim_names())?
        .detach();
    let hr = model.head_outputs(restored, opts)?;
    let hh = model.head_outputs(&reference, opts)?;
    fr_from_features(&hr.features, &hh.features, &w)
}

/// The weighted feature distance given features and (B, D) weights.
pub fn fr_from_features(restored: &[Tensor], reference: &[Tensor], w: &Tensor) -> Result<FrLoss> {
    let mut terms = Vec::with_capacity(restored.len());
    for (d, (gr, gh)) in restored.iter().zip(reference).enumerate() {
        let l1 = (gr - gh.detach())?.abs()?.mean(1)?;
        terms.push((l1 * w.narrow(1, d, 1)?.squeeze(1)?)?.mean_all()?);
    }
    let total = Tensor::stack(&terms, 0)?.sum_all()?;
    Ok(FrLoss { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(s(mse_loss(&t(&[0.3, 0.4]), &t(&[0.3, 0.4]), &[true, true]).unwrap()), 0.0);
        assert_eq!(s(mse_loss(&t(&[0.0, 1.0]), &t(&[1.0, 0.0]), &[true, true]).unwrap()), 1.0);
        assert_eq!(s(mse_loss(&t(&[0.0, 9.0]), &t(&[0.0, 0.0]), &[true, false]).unwrap()), 0.0);
        assert!(mse_loss(&t(&[0.0]), &t(&[0.0]), &[false]).is_err());
    }

    #[test]
    fn masked_entries_get_no_gradient() {
        let p = Var::new(&[0.2f64, 5.0, 0.1], &Device::Cpu).unwrap();
        let l = mse_loss(p.as_tensor(), &t(&[0.0, 0.0, 0.0]), &[true, false, true]).unwrap();
        let g = l.backward().unwrap().get(&p).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g[1], 0.0);
        assert!((g[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn nin_examples() {
        let label = t(&[0.1, 0.5, 0.3, 0.9]);
        let affine = t(&[0.1 * 3.0 + 2.0, 0.5 * 3.0 + 2.0, 0.3 * 3.0 + 2.0, 0.9 * 3.0 + 2.0]);
        assert!(s(nin_loss(&affine, &label).unwrap()) < 1e-6);
        let v = s(nin_loss(&t(&[-1.0, 1.0]), &t(&[1.0, -1.0])).unwrap());
        assert!((v - 4.0).abs() < 1e-12);
        assert!(nin_loss(&t(&[1.0]), &t(&[1.0])).is_err());
        // A constant prediction normalizes to zero, leaving |label_hat|² = 1.
        let v = s(nin_loss(&t(&[0.5, 0.5, 0.5]), &t(&[0.0, 1.0, 2.0])).unwrap());
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hybrid_hand_case() {
        let pred = [0.2, 0.4, 0.9];
        let label = [0.1, 0.6, 0.8];
        let mse = ((0.1f64).powi(2) + 0.2f64.powi(2) + 0.1f64.powi(2)) / 3.0;
        let norm = |v: [f64; 3]| {
            let m = v.iter().sum::<f64>() / 3.0;
            let c = v.map(|x| x - m);
            let n = (c.iter().map(|x| x * x).sum::<f64>() + 1e-16).sqrt();
            c.map(|x| x / n)
        };
        let (a, b) = (norm(pred), norm(label));
        let nin: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let got = s(hybrid_iqa_loss(&t(&pred), &t(&label), &[true; 3], 1.0).unwrap());
        assert!((got - (mse + nin)).abs() < 1e-12);
        let got0 = s(hybrid_iqa_loss(&t(&pred), &t(&label), &[true; 3], 0.0).unwrap());
        assert!((got0 - mse).abs() < 1e-15);
        assert_eq!(s(hybrid_iqa_loss(&t(&label), &t(&label), &[true; 3], 1.0).unwrap()), 0.0);
        // One unmasked entry: nin skipped.
        let one = s(hybrid_iqa_loss(&t(&pred), &t(&label), &[true, false, false], 1.0).unwrap());
        assert!((one - 0.01).abs() < 1e-15);
    }

    #[test]
    fn override_semantics() {
        let w = WeightVector {
            names: vec!["sharpness".into(), "noisiness".into()],
            values: vec![0.3, 0.8],
        };
        let o = apply_override(&w, &RatioOverride::new().with("sharpness", 2.0)).unwrap();
        assert_eq!(o.values, vec![0.6, 0.8]);
        assert_eq!(apply_override(&w, &RatioOverride::new()).unwrap(), w);
        assert!(matches!(
            apply_override(&w, &RatioOverride::new().with("vibes", 2.0)),
            Err(Error::UnknownDimension(_))
        ));
        assert!(apply_override(&w, &RatioOverride::new().with("sharpness", 0.0)).is_err());
        assert_eq!(RatioOverride::parse_entry("noisiness=1.5").unwrap(), ("noisiness".into(), 1.5));
        assert!(RatioOverride::parse_entry("noisiness").is_err());
    }

    #[test]
    fn fr_two_image_hand_case() {
        // Two dimensions, 2-wide features, batch of two.
        let gr = [t(&[1.0, 2.0, 0.0, 0.5]).reshape((2, 2)).unwrap(), t(&[3.0, 3.0, 1.0, 1.0]).reshape((2, 2)).unwrap()];
        let gh = [t(&[0.0, 2.0, 1.0, 1.5]).reshape((2, 2)).unwrap(), t(&[3.0, 1.0, 1.0, 2.0]).reshape((2, 2)).unwrap()];
        let w = t(&[0.5, 2.0, 1.0, 1.5]).reshape((2, 2)).unwrap();
        let mut expected = 0.0;
        let grv: Vec<Vec<Vec<f64>>> = gr.iter().map(|x| x.to_vec2().unwrap()).collect();
        let ghv: Vec<Vec<Vec<f64>>> = gh.iter().map(|x| x.to_vec2().unwrap()).collect();
        let wv = w.to_vec2::<f64>().unwrap();
        for i in 0..2 {
            for d in 0..2 {
                let l1: f64 = (0..2).map(|k| (grv[d][i][k] - ghv[d][i][k]).abs()).sum::<f64>() / 2.0;
                expected += wv[i][d] * l1;
            }
        }
        expected /= 2.0;
        let got = fr_from_features(&gr, &gh, &w).unwrap();
        assert!((s(got.total) - expected).abs() < 1e-15);
    }
}
