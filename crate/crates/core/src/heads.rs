//! Per-dimension heads and the pluggable semantic encoder.
//!
//! A head turns its branch's pyramid into one fused token map with
//! top-down cross-scale attention, optionally mixes in a global semantic
//! vector, and regresses a score. Token maps are (B, N, C) with N = h·w.

use candle_core::{DType, Tensor, D};

use crate::backbone::FeaturePyramid;
use crate::nn::ops::{l2_normalize_last, softmax_last, to_tokens};
use crate::nn::{Conv2d, Init, Linear, ParamGroup, ParamStore, ParamTag};
use crate::registry::Category;
use crate::{Error, ImageTensor, Result};

/// Top-down cross-scale attention. The state starts as a projection of the
/// coarsest level; at each finer level it queries that level's tokens and
/// adds the attended values back residually.
#[derive(Debug, Clone)]
pub struct Csam {
    input: Linear,
    /// One (query, key, value) triple per finer level, finest first.
    attn: Vec<(Linear, Linear, Linear)>,
    width: usize,
}

impl Csam {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        level_widths: &[usize],
        width: usize,
        tag: ParamTag,
    ) -> Result<Self> {
        let l = level_widths.len();
        if l < 2 {
            return Err(Error::Config("cross-scale attention needs at least 2 levels".into()));
        }
        let input = Linear::new(store, &format!("{name}.in"), level_widths[l - 1], width, tag)?;
        let attn = level_widths[..l - 1]
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let std = (1.0 / width as f64).sqrt();
                Ok((
                    Linear::with_init(store, &format!("{name}.q{i}"), width, width, Init::Normal(std), Init::Zeros, tag)?,
                    Linear::with_init(store, &format!("{name}.k{i}"), c, width, Init::Normal((1.0 / c as f64).sqrt()), Init::Zeros, tag)?,
                    Linear::new(store, &format!("{name}.v{i}"), c, width, tag)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Csam { input, attn, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Scaled dot-product attention weights (B, Nq, Nk); rows sum to 1.
    pub fn attend(q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let d = q.dim(D::Minus1)? as f64;
        let logits = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / d.sqrt())?;
        softmax_last(&logits)
    }

    /// Fused (B, N, width) token map.
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        self.forward_traced(pyramid).map(|(out, _)| out)
    }

    /// Also returns the attention matrices, coarsest step first.
    pub fn forward_traced(&self, pyramid: &FeaturePyramid) -> Result<(Tensor, Vec<Tensor>)> {
        pyramid.spatial()?;
        if pyramid.levels.len() != self.attn.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "expected {} pyramid levels, got {}",
                self.attn.len() + 1,
                pyramid.levels.len()
            )));
        }
        let tokens: Vec<Tensor> = pyramid.levels.iter().map(to_tokens).collect::<Result<_>>()?;
        let mut state = self.input.forward(tokens.last().expect("levels"))?;
        let mut maps = Vec::with_capacity(self.attn.len());
        for (level, (wq, wk, wv)) in tokens.iter().zip(&self.attn).rev() {
            let q = wq.forward(&state)?;
            let k = wk.forward(level)?;
            let v = wv.forward(level)?;
            let a = Self::attend(&q, &k)?;
            state = (state + a.matmul(&v)?)?;
            maps.push(a);
        }
        Ok((state, maps))
    }
}

/// Residual MLP over `concat(fused, sem)` at every token.
#[derive(Debug, Clone)]
pub struct SemanticInjection {
    fc1: Linear,
    fc2: Linear,
}

impl SemanticInjection {
    /// The output layer starts at zero, so a fresh injection is the identity.
    pub fn new(store: &mut ParamStore, name: &str, width: usize, sem_width: usize, tag: ParamTag) -> Result<Self> {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), width + sem_width, width, tag)?;
        let fc2 = Linear::with_init(store, &format!("{name}.fc2"), width, width, Init::Zeros, Init::Zeros, tag)?;
        Ok(SemanticInjection { fc1, fc2 })
    }

    /// `fused`: (B, N, C); `sem`: (B, S). Disabled means an exact passthrough.
    pub fn forward(&self, fused: &Tensor, sem: &Tensor, enabled: bool) -> Result<Tensor> {
        if !enabled {
            return Ok(fused.clone());
        }
        let (b, n, _) = fused.dims3()?;
        let s = sem.unsqueeze(1)?.broadcast_as((b, n, sem.dim(1)?))?;
        let x = Tensor::cat(&[fused, &s], 2)?;
        let delta = self.fc2.forward(&self.fc1.forward(&x)?.relu()?)?;
        Ok((fused + delta)?)
    }
}

/// Output of one head: ḡ_D (B, R) and score (B,).
#[derive(Debug, Clone)]
pub struct DimensionHeadOutput {
    pub score: Tensor,
    pub feature: Tensor,
}

/// Global average pool, one hidden layer (its activation is ḡ_D), then a
/// linear score.
#[derive(Debug, Clone)]
pub struct Regressor {
    pub hidden: Linear,
    pub out: Linear,
}

impl Regressor {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, tag: ParamTag) -> Result<Self> {
        Ok(Regressor {
            hidden: Linear::new(store, &format!("{name}.hidden"), width, hidden, tag)?,
            out: Linear::with_init(
                store,
                &format!("{name}.out"),
                hidden,
                1,
                Init::Normal((1.0 / hidden as f64).sqrt()),
                Init::Constant(0.5),
                tag,
            )?,
        })
    }

    pub fn feature(&self, refined: &Tensor) -> Result<Tensor> {
        self.hidden.forward(&refined.mean(1)?)?.relu().map_err(Into::into)
    }

    pub fn score(&self, feature: &Tensor) -> Result<Tensor> {
        Ok(self.out.forward(feature)?.squeeze(1)?)
    }

    pub fn forward(&self, refined: &Tensor) -> Result<DimensionHeadOutput> {
        let feature = self.feature(refined)?;
        let score = self.score(&feature)?;
        Ok(DimensionHeadOutput { score, feature })
    }
}

#[derive(Debug, Clone)]
pub struct DimensionHead {
    pub name: String,
    pub category: Category,
    pub csam: Csam,
    pub injection: SemanticInjection,
    pub regressor: Regressor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadWidths {
    pub head: usize,
    pub regressor: usize,
    pub semantic: usize,
}

impl DimensionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        category: Category,
        level_widths: &[usize],
        widths: HeadWidths,
    ) -> Result<Self> {
        let prefix = format!("heads.{name}");
        let tag = |g| ParamTag::new(g, Some(category));
        Ok(DimensionHead {
            name: name.to_string(),
            category,
            csam: Csam::new(store, &format!("{prefix}.csam"), level_widths, widths.head, tag(ParamGroup::Csam))?,
            injection: SemanticInjection::new(
                store,
                &format!("{prefix}.inject"),
                widths.head,
                widths.semantic,
                tag(ParamGroup::Injection),
            )?,
            regressor: Regressor::new(
                store,
                &format!("{prefix}.regressor"),
                widths.head,
                widths.regressor,
                tag(ParamGroup::Regressor),
            )?,
        })
    }

    /// `sem` is used only when given; `fused` may be precomputed (and
    /// detached) by the caller.
    pub fn forward_fused(&self, fused: &Tensor, sem: Option<&Tensor>) -> Result<DimensionHeadOutput> {
        let refined = match sem {
            Some(s) => self.injection.forward(fused, s, true)?,
            None => fused.clone(),
        };
        self.regressor.forward(&refined)
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, sem: Option<&Tensor>) -> Result<DimensionHeadOutput> {
        self.forward_fused(&self.csam.forward(pyramid)?, sem)
    }
}

/// Frozen image encoder producing unit-norm global vectors.
pub trait SemanticEncoder: Send + Sync {
    fn width(&self) -> usize;
    /// (B, 3, H, W) in [0, 1] to (B, width), each row of unit L2 norm.
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
}

/// Small randomly initialized conv encoder whose weights never train.
pub struct RandomConvEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl RandomConvEncoder {
    pub const NAME: &'static str = "random-conv";

    pub fn new(width: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new_frozen(dtype, seed);
        let tag = ParamTag::new(ParamGroup::Fusion, None);
        let chans = [3, 16, 32, 32];
        let convs = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| Conv2d::new(&mut store, &format!("sem.conv{i}"), c[0], c[1], 3, 2, 1, tag))
            .collect::<Result<_>>()?;
        let proj = Linear::with_init(
            &mut store,
            "sem.proj",
            2 * chans[3],
            width,
            Init::Normal((1.0 / (2 * chans[3]) as f64).sqrt()),
            Init::Zeros,
            tag,
        )?;
        Ok(RandomConvEncoder { convs, proj })
    }
}

impl SemanticEncoder for RandomConvEncoder {
    fn width(&self) -> usize {
        self.proj.out_dim()
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.affine(2.0, -1.0)?;
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        // Mean and max pooling keep the vector informative for flat images.
        let (b, c, _, _) = h.dims4()?;
        let flat = h.reshape((b, c, ()))?;
        let pooled = Tensor::cat(&[flat.mean(2)?, flat.max(2)?], 1)?;
        let v = (self.proj.forward(&pooled)? + 1e-3)?;
        l2_normalize_last(&v, 1e-12)
    }
}

/// Looks up a semantic encoder by name. `"none"` yields no encoder.
pub fn semantic_encoder(
    name: &str,
    width: usize,
    seed: u64,
    dtype: DType,
) -> Result<Option<Box<dyn SemanticEncoder>>> {
    match name {
        RandomConvEncoder::NAME => Ok(Some(Box::new(RandomConvEncoder::new(width, seed, dtype)?))),
        "none" => Ok(None),
        other => Err(Error::Config(format!(
            "unknown semantic encoder `{other}`; registered: {}, none",
            RandomConvEncoder::NAME
        ))),
    }
}

pub fn encode_semantics(encoder: Option<&dyn SemanticEncoder>, image: &ImageTensor, dtype: DType) -> Result<Tensor> {
    let enc = encoder.ok_or_else(|| Error::Config("semantic features requested but no encoder is registered".into()))?;
    enc.encode(&image.to_tensor(dtype)?.unsqueeze(0)?)?.squeeze(0).map_err(Into::into)
}
