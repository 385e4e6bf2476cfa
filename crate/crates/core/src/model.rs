//! Weight branch, fusion and the end-to-end model.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::backbone::{Backbone, FeaturePyramid};
use crate::heads::{semantic_encoder, DimensionHead, HeadWidths, SemanticEncoder};
use crate::nn::ops::softplus;
use crate::nn::{Conv2d, Init, Linear, ParamGroup, ParamStore, ParamTag, TensorData};
use crate::registry::{validate_config, Category, Dimension, FusionMode, ModelConfig};
use crate::{Error, ImageTensor, Result};

/// Strided conv encoder, global pooling, linear, softplus. Starts close to
/// all-ones weights.
#[derive(Debug, Clone)]
pub struct WeightBranch {
    convs: Vec<Conv2d>,
    out: Linear,
}

impl WeightBranch {
    pub fn new(store: &mut ParamStore, width: usize, dims: usize) -> Result<Self> {
        let tag = ParamTag::new(ParamGroup::WeightBranch, None);
        let convs = [3, width, width]
            .iter()
            .zip([width, width, width])
            .enumerate()
            .map(|(i, (&c, o))| Conv2d::new(store, &format!("weights.conv{i}"), c, o, 3, 2, 1, tag))
            .collect::<Result<_>>()?;
        // softplus(ln(e - 1)) = 1
        let unit_bias = (std::f64::consts::E - 1.0).ln();
        let out = Linear::with_init(
            store,
            "weights.out",
            width,
            dims,
            Init::Normal(0.01),
            Init::Constant(unit_bias),
            tag,
        )?;
        Ok(WeightBranch { convs, out })
    }

    /// (B, 3, H, W) to strictly positive (B, D).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        let (b, c, _, _) = h.dims4()?;
        let pooled = h.reshape((b, c, ()))?.mean(2)?;
        softplus(&self.out.forward(&pooled)?)
    }
}

/// Three-layer MLP from the weighted dimension outputs to one score.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub mode: FusionMode,
    layers: [Linear; 3],
}

impl Fusion {
    pub fn new(store: &mut ParamStore, mode: FusionMode, input: usize, width: usize) -> Result<Self> {
        let tag = ParamTag::new(ParamGroup::Fusion, None);
        Ok(Fusion {
            mode,
            layers: [
                Linear::new(store, "fusion.fc0", input, width, tag)?,
                Linear::new(store, "fusion.fc1", width, width, tag)?,
                Linear::with_init(
                    store,
                    "fusion.fc2",
                    width,
                    1,
                    Init::Normal((1.0 / width as f64).sqrt()),
                    Init::Constant(0.5),
                    tag,
                )?,
            ],
        })
    }

    /// The MLP input: `w ⊙ s` (scalar mode) or `concat_D w_D·ḡ_D`
    /// (feature mode).
    pub fn input(&self, heads: &HeadOutputs, weights: &Tensor) -> Result<Tensor> {
        match self.mode {
            FusionMode::Scalar => Ok((&heads.scores * weights)?),
            FusionMode::Feature => {
                if heads.features.is_empty() {
                    return Err(Error::InvalidInput("feature fusion needs dimension features".into()));
                }
                let parts = heads
                    .features
                    .iter()
                    .enumerate()
                    .map(|(d, g)| Ok(g.broadcast_mul(&weights.narrow(1, d, 1)?)?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::cat(&parts, 1)?)
            }
        }
    }

    pub fn mlp(&self, input: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(input)?.relu()?;
        let h = self.layers[1].forward(&h)?.relu()?;
        Ok(self.layers[2].forward(&h)?.squeeze(1)?)
    }

    /// Overall score (B,).
    pub fn forward(&self, heads: &HeadOutputs, weights: &Tensor) -> Result<Tensor> {
        self.mlp(&self.input(heads, weights)?)
    }
}

/// Batched head outputs in active-dimension order.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// (B, D)
    pub scores: Tensor,
    /// D tensors of shape (B, R); these are ḡ_D.
    pub features: Vec<Tensor>,
}

/// Batched output of a full forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub heads: HeadOutputs,
    /// (B, D), strictly positive.
    pub weights: Tensor,
    /// (B,)
    pub overall: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Apply semantic injection (requires `use_semantic_features`).
    pub inject: bool,
    /// Cut the graph after cross-scale attention, so no gradient reaches
    /// the backbones or attention modules.
    pub detach_trunk: bool,
}

/// Per-image weights keyed by dimension name, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// One image's scores. Serializes as
/// `{"overall": f, "weights": {name: w}, "dims": {name: s}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityOutput {
    pub overall: f64,
    pub dim_scores: Vec<f64>,
    pub dim_features: Vec<Vec<f64>>,
    pub weights: WeightVector,
}

struct Named<'a>(&'a [String], &'a [f64]);

impl Serialize for Named<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in self.0.iter().zip(self.1) {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl Serialize for QualityOutput {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(3))?;
        m.serialize_entry("overall", &self.overall)?;
        m.serialize_entry("weights", &Named(&self.weights.names, &self.weights.values))?;
        m.serialize_entry("dims", &Named(&self.weights.names, &self.dim_scores))?;
        m.end()
    }
}

/// The multi-dimensional quality model. Parameters live in one
/// [`ParamStore`]; the layers hold handles into it.
pub struct Mdiqa {
    cfg: ModelConfig,
    store: ParamStore,
    dims: Vec<Dimension>,
    technical: Option<Backbone>,
    aesthetic: Option<Backbone>,
    heads: Vec<DimensionHead>,
    weight_branch: WeightBranch,
    fusion: Fusion,
    encoder: Option<Box<dyn SemanticEncoder>>,
    /// Whether inference applies semantic injection; set once stage 2 has
    /// trained the injection layers.
    pub injection_trained: bool,
}

impl Mdiqa {
    pub fn new(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        Self::build(cfg, ParamStore::new(dtype, cfg.init_seed))
    }

    /// Every parameter detached: gradients reach inputs only. Used for
    /// critics.
    pub fn new_frozen(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        Self::build(cfg, ParamStore::new_frozen(dtype, cfg.init_seed))
    }

    fn build(cfg: &ModelConfig, mut store: ParamStore) -> Result<Self> {
        let cfg = validate_config(cfg.clone())?;
        let dtype = store.dtype();
        let dims = cfg.active_dimensions();
        let f = cfg.flags;
        let technical = f
            .use_technical
            .then(|| Backbone::new(&mut store, Category::Technical, &cfg.backbone_widths))
            .transpose()?;
        let aesthetic = f
            .use_aesthetic
            .then(|| Backbone::new(&mut store, Category::Aesthetic, &cfg.backbone_widths))
            .transpose()?;
        let widths = HeadWidths {
            head: cfg.head_width,
            regressor: cfg.regressor_width,
            semantic: cfg.semantic_width,
        };
        let heads = dims
            .iter()
            .map(|d| DimensionHead::new(&mut store, &d.name, d.category, &cfg.backbone_widths, widths))
            .collect::<Result<_>>()?;
        let weight_branch = WeightBranch::new(&mut store, cfg.weight_branch_width, dims.len())?;
        let fusion_in = match cfg.fusion_mode {
            FusionMode::Scalar => dims.len(),
            FusionMode::Feature => dims.len() * cfg.regressor_width,
        };
        let fusion = Fusion::new(&mut store, cfg.fusion_mode, fusion_in, cfg.fusion_width)?;
        let encoder = semantic_encoder(&cfg.semantic_encoder, cfg.semantic_width, cfg.semantic_seed, dtype)?;
        if f.use_semantic_features && encoder.is_none() {
            return Err(Error::Config(
                "use_semantic_features is set but no semantic encoder is configured".into(),
            ));
        }
        if let Some(e) = &encoder {
            if e.width() != cfg.semantic_width {
                return Err(Error::Config(format!(
                    "semantic encoder width {} does not match semantic_width {}",
                    e.width(),
                    cfg.semantic_width
                )));
            }
        }
        Ok(Mdiqa {
            cfg,
            store,
            dims,
            technical,
            aesthetic,
            heads,
            weight_branch,
            fusion,
            encoder,
            injection_trained: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Active dimensions, in the order of every score and weight vector.
    pub fn dimensions(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn dim_names(&self) -> Vec<String> {
        self.dims.iter().map(|d| d.name.clone()).collect()
    }

    pub fn heads(&self) -> &[DimensionHead] {
        &self.heads
    }

    pub fn backbone(&self, branch: Category) -> Option<&Backbone> {
        match branch {
            Category::Technical => self.technical.as_ref(),
            Category::Aesthetic => self.aesthetic.as_ref(),
        }
    }

    pub fn weight_branch(&self) -> &WeightBranch {
        &self.weight_branch
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn encoder(&self) -> Option<&dyn SemanticEncoder> {
        self.encoder.as_deref()
    }

    /// Inference-time options: injection follows training state.
    pub fn inference_options(&self) -> ForwardOptions {
        ForwardOptions {
            inject: self.injection_trained && self.cfg.flags.use_semantic_features,
            detach_trunk: false,
        }
    }

    pub fn export(&self) -> Result<BTreeMap<String, TensorData>> {
        self.store.export()
    }

    pub fn import(&self, values: &BTreeMap<String, TensorData>) -> Result<()> {
        self.store.import(values)
    }

    fn pyramids(&self, x: &Tensor) -> Result<(Option<FeaturePyramid>, Option<FeaturePyramid>)> {
        let t = self.technical.as_ref().map(|b| b.extract_pyramid(x)).transpose()?;
        let a = self.aesthetic.as_ref().map(|b| b.extract_pyramid(x)).transpose()?;
        Ok((t, a))
    }

    /// (B, 3, H, W) batch to per-dimension scores and features.
    pub fn head_outputs(&self, x: &Tensor, opts: ForwardOptions) -> Result<HeadOutputs> {
        let (t, a) = self.pyramids(x)?;
        let sem = if opts.inject {
            let enc = self.encoder.as_ref().ok_or_else(|| {
                Error::Config("semantic injection requested but no encoder is registered".into())
            })?;
            Some(enc.encode(x)?)
        } else {
            None
        };
        let mut scores = Vec::with_capacity(self.heads.len());
        let mut features = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let pyr = match head.category {
                Category::Technical => t.as_ref(),
                Category::Aesthetic => a.as_ref(),
            }
            .expect("backbone exists for every active head");
            let mut fused = head.csam.forward(pyr)?;
            if opts.detach_trunk {
                fused = fused.detach();
            }
            let out = head.forward_fused(&fused, sem.as_ref())?;
            scores.push(out.score.unsqueeze(1)?);
            features.push(out.feature);
        }
        Ok(HeadOutputs {
            scores: Tensor::cat(&scores, 1)?,
            features,
        })
    }

    /// Positive (B, D) weights, or all ones when the branch is disabled.
    pub fn predict_weights(&self, x: &Tensor) -> Result<Tensor> {
        if self.cfg.flags.use_weight_branch {
            self.weight_branch.forward(x)
        } else {
            let b = x.dim(0)?;
            Ok(Tensor::ones((b, self.dims.len()), x.dtype(), x.device())?)
        }
    }

    pub fn fuse(&self, heads: &HeadOutputs, weights: &Tensor) -> Result<Tensor> {
        self.fusion.forward(heads, weights)
    }

    pub fn forward_with(&self, x: &Tensor, opts: ForwardOptions) -> Result<ModelOutput> {
        let heads = self.head_outputs(x, opts)?;
        let weights = self.predict_weights(x)?;
        let overall = self.fuse(&heads, &weights)?;
        Ok(ModelOutput {
            heads,
            weights,
            overall,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        self.forward_with(x, self.inference_options())
    }

    /// Scores a list of images of equal size.
    pub fn score_images(&self, images: &[ImageTensor]) -> Result<Vec<QualityOutput>> {
        let x = ImageTensor::batch(images, self.dtype())?;
        let out = self.forward(&x)?;
        to_quality_outputs(&out, &self.dim_names())
    }

    pub fn forward_full(&self, image: &ImageTensor) -> Result<QualityOutput> {
        Ok(self.score_images(std::slice::from_ref(image))?.remove(0))
    }
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn to_quality_outputs(out: &ModelOutput, names: &[String]) -> Result<Vec<QualityOutput>> {
    let scores = rows(&out.heads.scores)?;
    let weights = rows(&out.weights)?;
    let overall = out.overall.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let features = out.heads.features.iter().map(rows).collect::<Result<Vec<_>>>()?;
    Ok((0..overall.len())
        .map(|i| QualityOutput {
            overall: overall[i],
            dim_scores: scores[i].clone(),
            dim_features: features.iter().map(|f| f[i].clone()).collect(),
            weights: WeightVector {
                names: names.to_vec(),
                values: weights[i].clone(),
            },
        })
        .collect())
}
