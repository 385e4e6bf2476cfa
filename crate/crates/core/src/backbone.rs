//! Shared multi-scale feature extractors with gated local pooling.
//!
//! One backbone serves all technical heads and another serves all
//! aesthetic heads. A stride-2 stem followed by a stride-2 conv produces
//! level 0 at stride 4; each further level halves the resolution again.
//! Every level then passes through its own GLP, which gates the features
//! and average-pools them down to the coarsest level's size.

use candle_core::{DType, Tensor};

use crate::nn::ops::{pooling_matrix, sigmoid};
use crate::nn::{Conv2d, Init, ParamGroup, ParamStore, ParamTag};
use crate::registry::Category;
use crate::{Error, Result};

/// Ordered multi-scale feature maps, finest first. Each level is
/// (B, C_l, h, w).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub branch: Category,
}

impl FeaturePyramid {
    /// Spatial size shared by every level, or an error if they differ.
    pub fn spatial(&self) -> Result<(usize, usize)> {
        let mut size = None;
        for l in &self.levels {
            let (_, _, h, w) = l.dims4()?;
            match size {
                None => size = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(Error::InvalidInput(format!(
                        "pyramid levels have different spatial sizes {s:?} and {:?}",
                        (h, w)
                    )))
                }
                _ => {}
            }
        }
        size.ok_or_else(|| Error::InvalidInput("empty pyramid".into()))
    }

    pub fn detach(&self) -> Self {
        FeaturePyramid {
            levels: self.levels.iter().map(Tensor::detach).collect(),
            branch: self.branch,
        }
    }
}

/// Gated local pooling: `pool(x ⊙ σ(conv1x1(x)))`.
#[derive(Debug, Clone)]
pub struct Glp {
    pub gate: Conv2d,
}

impl Glp {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, tag: ParamTag) -> Result<Self> {
        let gate = Conv2d::new(store, &format!("{name}.gate"), channels, channels, 1, 1, 0, tag)?;
        Ok(Glp { gate })
    }

    pub fn gate_values(&self, x: &Tensor) -> Result<Tensor> {
        sigmoid(&self.gate.forward(x)?)
    }

    /// Windows follow adaptive partitioning, so any target no larger than
    /// the input is reachable.
    pub fn forward(&self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if target.0 > h || target.1 > w || target.0 == 0 || target.1 == 0 {
            return Err(Error::InvalidInput(format!(
                "cannot pool {h}x{w} down to {}x{}",
                target.0, target.1
            )));
        }
        let gated = (x * self.gate_values(x)?)?;
        adaptive_avg_pool(&gated, target)
    }
}

pub fn adaptive_avg_pool(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == target {
        return Ok(x.clone());
    }
    let ph = pooling_matrix(h, target.0, x.dtype())?;
    let pw = pooling_matrix(w, target.1, x.dtype())?.t()?;
    Ok(ph.broadcast_matmul(x)?.broadcast_matmul(&pw)?)
}

/// Fixed input standardization applied before the stem.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone)]
/// Stride-2 downsampling conv followed by a residual stride-1 conv.
struct Stage {
    down: Conv2d,
    refine: Conv2d,
}

/// Full-resolution conv, stride-2 conv, then one [`Stage`] per level, so
/// level `l` sits at stride `2^(l+2)`.
pub struct Backbone {
    branch: Category,
    stem: [Conv2d; 2],
    stages: Vec<Stage>,
    glps: Vec<Glp>,
}

impl Backbone {
    /// `widths[l]` is the channel count of level `l`.
    pub fn new(store: &mut ParamStore, branch: Category, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("backbone needs at least 2 levels".into()));
        }
        let tag = ParamTag::new(ParamGroup::Backbone, Some(branch));
        let prefix = format!("backbone.{}", branch.as_str());
        let stem = [
            Conv2d::new(store, &format!("{prefix}.stem0"), 3, widths[0], 3, 1, 1, tag)?,
            Conv2d::new(store, &format!("{prefix}.stem1"), widths[0], widths[0], 3, 2, 1, tag)?,
        ];
        let mut stages = Vec::with_capacity(widths.len());
        let mut glps = Vec::with_capacity(widths.len());
        let mut c_in = widths[0];
        for (l, &c) in widths.iter().enumerate() {
            stages.push(Stage {
                down: Conv2d::new(store, &format!("{prefix}.stage{l}.down"), c_in, c, 3, 2, 1, tag)?,
                refine: Conv2d::new(store, &format!("{prefix}.stage{l}.refine"), c, c, 3, 1, 1, tag)?,
            });
            glps.push(Glp::new(store, &format!("{prefix}.glp{l}"), c, tag)?);
            c_in = c;
        }
        Ok(Backbone {
            branch,
            stem,
            stages,
            glps,
        })
    }

    pub fn branch(&self) -> Category {
        self.branch
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.down.weight.dims()[0]).collect()
    }

    /// Smallest input side for which the coarsest level is at least 2×2.
    pub fn min_input_size(&self) -> usize {
        1 << (self.levels() + 2)
    }

    pub fn glp(&self, level: usize) -> &Glp {
        &self.glps[level]
    }

    /// Pre-GLP levels for a (B, 3, H, W) batch.
    pub fn extract_raw(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 input channels, got {c}")));
        }
        let min = self.min_input_size();
        if h < min || w < min {
            return Err(Error::InvalidInput(format!(
                "input {h}x{w} is smaller than the minimum size {min}x{min} for {} levels",
                self.levels()
            )));
        }
        let x = ((x - INPUT_MEAN)? * (1.0 / INPUT_STD))?;
        let mut cur = self.stem[0].forward(&x)?.relu()?;
        cur = self.stem[1].forward(&cur)?.relu()?;
        let mut out = Vec::with_capacity(self.levels());
        for stage in &self.stages {
            cur = stage.down.forward(&cur)?.relu()?;
            cur = (&cur + stage.refine.forward(&cur)?)?.relu()?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Post-GLP pyramid: every level pooled to the coarsest level's size.
    pub fn extract_pyramid(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let raw = self.extract_raw(x)?;
        let (_, _, th, tw) = raw.last().expect("at least 2 levels").dims4()?;
        let levels = raw
            .iter()
            .zip(&self.glps)
            .map(|(l, g)| g.forward(l, (th, tw)))
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid {
            levels,
            branch: self.branch,
        })
    }
}

/// Convenience for single images in the dtype of `store`.
pub fn extract_pyramid(
    backbone: &Backbone,
    image: &crate::ImageTensor,
    dtype: DType,
) -> Result<FeaturePyramid> {
    let x = image.to_tensor(dtype)?.unsqueeze(0)?;
    backbone.extract_pyramid(&x)
}

/// Gate whose 1×1 projection is zero with a constant bias, for tests and
/// probes of the saturation limit.
pub fn constant_gate_glp(store: &mut ParamStore, name: &str, channels: usize, bias: f64) -> Result<Glp> {
    let tag = ParamTag::new(ParamGroup::Backbone, None);
    let gate = Conv2d::with_init(
        store,
        &format!("{name}.gate"),
        [channels, channels, 1, 1],
        Init::Zeros,
        Init::Constant(bias),
        1,
        0,
        tag,
    )?;
    Ok(Glp { gate })
}
