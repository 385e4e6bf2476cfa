//! Dimension taxonomy and model configuration.
//!
//! The registry order is the index layout of every score, weight and label
//! vector in the crate. Nothing addresses a dimension except through it.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TECHNICAL: [&str; 5] = [
    "sharpness",
    "noisiness",
    "brightness",
    "contrast",
    "colorfulness",
];

pub const AESTHETIC: [&str; 4] = ["composition", "light", "color", "content"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Technical,
    Aesthetic,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Technical => "technical",
            Category::Aesthetic => "aesthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionRegistry {
    pub technical: Vec<String>,
    pub aesthetic: Vec<String>,
}

/// One dimension resolved against a registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dimension {
    pub name: String,
    pub category: Category,
    /// Position in the full registry order.
    pub index: usize,
}

impl Default for DimensionRegistry {
    fn default() -> Self {
        default_registry()
    }
}

pub fn default_registry() -> DimensionRegistry {
    DimensionRegistry {
        technical: TECHNICAL.iter().map(|s| s.to_string()).collect(),
        aesthetic: AESTHETIC.iter().map(|s| s.to_string()).collect(),
    }
}

impl DimensionRegistry {
    /// Registry with the fixed technical names and custom aesthetic names.
    pub fn with_aesthetic(names: [&str; 4]) -> Result<Self> {
        let reg = DimensionRegistry {
            technical: TECHNICAL.iter().map(|s| s.to_string()).collect(),
            aesthetic: names.iter().map(|s| s.to_string()).collect(),
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.technical.len() != TECHNICAL.len()
            || self.technical.iter().zip(TECHNICAL).any(|(a, b)| a != b)
        {
            return Err(Error::Config(format!(
                "technical dimensions must be {TECHNICAL:?} in this order"
            )));
        }
        if self.aesthetic.len() != AESTHETIC.len() {
            return Err(Error::Config(format!(
                "expected {} aesthetic dimensions, got {}",
                AESTHETIC.len(),
                self.aesthetic.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in self.names() {
            if name.is_empty() {
                return Err(Error::Config("empty dimension name".into()));
            }
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate dimension name `{name}`")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.technical.len() + self.aesthetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All names in index order: technical first, then aesthetic.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.technical
            .iter()
            .chain(self.aesthetic.iter())
            .map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().position(|n| n == name)
    }

    pub fn category_of(&self, index: usize) -> Category {
        if index < self.technical.len() {
            Category::Technical
        } else {
            Category::Aesthetic
        }
    }

    pub fn name(&self, index: usize) -> &str {
        if index < self.technical.len() {
            &self.technical[index]
        } else {
            &self.aesthetic[index - self.technical.len()]
        }
    }

    /// Dimensions left after the category toggles, in registry order.
    pub fn active(&self, use_technical: bool, use_aesthetic: bool) -> Vec<Dimension> {
        (0..self.len())
            .filter(|&i| match self.category_of(i) {
                Category::Technical => use_technical,
                Category::Aesthetic => use_aesthetic,
            })
            .map(|i| Dimension {
                name: self.name(i).to_string(),
                category: self.category_of(i),
                index: i,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Fuse the weighted scalar scores `w ⊙ s`.
    Scalar,
    /// Fuse the weighted per-dimension feature vectors.
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_weight_branch: bool,
    pub finetune_regressor: bool,
    pub use_semantic_features: bool,
    pub use_technical: bool,
    pub use_aesthetic: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_weight_branch: true,
            finetune_regressor: true,
            use_semantic_features: true,
            use_technical: true,
            use_aesthetic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dimensions: DimensionRegistry,
    /// Channel widths of the backbone levels, finest first. Level `i` has
    /// stride `4 * 2^i`, so the length is the pyramid scale count L.
    pub backbone_widths: Vec<usize>,
    pub head_width: usize,
    pub regressor_width: usize,
    pub semantic_width: usize,
    pub semantic_encoder: String,
    pub weight_branch_width: usize,
    pub fusion_width: usize,
    pub fusion_mode: FusionMode,
    pub flags: AblationFlags,
    pub crop: usize,
    pub init_seed: u64,
    pub semantic_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 3 levels with widths 32/64/128.
    pub fn desk() -> Self {
        ModelConfig {
            dimensions: default_registry(),
            backbone_widths: vec![32, 64, 128],
            head_width: 64,
            regressor_width: 64,
            semantic_width: 64,
            semantic_encoder: "random-conv".into(),
            weight_branch_width: 32,
            fusion_width: 64,
            fusion_mode: FusionMode::Scalar,
            flags: AblationFlags::default(),
            crop: 96,
            init_seed: 0,
            semantic_seed: 1,
        }
    }

    /// Small configuration used for tests and the acceptance runs.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone_widths: vec![16, 32, 48],
            head_width: 32,
            regressor_width: 32,
            semantic_width: 32,
            weight_branch_width: 16,
            fusion_width: 32,
            ..ModelConfig::desk()
        }
    }

    pub fn scale_count(&self) -> usize {
        self.backbone_widths.len()
    }

    /// Smallest accepted input side: the coarsest level must be at least 2×2.
    pub fn min_input_size(&self) -> usize {
        1 << (self.scale_count() + 2)
    }

    pub fn active_dimensions(&self) -> Vec<Dimension> {
        self.dimensions
            .active(self.flags.use_technical, self.flags.use_aesthetic)
    }
}

/// Checks a configuration and fills the semantic encoder default.
pub fn validate_config(mut cfg: ModelConfig) -> Result<ModelConfig> {
    cfg.dimensions.validate()?;
    if !cfg.flags.use_technical && !cfg.flags.use_aesthetic {
        return Err(Error::Config("no dimensions enabled".into()));
    }
    if cfg.scale_count() < 2 {
        return Err(Error::Config(format!(
            "at least 2 pyramid levels required, got {}",
            cfg.scale_count()
        )));
    }
    let widths = [
        ("backbone width", cfg.backbone_widths.iter().copied().min().unwrap_or(0)),
        ("head_width", cfg.head_width),
        ("regressor_width", cfg.regressor_width),
        ("semantic_width", cfg.semantic_width),
        ("weight_branch_width", cfg.weight_branch_width),
        ("fusion_width", cfg.fusion_width),
    ];
    for (name, w) in widths {
        if w == 0 {
            return Err(Error::Config(format!("{name} must be positive")));
        }
    }
    if cfg.crop < cfg.min_input_size() {
        return Err(Error::Config(format!(
            "crop {} is below the minimum input size {}",
            cfg.crop,
            cfg.min_input_size()
        )));
    }
    if cfg.semantic_encoder.is_empty() {
        cfg.semantic_encoder = "random-conv".into();
    }
    Ok(cfg)
}
