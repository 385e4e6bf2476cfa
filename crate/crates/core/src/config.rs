//! The JSON configuration file.
//!
//! Every numeric hyperparameter lives here; command-line flags only select
//! files and override seeds or ratios. All sections are optional in the
//! file and fall back to the desk-scale defaults.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "model": { "backbone_widths": [32, 64, 128], "crop": 96, ... },
//!   "data": { "samples": 1000, "size": 96, "presence": 0.7, "max_severity": 1.0, "seed": 7 },
//!   "stage1": { "epochs": 8, "aesthetic_epochs": 4, "lr": 3e-5, ... },
//!   "stage2": { "epochs": 5, "lr": 1e-5, ... },
//!   "restoration": { "batch_size": 12, "lr": 3e-5, "iterations": 60000, ... },
//!   "ratios": { "sharpness": 2.0 },
//!   "eval": { "splits": 10, "train_ratio": 0.8, "seed": 0 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DistortionKind, DistortionSpec, SyntheticConfig};
use crate::losses::RatioOverride;
use crate::metrics::EvalConfig;
use crate::registry::{validate_config, ModelConfig};
use crate::{Error, Result};

/// Optimization settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Epochs for the technical branch (stage 1) or the whole stage (stage 2).
    pub epochs: usize,
    /// Epochs for the aesthetic branch in stage 1; ignored in stage 2.
    pub aesthetic_epochs: usize,
    pub lr: f64,
    /// Cosine annealing ends here.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub alpha_nin: f64,
    pub flip: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 8,
            aesthetic_epochs: 4,
            lr: 3e-5,
            lr_floor: 0.0,
            weight_decay: 1e-5,
            batch_size: 16,
            alpha_nin: 1.0,
            flip: true,
        }
    }
}

/// Which restoration loss variant a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// L1 only.
    None,
    /// L1 plus the no-reference critic loss.
    Nr,
    /// L1 plus the full-reference critic loss.
    Fr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorationConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub iterations: usize,
    pub lambda_org: f64,
    pub lambda_nr: f64,
    pub lambda_fr: f64,
    pub variant: Variant,
    /// Degradation applied to clean images to build training pairs.
    pub degradation: Vec<DistortionSpec>,
    pub size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub width: usize,
    pub depth: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        RestorationConfig {
            batch_size: 8,
            lr: 1e-3,
            optimizer: "adam".into(),
            iterations: 200,
            lambda_org: 1.0,
            lambda_nr: 1.0,
            lambda_fr: 5.0,
            variant: Variant::Nr,
            degradation: vec![
                DistortionSpec::new(DistortionKind::Blur, 0.3),
                DistortionSpec::new(DistortionKind::Noise, 0.3),
            ],
            size: 64,
            train_images: 64,
            val_images: 16,
            width: 16,
            depth: 8,
            log_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdiqaConfig {
    /// Batch order, augmentation and split seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub restoration: RestorationConfig,
    pub ratios: RatioOverride,
    pub eval: EvalConfig,
}

impl Default for MdiqaConfig {
    fn default() -> Self {
        MdiqaConfig::desk()
    }
}

impl MdiqaConfig {
    /// Toy-scale settings that train in minutes on one CPU core.
    pub fn desk() -> Self {
        MdiqaConfig {
            seed: 0,
            model: ModelConfig::desk(),
            data: SyntheticConfig::default(),
            stage1: StageConfig {
                epochs: 32,
                aesthetic_epochs: 32,
                lr: 2e-3,
                lr_floor: 5e-5,
                weight_decay: 1e-5,
                batch_size: 16,
                alpha_nin: 1.0,
                flip: true,
            },
            stage2: StageConfig {
                epochs: 6,
                aesthetic_epochs: 0,
                lr: 1e-3,
                lr_floor: 2e-5,
                weight_decay: 1e-5,
                batch_size: 16,
                alpha_nin: 1.0,
                flip: true,
            },
            restoration: RestorationConfig::default(),
            ratios: RatioOverride::default(),
            eval: EvalConfig::default(),
        }
    }

    /// The published full-scale recipe.
    pub fn full_scale() -> Self {
        MdiqaConfig {
            model: ModelConfig {
                crop: 384,
                ..ModelConfig::desk()
            },
            stage1: StageConfig {
                epochs: 8,
                aesthetic_epochs: 4,
                lr: 3e-5,
                lr_floor: 0.0,
                weight_decay: 1e-5,
                batch_size: 16,
                alpha_nin: 1.0,
                flip: true,
            },
            stage2: StageConfig {
                epochs: 5,
                aesthetic_epochs: 0,
                lr: 1e-5,
                lr_floor: 0.0,
                weight_decay: 1e-5,
                batch_size: 16,
                alpha_nin: 1.0,
                flip: true,
            },
            restoration: RestorationConfig {
                batch_size: 12,
                lr: 3e-5,
                iterations: 60_000,
                lambda_nr: 1.0,
                lambda_fr: 5.0,
                ..RestorationConfig::default()
            },
            ..MdiqaConfig::desk()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: MdiqaConfig = serde_json::from_str(&text)?;
        cfg.validate()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(mut self) -> Result<Self> {
        self.model = validate_config(self.model)?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.batch_size == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be positive")));
            }
            if !(s.lr > 0.0) || s.lr_floor < 0.0 || s.lr_floor > s.lr || s.weight_decay < 0.0 {
                return Err(Error::Config(format!(
                    "{name}: need 0 <= lr_floor <= lr, lr > 0 and weight_decay >= 0"
                )));
            }
        }
        let r = &self.restoration;
        if r.optimizer != "adam" {
            return Err(Error::Config(format!(
                "restoration.optimizer `{}` is not supported (use adam)",
                r.optimizer
            )));
        }
        if r.batch_size == 0 || r.depth < 2 || r.width == 0 {
            return Err(Error::Config("restoration batch_size, width must be positive and depth >= 2".into()));
        }
        self.ratios.factors(&self.model.dimensions.names().map(str::to_string).collect::<Vec<_>>())?;
        Ok(self)
    }

    /// Replaces every seed with values derived from `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        use crate::data::derive_seed;
        self.seed = seed;
        self.model.init_seed = derive_seed(seed, 1);
        self.model.semantic_seed = derive_seed(seed, 2);
        self.data.seed = derive_seed(seed, 3);
        self.restoration.seed = derive_seed(seed, 4);
        self.eval.seed = derive_seed(seed, 5);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_files() {
        let cfg = MdiqaConfig::full_scale();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<MdiqaConfig>(&text).unwrap(), cfg);
        let partial: MdiqaConfig = serde_json::from_str(r#"{"seed": 3, "stage1": {"epochs": 2}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.stage1.epochs, 2);
        assert_eq!(partial.stage1.lr, StageConfig::default().lr);
        assert_eq!(partial.model, ModelConfig::desk());
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(MdiqaConfig::desk().validate().is_ok());
        assert!(MdiqaConfig::full_scale().validate().is_ok());
        let mut c = MdiqaConfig::desk();
        c.ratios = RatioOverride::new().with("vibes", 2.0);
        assert!(c.validate().is_err());
        let mut c = MdiqaConfig::desk();
        c.restoration.optimizer = "sgd".into();
        assert!(c.validate().is_err());
        let mut c = MdiqaConfig::desk();
        c.stage2.lr_floor = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_override_touches_every_seed() {
        let mut a = MdiqaConfig::desk();
        a.set_seed(42);
        let mut b = MdiqaConfig::desk();
        b.set_seed(43);
        assert_ne!(a.model.init_seed, b.model.init_seed);
        assert_ne!(a.data.seed, b.data.seed);
        assert_ne!(a.restoration.seed, b.restoration.seed);
        assert_eq!(a.seed, 42);
    }
}
