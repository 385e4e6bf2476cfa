//! Small configurations shared by the training and acceptance tests.

use mdiqa::data::SyntheticConfig;
use mdiqa::{MdiqaConfig, ModelConfig};

/// A model and dataset small enough to train both stages in about a second.
pub fn micro_config() -> MdiqaConfig {
    let mut cfg = MdiqaConfig::desk();
    cfg.model = ModelConfig {
        backbone_widths: vec![4, 6],
        head_width: 6,
        regressor_width: 5,
        semantic_width: 4,
        weight_branch_width: 4,
        fusion_width: 6,
        crop: 32,
        ..ModelConfig::desk()
    };
    cfg.data = SyntheticConfig {
        samples: 12,
        size: 32,
        presence: 0.5,
        max_severity: 1.0,
        seed: 1,
    };
    cfg.stage1.epochs = 2;
    cfg.stage1.aesthetic_epochs = 1;
    cfg.stage1.batch_size = 4;
    cfg.stage2.epochs = 1;
    cfg.stage2.batch_size = 4;
    cfg
}
