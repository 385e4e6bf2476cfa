//! Finite-difference checks of every differentiable module. Each returns
//! the worst norm-wise relative error.

use candle_core::{DType, Var};
use mdiqa::backbone::{FeaturePyramid, Glp};
use mdiqa::heads::{Csam, Regressor, SemanticInjection};
use mdiqa::model::{Fusion, HeadOutputs, WeightBranch};
use mdiqa::nn::{ParamGroup, ParamStore, ParamTag};
use mdiqa::registry::{Category, FusionMode};
use mdiqa::{Mdiqa, ModelConfig};

use super::{gradcheck, project, uniform, var};

pub const MODULE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

fn tag(g: ParamGroup) -> ParamTag {
    ParamTag::new(g, Some(Category::Technical))
}

fn store_vars(store: &ParamStore) -> Vec<Var> {
    store.select(|_| true).into_iter().map(|(_, v)| v).collect()
}

/// Replaces every parameter with a seeded uniform draw, so zero-initialized
/// layers do not hide gradients.
fn randomize(store: &ParamStore, scale: f64, seed: u64) {
    for (i, v) in store_vars(store).iter().enumerate() {
        v.set(&uniform(v.dims(), -scale, scale, seed + i as u64)).unwrap();
    }
}

pub fn gated_local_pooling() -> f64 {
    let mut store = ParamStore::new(DType::F64, 1);
    let glp = Glp::new(&mut store, "glp", 3, tag(ParamGroup::Backbone)).unwrap();
    let x = var(&[2, 3, 7, 5], -1.0, 1.0, 2);
    let params = store_vars(&store);
    let mut vars: Vec<&Var> = params.iter().collect();
    vars.push(&x);
    gradcheck(&vars, || project(&glp.forward(&x, (3, 2)).unwrap(), 3))
}

pub fn cross_scale_attention() -> f64 {
    let mut store = ParamStore::new(DType::F64, 4);
    let csam = Csam::new(&mut store, "csam", &[3, 4, 5], 6, tag(ParamGroup::Csam)).unwrap();
    let levels: Vec<Var> = [3, 4, 5]
        .iter()
        .enumerate()
        .map(|(i, &c)| var(&[2, c, 2, 3], -1.0, 1.0, 10 + i as u64))
        .collect();
    let params = store_vars(&store);
    let mut vars: Vec<&Var> = params.iter().collect();
    vars.extend(levels.iter());
    gradcheck(&vars, || {
        let pyr = FeaturePyramid {
            levels: levels.iter().map(|v| v.as_tensor().clone()).collect(),
            branch: Category::Technical,
        };
        project(&csam.forward(&pyr).unwrap(), 5)
    })
}

pub fn semantic_injection() -> f64 {
    let mut store = ParamStore::new(DType::F64, 6);
    let inj = SemanticInjection::new(&mut store, "inject", 4, 3, tag(ParamGroup::Injection)).unwrap();
    randomize(&store, 0.8, 60);
    let fused = var(&[2, 5, 4], -1.0, 1.0, 7);
    let sem = var(&[2, 3], -1.0, 1.0, 8);
    let params = store_vars(&store);
    let mut vars: Vec<&Var> = params.iter().collect();
    vars.extend([&fused, &sem]);
    gradcheck(&vars, || project(&inj.forward(&fused, &sem, true).unwrap(), 9))
}

pub fn dimension_regressor() -> f64 {
    let mut store = ParamStore::new(DType::F64, 11);
    let reg = Regressor::new(&mut store, "reg", 4, 5, tag(ParamGroup::Regressor)).unwrap();
    let tokens = var(&[3, 6, 4], -1.0, 1.0, 12);
    let params = store_vars(&store);
    let mut vars: Vec<&Var> = params.iter().collect();
    vars.push(&tokens);
    gradcheck(&vars, || {
        let out = reg.forward(&tokens).unwrap();
        (project(&out.score, 13) + project(&out.feature, 14)).unwrap()
    })
}

pub fn weight_branch() -> f64 {
    let mut store = ParamStore::new(DType::F64, 15);
    let wb = WeightBranch::new(&mut store, 3, 4).unwrap();
    randomize(&store, 0.6, 150);
    let x = var(&[2, 3, 9, 8], 0.0, 1.0, 16);
    let params = store_vars(&store);
    let mut vars: Vec<&Var> = params.iter().collect();
    vars.push(&x);
    gradcheck(&vars, || project(&wb.forward(&x).unwrap(), 17))
}

pub fn fusion(mode: FusionMode) -> f64 {
    let input = match mode {
        FusionMode::Scalar => 3,
        FusionMode::Feature => 3 * 2,
    };
    let mut store = ParamStore::new(DType::F64, 18);
    let fusion = Fusion::new(&mut store, mode, input, 5).unwrap();
    let scores = var(&[2, 3], -1.0, 1.0, 19);
    let feats: Vec<Var> = (0..3).map(|d| var(&[2, 2], -1.0, 1.0, 20 + d)).collect();
    let w = var(&[2, 3], 0.5, 1.5, 23);
    let params = store_vars(&store);
    let mut vars: Vec<&Var> = params.iter().collect();
    vars.extend([&scores, &w]);
    if mode == FusionMode::Feature {
        vars.extend(feats.iter());
    }
    gradcheck(&vars, || {
        let heads = HeadOutputs {
            scores: scores.as_tensor().clone(),
            features: feats.iter().map(|f| f.as_tensor().clone()).collect(),
        };
        project(&fusion.forward(&heads, &w).unwrap(), 24)
    })
}

/// d(overall)/d(pixels) through both backbones, every head with injection
/// on, the weight branch and fusion.
pub fn end_to_end_pixels() -> f64 {
    let cfg = ModelConfig {
        backbone_widths: vec![3, 4],
        head_width: 4,
        regressor_width: 4,
        semantic_width: 4,
        weight_branch_width: 3,
        fusion_width: 4,
        ..ModelConfig::tiny()
    };
    let mut model = Mdiqa::new(&cfg, DType::F64).unwrap();
    model.injection_trained = true;
    for (name, v) in model.store().select(|t| t.group == ParamGroup::Injection) {
        if name.ends_with("fc2.weight") {
            v.set(&uniform(v.dims(), -0.5, 0.5, 30)).unwrap();
        }
    }
    let x = var(&[1, 3, 16, 16], 0.1, 0.9, 31);
    gradcheck(&[&x], || model.forward(&x).unwrap().overall.sum_all().unwrap())
}

/// `(name, error, tolerance)` for every check.
pub fn all() -> Vec<(&'static str, f64, f64)> {
    vec![
        ("glp", gated_local_pooling(), MODULE_TOL),
        ("csam", cross_scale_attention(), MODULE_TOL),
        ("injection", semantic_injection(), MODULE_TOL),
        ("regressor", dimension_regressor(), MODULE_TOL),
        ("weight branch", weight_branch(), MODULE_TOL),
        ("fusion (scalar)", fusion(FusionMode::Scalar), MODULE_TOL),
        ("fusion (feature)", fusion(FusionMode::Feature), MODULE_TOL),
        ("end to end", end_to_end_pixels(), END_TO_END_TOL),
    ]
}
