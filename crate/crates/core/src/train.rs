//! Two-stage training, the optimizer, the schedule and checkpoints.
//!
//! Stage 1 trains backbones, cross-scale attention and regressors on
//! per-dimension labels with injection off. Stage 2 freezes backbones and
//! attention and trains the weight branch, fusion, injection and
//! (optionally) the regressors on overall labels.
//!
//! Batch order is a function of `(seed, stage, epoch)` and augmentation of
//! `(seed, stage, step, sample)`, so a run resumed from a checkpoint takes
//! exactly the steps the uninterrupted run would have taken.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{MdiqaConfig, RestorationConfig, StageConfig};
use crate::data::{augment_with, derive_seed, AugmentOptions};
use crate::losses::hybrid_iqa_loss;
use crate::model::{ForwardOptions, Mdiqa};
use crate::nn::{ParamGroup, ParamTag, TensorData};
use crate::registry::Category;
use crate::{Error, ImageTensor, MultiDimSample, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: String,
    pub peak_lr: f64,
    pub floor_lr: f64,
}

impl Schedule {
    pub fn cosine(peak_lr: f64, floor_lr: f64) -> Self {
        Schedule {
            kind: "cosine".into(),
            peak_lr,
            floor_lr,
        }
    }

    /// Learning rate at step `t` of `total`: `floor + (peak − floor)·(1 + cos(πt/T))/2`.
    pub fn lr(&self, t: u64, total: u64) -> f64 {
        let frac = if total == 0 { 0.0 } else { t as f64 / total as f64 };
        self.floor_lr + (self.peak_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Everything that defines one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: Vec<ParamGroup>,
    pub frozen: Vec<ParamGroup>,
    pub injection: bool,
    pub epochs: usize,
    /// Stage 1 only: the aesthetic branch stops training after this many
    /// epochs.
    pub aesthetic_epochs: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub schedule: Schedule,
}

impl StagePlan {
    pub fn stage1(cfg: &MdiqaConfig) -> Self {
        let s = &cfg.stage1;
        StagePlan {
            stage: Stage::One,
            trainable: vec![ParamGroup::Backbone, ParamGroup::Csam, ParamGroup::Regressor],
            frozen: vec![ParamGroup::Injection, ParamGroup::WeightBranch, ParamGroup::Fusion],
            injection: false,
            epochs: s.epochs,
            aesthetic_epochs: Some(s.aesthetic_epochs),
            lr: s.lr,
            weight_decay: s.weight_decay,
            batch_size: s.batch_size,
            crop: cfg.model.crop,
            schedule: Schedule::cosine(s.lr, s.lr_floor),
        }
    }

    pub fn stage2(cfg: &MdiqaConfig) -> Self {
        let s = &cfg.stage2;
        let mut trainable = vec![ParamGroup::Injection, ParamGroup::WeightBranch, ParamGroup::Fusion];
        let mut frozen = vec![ParamGroup::Backbone, ParamGroup::Csam];
        if cfg.model.flags.finetune_regressor {
            trainable.insert(0, ParamGroup::Regressor);
        } else {
            frozen.push(ParamGroup::Regressor);
        }
        if !cfg.model.flags.use_semantic_features {
            trainable.retain(|g| *g != ParamGroup::Injection);
            frozen.push(ParamGroup::Injection);
        }
        StagePlan {
            stage: Stage::Two,
            trainable,
            frozen,
            injection: cfg.model.flags.use_semantic_features,
            epochs: s.epochs,
            aesthetic_epochs: None,
            lr: s.lr,
            weight_decay: s.weight_decay,
            batch_size: s.batch_size,
            crop: cfg.model.crop,
            schedule: Schedule::cosine(s.lr, s.lr_floor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationPlan {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub iterations: usize,
    pub lambda_nr: f64,
    pub lambda_fr: f64,
}

impl RestorationPlan {
    pub fn new(r: &RestorationConfig) -> Self {
        RestorationPlan {
            batch_size: r.batch_size,
            lr: r.lr,
            optimizer: r.optimizer.clone(),
            iterations: r.iterations,
            lambda_nr: r.lambda_nr,
            lambda_fr: r.lambda_fr,
        }
    }
}

/// The complete training recipe of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub stage1: StagePlan,
    pub stage2: StagePlan,
    pub restoration: RestorationPlan,
}

impl Recipe {
    pub fn new(cfg: &MdiqaConfig) -> Self {
        Recipe {
            stage1: StagePlan::stage1(cfg),
            stage2: StagePlan::stage2(cfg),
            restoration: RestorationPlan::new(&cfg.restoration),
        }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name;
/// parameters without a gradient in a step are left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64, weight_decay: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in vars {
            let Some(g) = grads.get(var) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let p = var.as_tensor();
            let next = ((p * (1.0 - lr * weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn meta(&self) -> AdamMeta {
        AdamMeta {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
        }
    }

    pub fn export(&self) -> Result<(BTreeMap<String, TensorData>, BTreeMap<String, TensorData>)> {
        let conv = |map: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, TensorData>> {
            map.iter()
                .map(|(k, t)| Ok((k.clone(), crate::nn::params::tensor_data(t)?)))
                .collect()
        };
        Ok((conv(&self.m)?, conv(&self.v)?))
    }

    pub fn restore(
        meta: AdamMeta,
        m: &BTreeMap<String, TensorData>,
        v: &BTreeMap<String, TensorData>,
        dtype: DType,
    ) -> Result<Self> {
        let conv = |map: &BTreeMap<String, TensorData>| -> Result<BTreeMap<String, Tensor>> {
            map.iter()
                .map(|(k, d)| {
                    let t = Tensor::from_slice(&d.values, d.shape.as_slice(), &candle_core::Device::Cpu)?
                        .to_dtype(dtype)?;
                    Ok((k.clone(), t))
                })
                .collect()
        };
        Ok(AdamW {
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            t: meta.t,
            m: conv(m)?,
            v: conv(v)?,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop (with an incomplete checkpoint) once this many steps of the
    /// stage have run.
    pub max_steps: Option<u64>,
    pub log: Option<&'a mut dyn FnMut(&LogRecord)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub init: u64,
    pub semantic: u64,
    pub data: u64,
}

impl Seeds {
    fn of(cfg: &MdiqaConfig) -> Self {
        Seeds {
            train: cfg.seed,
            init: cfg.model.init_seed,
            semantic: cfg.model.semantic_seed,
            data: cfg.data.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MdiqaConfig,
    pub stage: Stage,
    pub completed: bool,
    /// Steps taken within `stage`.
    pub step: u64,
    pub injection_trained: bool,
    pub params: BTreeMap<String, TensorData>,
    pub adam: AdamMeta,
    pub adam_m: BTreeMap<String, TensorData>,
    pub adam_v: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    /// Rebuilds the model with trainable parameters.
    pub fn model(&self) -> Result<Mdiqa> {
        let mut m = Mdiqa::new(&self.config.model, DType::F32)?;
        m.import(&self.params)?;
        m.injection_trained = self.injection_trained;
        Ok(m)
    }

    /// Rebuilds the model with every parameter detached, for use as a loss.
    pub fn critic(&self, dtype: DType) -> Result<Mdiqa> {
        let mut m = Mdiqa::new_frozen(&self.config.model, dtype)?;
        m.import(&self.params)?;
        m.injection_trained = self.injection_trained;
        Ok(m)
    }
}

fn snapshot(model: &Mdiqa, cfg: &MdiqaConfig, stage: Stage, completed: bool, step: u64, opt: &AdamW) -> Result<Checkpoint> {
    let (adam_m, adam_v) = opt.export()?;
    Ok(Checkpoint {
        config: cfg.clone(),
        stage,
        completed,
        step,
        injection_trained: model.injection_trained,
        params: model.export()?,
        adam: opt.meta(),
        adam_m,
        adam_v,
    })
}

fn epoch_order(n: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let s = derive_seed(derive_seed(seed, u8::from(stage) as u64), epoch as u64);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    idx
}

fn batch_images(
    data: &[MultiDimSample],
    idx: &[usize],
    plan: &StagePlan,
    flip: bool,
    seed: u64,
    step: u64,
    dtype: DType,
) -> Result<Tensor> {
    let step_seed = derive_seed(derive_seed(seed ^ 0xA5A5, u8::from(plan.stage) as u64), step);
    let opts = AugmentOptions { crop: plan.crop, flip };
    let imgs: Vec<ImageTensor> = idx
        .iter()
        .map(|&i| augment_with(&data[i].image, opts, derive_seed(step_seed, i as u64)))
        .collect();
    ImageTensor::batch(&imgs, dtype)
}

struct Loop<'a> {
    cfg: &'a MdiqaConfig,
    plan: StagePlan,
    stage_cfg: &'a StageConfig,
    data: &'a [MultiDimSample],
    steps_per_epoch: u64,
    total_epochs: usize,
}

impl Loop<'_> {
    fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.total_epochs as u64
    }

    /// Runs steps `start..` and returns the step reached.
    fn run(
        &self,
        model: &Mdiqa,
        opt: &mut AdamW,
        start: u64,
        opts: &mut TrainOptions,
        step_fn: &dyn Fn(&Mdiqa, &[usize], &Tensor, usize) -> Result<(Tensor, Vec<(String, Var)>)>,
    ) -> Result<u64> {
        let total = self.total_steps();
        let end = opts.max_steps.map_or(total, |m| m.min(total));
        let b = self.plan.batch_size;
        let mut order: Option<(usize, Vec<usize>)> = None;
        let mut step = start;
        while step < end {
            let epoch = (step / self.steps_per_epoch) as usize;
            let k = (step % self.steps_per_epoch) as usize;
            if order.as_ref().map(|o| o.0) != Some(epoch) {
                order = Some((epoch, epoch_order(self.data.len(), self.cfg.seed, self.plan.stage, epoch)));
            }
            let perm = &order.as_ref().expect("set above").1;
            let idx = &perm[k * b..((k + 1) * b).min(perm.len())];
            let x = batch_images(self.data, idx, &self.plan, self.stage_cfg.flip, self.cfg.seed, step, model.dtype())?;
            let lr = self.plan.schedule.lr(step, total);
            let (loss, vars) = step_fn(model, idx, &x, epoch)?;
            let grads = loss.backward()?;
            opt.step(&vars, &grads, lr, self.plan.weight_decay)?;
            let loss = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !loss.is_finite() {
                return Err(Error::InvalidInput(format!("loss became {loss} at step {step}")));
            }
            step += 1;
            if let Some(log) = opts.log.as_mut() {
                log(&LogRecord { step, loss, lr });
            }
        }
        Ok(step)
    }
}

fn label_tensor(data: &[MultiDimSample], idx: &[usize], dim: usize, dtype: DType) -> Result<(Tensor, Vec<bool>)> {
    let mut v = Vec::with_capacity(idx.len());
    let mut mask = Vec::with_capacity(idx.len());
    for &i in idx {
        let l = data[i].labels.values[dim];
        v.push(l.unwrap_or(0.0));
        mask.push(l.is_some());
    }
    Ok((Tensor::from_vec(v, idx.len(), &candle_core::Device::Cpu)?.to_dtype(dtype)?, mask))
}

/// Trains backbones, attention and regressors on per-dimension labels.
/// With `resume`, continues an incomplete stage-1 checkpoint using its
/// stored configuration.
pub fn train_stage1(
    data: &[MultiDimSample],
    cfg: &MdiqaConfig,
    resume: Option<&Checkpoint>,
    mut opts: TrainOptions,
) -> Result<(Mdiqa, Checkpoint)> {
    let cfg = match resume {
        Some(ck) => {
            if ck.stage != Stage::One {
                return Err(Error::Checkpoint("cannot resume stage 1 from a stage-2 checkpoint".into()));
            }
            ck.config.clone()
        }
        None => cfg.clone().validate()?,
    };
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let plan = StagePlan::stage1(&cfg);
    let model = match resume {
        Some(ck) => ck.model()?,
        None => Mdiqa::new(&cfg.model, DType::F32)?,
    };
    let dims = model.dimensions().to_vec();
    let labelled = data
        .iter()
        .any(|s| dims.iter().any(|d| s.labels.values.get(d.index).copied().flatten().is_some()));
    if !labelled {
        return Err(Error::InvalidInput("no sample carries a label for any active dimension".into()));
    }
    if data.iter().any(|s| s.labels.values.len() != cfg.model.dimensions.len()) {
        return Err(Error::InvalidInput("label vectors do not match the dimension registry".into()));
    }

    let f = cfg.model.flags;
    let technical_epochs = if f.use_technical { plan.epochs } else { 0 };
    let aesthetic_epochs = if f.use_aesthetic { plan.aesthetic_epochs.unwrap_or(plan.epochs) } else { 0 };
    let lp = Loop {
        cfg: &cfg,
        plan: plan.clone(),
        stage_cfg: &cfg.stage1,
        data,
        steps_per_epoch: data.len().div_ceil(plan.batch_size) as u64,
        total_epochs: technical_epochs.max(aesthetic_epochs),
    };
    let (mut opt, start) = match resume {
        Some(ck) => (AdamW::restore(ck.adam, &ck.adam_m, &ck.adam_v, DType::F32)?, ck.step),
        None => (AdamW::default(), 0),
    };
    let alpha = cfg.stage1.alpha_nin;
    let groups = plan.trainable.clone();
    let step_fn = |model: &Mdiqa, idx: &[usize], x: &Tensor, epoch: usize| {
        let active = |c: Category| match c {
            Category::Technical => epoch < technical_epochs,
            Category::Aesthetic => epoch < aesthetic_epochs,
        };
        let heads = model.head_outputs(
            x,
            ForwardOptions {
                inject: false,
                detach_trunk: false,
            },
        )?;
        let mut terms = Vec::new();
        for (k, d) in model.dimensions().iter().enumerate() {
            if !active(d.category) {
                continue;
            }
            let (label, mask) = label_tensor(data, idx, d.index, model.dtype())?;
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let pred = heads.scores.narrow(1, k, 1)?.squeeze(1)?;
            terms.push(hybrid_iqa_loss(&pred, &label, &mask, alpha)?);
        }
        let loss = if terms.is_empty() {
            (heads.scores.sum_all()? * 0.0)?
        } else {
            Tensor::stack(&terms, 0)?.sum_all()?
        };
        let vars = model
            .store()
            .select(|t: &ParamTag| groups.contains(&t.group) && t.category.is_some_and(active));
        Ok((loss, vars))
    };
    let reached = lp.run(&model, &mut opt, start, &mut opts, &step_fn)?;
    let ck = snapshot(&model, &cfg, Stage::One, reached == lp.total_steps(), reached, &opt)?;
    Ok((model, ck))
}

/// Trains the aggregation stage on overall labels, starting from a
/// completed stage-1 checkpoint or resuming an incomplete stage-2 one.
/// Stage-2 hyperparameters come from `cfg` on a fresh start and from the
/// checkpoint on resume; the architecture always comes from the checkpoint.
pub fn train_stage2(
    data: &[MultiDimSample],
    ckpt: &Checkpoint,
    cfg: &MdiqaConfig,
    mut opts: TrainOptions,
) -> Result<(Mdiqa, Checkpoint)> {
    let (cfg, start, mut opt) = match (ckpt.stage, ckpt.completed) {
        (Stage::One, true) => {
            let mut c = cfg.clone();
            c.model = ckpt.config.model.clone();
            (c.validate()?, 0, AdamW::default())
        }
        (Stage::Two, false) => (
            ckpt.config.clone(),
            ckpt.step,
            AdamW::restore(ckpt.adam, &ckpt.adam_m, &ckpt.adam_v, DType::F32)?,
        ),
        (Stage::One, false) => {
            return Err(Error::Checkpoint("stage-1 checkpoint is incomplete; finish stage 1 first".into()))
        }
        (Stage::Two, true) => return Err(Error::Checkpoint("stage 2 is already complete".into())),
    };
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let plan = StagePlan::stage2(&cfg);
    let mut model = ckpt.model()?;
    model.injection_trained = plan.injection;
    let lp = Loop {
        cfg: &cfg,
        plan: plan.clone(),
        stage_cfg: &cfg.stage2,
        data,
        steps_per_epoch: data.len().div_ceil(plan.batch_size) as u64,
        total_epochs: plan.epochs,
    };
    let alpha = cfg.stage2.alpha_nin;
    let groups = plan.trainable.clone();
    let fwd = ForwardOptions {
        inject: plan.injection,
        detach_trunk: true,
    };
    let step_fn = |model: &Mdiqa, idx: &[usize], x: &Tensor, _epoch: usize| {
        let out = model.forward_with(x, fwd)?;
        let label: Vec<f64> = idx.iter().map(|&i| data[i].overall).collect();
        let label = Tensor::from_vec(label, idx.len(), x.device())?.to_dtype(model.dtype())?;
        let loss = hybrid_iqa_loss(&out.overall, &label, &vec![true; idx.len()], alpha)?;
        let vars = model.store().select(|t: &ParamTag| groups.contains(&t.group));
        Ok((loss, vars))
    };
    let reached = lp.run(&model, &mut opt, start, &mut opts, &step_fn)?;
    let ck = snapshot(&model, &cfg, Stage::Two, reached == lp.total_steps(), reached, &opt)?;
    Ok((model, ck))
}

const MAGIC: &[u8; 8] = b"MDIQACK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    completed: bool,
    step: u64,
    injection_trained: bool,
    seeds: Seeds,
    optimizer: AdamMeta,
    config: MdiqaConfig,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Serializes a checkpoint: magic, version (u32 LE), header length (u64 LE),
/// JSON header, f32 LE tensor data in header order, SHA-256 of everything
/// before it.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blobs: Vec<&TensorData> = Vec::new();
    for (prefix, map) in [(PARAM, &ck.params), (ADAM_M, &ck.adam_m), (ADAM_V, &ck.adam_v)] {
        for (name, d) in map {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: d.shape.clone(),
            });
            blobs.push(d);
        }
    }
    let header = Header {
        stage: ck.stage,
        completed: ck.completed,
        step: ck.step,
        injection_trained: ck.injection_trained,
        seeds: Seeds::of(&ck.config),
        optimizer: ck.adam,
        config: ck.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + blobs.iter().map(|b| 4 * b.values.len()).sum::<usize>() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blobs {
        for v in &b.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let fixed = MAGIC.len() + 4 + 8;
    if bytes.len() < fixed + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ChecksumMismatch);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(fixed..fixed + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    let mut pos = fixed + hlen;
    let (mut params, mut adam_m, mut adam_v) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = body
            .get(pos..pos + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", t.name)))?;
        pos += 4 * n;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let data = TensorData { shape: t.shape, values };
        let (map, name) = if let Some(n) = t.name.strip_prefix(PARAM) {
            (&mut params, n)
        } else if let Some(n) = t.name.strip_prefix(ADAM_M) {
            (&mut adam_m, n)
        } else if let Some(n) = t.name.strip_prefix(ADAM_V) {
            (&mut adam_v, n)
        } else {
            return Err(Error::Checkpoint(format!("unknown tensor `{}`", t.name)));
        };
        map.insert(name.to_string(), data);
    }
    if pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        stage: header.stage,
        completed: header.completed,
        step: header.step,
        injection_trained: header.injection_trained,
        params,
        adam: header.optimizer,
        adam_m,
        adam_v,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ck)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
