//! Named, tagged parameter storage with seeded initialization.
//!
//! Every parameter is a candle `Var` keyed by a dotted path. Layers keep
//! tensor handles that share storage with the var, so optimizer updates and
//! checkpoint loads are visible to the model without rebuilding it.
//! Initial values depend only on `(seed, name)`, never on creation order.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::registry::Category;
use crate::{Error, Result};

/// Parameter groups that the training stages freeze or train as a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone convolutions and their gated local pooling.
    Backbone,
    /// Per-head cross-scale attention, including level projections.
    Csam,
    /// Per-head semantic injection MLP.
    Injection,
    /// Per-head regressor (hidden layer and scoring layer).
    Regressor,
    WeightBranch,
    Fusion,
    /// Restoration network; never part of the quality model.
    Restorer,
}

impl ParamGroup {
    pub const MODEL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::Csam,
        ParamGroup::Injection,
        ParamGroup::Regressor,
        ParamGroup::WeightBranch,
        ParamGroup::Fusion,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamTag {
    pub group: ParamGroup,
    /// Technical or aesthetic branch, for backbone and head parameters.
    pub category: Option<Category>,
}

impl ParamTag {
    pub fn new(group: ParamGroup, category: Option<Category>) -> Self {
        ParamTag { group, category }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Uniform on `±1/√fan_in`, the usual default for conv and linear layers.
    FanInUniform(usize),
    /// The (O, C, k, k) kernel that copies input channel `o` to output `o`
    /// at the kernel centre; remaining taps are zero.
    IdentityKernel,
    /// The (O, I) matrix with ones on the main diagonal.
    Identity,
}

struct Entry {
    var: Var,
    tag: ParamTag,
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    frozen: bool,
    entries: BTreeMap<String, Entry>,
}

/// Raw checkpoint form of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn init_values(init: Init, shape: &[usize], seed: u64) -> Result<Vec<f64>> {
    let n: usize = shape.iter().product();
    let values = match init {
        Init::Zeros => vec![0.0; n],
        Init::Constant(c) => vec![c; n],
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std)
                .map_err(|e| Error::Config(format!("bad init std {std}: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        Init::FanInUniform(fan_in) => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::IdentityKernel => {
            let &[o, c, kh, kw] = shape else {
                return Err(Error::Config(format!("identity kernel needs 4 dims, got {shape:?}")));
            };
            let mut v = vec![0.0; n];
            for i in 0..o.min(c) {
                v[((i * c + i) * kh + kh / 2) * kw + kw / 2] = 1.0;
            }
            v
        }
        Init::Identity => {
            let &[o, i] = shape else {
                return Err(Error::Config(format!("identity matrix needs 2 dims, got {shape:?}")));
            };
            let mut v = vec![0.0; n];
            for d in 0..o.min(i) {
                v[d * i + d] = 1.0;
            }
            v
        }
    };
    Ok(values)
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            seed,
            frozen: false,
            entries: BTreeMap::new(),
        }
    }

    /// A store whose tensors are handed out detached: gradients flow through
    /// them to the inputs but are never accumulated for the parameters.
    pub fn new_frozen(dtype: DType, seed: u64) -> Self {
        ParamStore {
            frozen: true,
            ..ParamStore::new(dtype, seed)
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, tag: ParamTag) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let values = init_values(init, shape, name_seed(self.seed, name))?;
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        self.entries.insert(name.to_string(), Entry { var, tag });
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn tag(&self, name: &str) -> Option<ParamTag> {
        self.entries.get(name).map(|e| e.tag)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Vars whose tag satisfies `pred`, in name order.
    pub fn select(&self, pred: impl Fn(&ParamTag) -> bool) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| pred(&e.tag))
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn export(&self) -> Result<BTreeMap<String, TensorData>> {
        self.entries
            .iter()
            .map(|(name, e)| Ok((name.clone(), tensor_data(e.var.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter from `values`. Names and shapes must match
    /// this store exactly.
    pub fn import(&self, values: &BTreeMap<String, TensorData>) -> Result<()> {
        for name in self.entries.keys() {
            if !values.contains_key(name) {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            }
        }
        for (name, data) in values {
            let entry = self
                .entries
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if entry.var.dims() != data.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    entry.var.dims(),
                    data.shape
                )));
            }
            let t = Tensor::from_slice(&data.values, data.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            entry.var.set(&t)?;
        }
        Ok(())
    }

    /// SHA-256 over the names and raw bytes of the selected parameters.
    pub fn fingerprint(&self, pred: impl Fn(&ParamTag) -> bool) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for (name, e) in self.entries.iter().filter(|(_, e)| pred(&e.tag)) {
            h.update(name.as_bytes());
            let t = e.var.as_tensor().flatten_all()?;
            match t.dtype() {
                DType::F64 => {
                    for v in t.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in t.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(h.finalize().into())
    }
}

pub fn tensor_data(t: &Tensor) -> Result<TensorData> {
    Ok(TensorData {
        shape: t.dims().to_vec(),
        values: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag() -> ParamTag {
        ParamTag::new(ParamGroup::Fusion, None)
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new(DType::F32, 5);
        let mut b = ParamStore::new(DType::F32, 5);
        let a1 = a.param("x", &[3, 4], Init::FanInUniform(4), tag()).unwrap();
        a.param("y", &[2], Init::Normal(1.0), tag()).unwrap();
        b.param("y", &[2], Init::Normal(1.0), tag()).unwrap();
        let b1 = b.param("x", &[3, 4], Init::FanInUniform(4), tag()).unwrap();
        assert_eq!(
            a1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b1.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.param("x", &[1], Init::Zeros, tag()).unwrap();
        assert!(s.param("x", &[1], Init::Zeros, tag()).is_err());
    }

    #[test]
    fn import_updates_existing_handles() {
        let mut s = ParamStore::new(DType::F32, 0);
        let handle = s.param("x", &[2], Init::Zeros, tag()).unwrap();
        let mut values = BTreeMap::new();
        values.insert(
            "x".to_string(),
            TensorData {
                shape: vec![2],
                values: vec![1.5, -2.0],
            },
        );
        s.import(&values).unwrap();
        assert_eq!(handle.to_vec1::<f32>().unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn frozen_handles_do_not_track_gradients() {
        let mut s = ParamStore::new_frozen(DType::F64, 0);
        let w = s.param("w", &[2], Init::Constant(2.0), tag()).unwrap();
        let x = Var::new(&[1.0f64, 3.0], &Device::Cpu).unwrap();
        let grads = (x.as_tensor() * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(s.get("w").unwrap()).is_none());
        assert_eq!(grads.get(&x).unwrap().to_vec1::<f64>().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn identity_inits() {
        let v = init_values(Init::IdentityKernel, &[2, 2, 3, 3], 0).unwrap();
        assert_eq!(v.iter().sum::<f64>(), 2.0);
        assert_eq!(v[4], 1.0);
        // kernel (1, 1) starts at (1·2 + 1)·9
        assert_eq!(v[27 + 4], 1.0);
        let m = init_values(Init::Identity, &[2, 3], 0).unwrap();
        assert_eq!(m, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
