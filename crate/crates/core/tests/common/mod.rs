#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded uniform tensor in `[lo, hi)`, f64.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn var(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Var {
    Var::from_tensor(&uniform(shape, lo, hi, seed)).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Compares backprop gradients of the scalar `f` with central finite
/// differences for every element of every var. Returns the worst
/// norm-wise relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` across vars.
pub fn gradcheck(vars: &[&Var], f: impl Fn() -> Tensor) -> f64 {
    let h = 1e-6;
    let grads = f().backward().unwrap();
    let mut pairs = Vec::with_capacity(vars.len());
    for v in vars {
        let analytic: Vec<f64> = match grads.get(v) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; v.elem_count()],
        };
        let base: Vec<f64> = v.flatten_all().unwrap().to_vec1().unwrap();
        let shape = v.shape().clone();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            v.set(&Tensor::from_vec(p.clone(), &shape, &Device::Cpu).unwrap()).unwrap();
            let up = scalar(&f());
            p[i] -= 2.0 * h;
            v.set(&Tensor::from_vec(p, &shape, &Device::Cpu).unwrap()).unwrap();
            let down = scalar(&f());
            numeric.push((up - down) / (2.0 * h));
        }
        v.set(&Tensor::from_vec(base, &shape, &Device::Cpu).unwrap()).unwrap();
        pairs.push((analytic, numeric));
    }
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let total = pairs.iter().map(|(_, n)| norm(n).powi(2)).sum::<f64>().sqrt();
    // Tensors whose true gradient is exactly zero (e.g. a bias that softmax
    // cancels) are measured against a floor tied to the whole module's
    // gradient, not against finite-difference rounding noise.
    let floor = (1e-3 * total).max(1e-12);
    pairs
        .iter()
        .map(|(a, n)| {
            let diff = a.iter().zip(n).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            diff / norm(a).max(norm(n)).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Random projection of a tensor to a scalar, so every output element
/// contributes with a distinct weight.
pub fn project(t: &Tensor, seed: u64) -> Tensor {
    let r = uniform(t.dims(), -1.0, 1.0, seed).to_dtype(t.dtype()).unwrap();
    (t * r).unwrap().sum_all().unwrap()
}
pub mod grad_suite;
pub mod fixtures;
