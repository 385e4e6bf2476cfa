//! Differentiable building blocks composed from candle primitives.

use candle_core::{DType, Device, Tensor, D};

use crate::Result;

/// `0.5 · (tanh(x/2) + 1)`: equal to the logistic sigmoid and free of the
/// overflow that `1 / (1 + e^{-x})` hits in its backward pass.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `relu(x) + ln(1 + u)` with `u = e^{-|x|}`. For tiny `u` the log is
/// replaced by `u` itself so the result stays positive.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let u = x.abs()?.neg()?.exp()?;
    let small = u.lt(1e-6)?;
    let tail = small.where_cond(&u, &(&u + 1.0)?.log()?)?;
    Ok((x.relu()? + tail)?)
}

/// Softmax over the last dimension. The subtracted maximum is detached; the
/// softmax is shift invariant so gradients are unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Scales the last dimension to unit L2 norm, `x / sqrt(|x|² + eps²)`.
pub fn l2_normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + eps * eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Row-stochastic (out_len × in_len) matrix for adaptive average pooling
/// along one axis. Window `i` covers `[⌊i·n/m⌋, ⌈(i+1)·n/m⌉)`; when `m`
/// divides `n` these are the plain non-overlapping windows of size `n/m`.
pub fn pooling_matrix(in_len: usize, out_len: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; in_len * out_len];
    for i in 0..out_len {
        let start = i * in_len / out_len;
        let end = ((i + 1) * in_len).div_ceil(out_len);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * in_len + j] = w;
        }
    }
    Ok(Tensor::from_vec(m, (out_len, in_len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// (B, C, H, W) → (B, H·W, C).
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn sigmoid_matches_logistic() {
        let x = [-30.0, -2.0, 0.0, 0.5, 40.0];
        let y = sigmoid(&t(&x)).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in x.iter().zip(y) {
            assert!((1.0 / (1.0 + (-a).exp()) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_matches_definition_and_is_positive() {
        let x = [-50.0, -1.0, 0.0, 2.0, 30.0];
        let y = softplus(&t(&x)).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in x.iter().zip(y) {
            assert!(b > 0.0);
            assert!((a.exp().ln_1p() - b).abs() <= 1e-12 * a.exp().ln_1p().max(1.0));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -5.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_matrix_windows() {
        let m = pooling_matrix(6, 3, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(m[0], vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m[2], vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        // 5 → 3: windows [0,2), [1,4), [3,5)
        let m = pooling_matrix(5, 3, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(m[0], vec![0.5, 0.5, 0.0, 0.0, 0.0]);
        assert!((m[1][1] - 1.0 / 3.0).abs() < 1e-15 && m[1][4] == 0.0);
        assert_eq!(m[2], vec![0.0, 0.0, 0.0, 0.5, 0.5]);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
