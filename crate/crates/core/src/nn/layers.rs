use candle_core::Tensor;

use super::conv::conv2d;
use super::params::{Init, ParamStore, ParamTag};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        tag: ParamTag,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        Self::with_init(
            store,
            name,
            [out_channels, in_channels, kernel, kernel],
            Init::FanInUniform(fan_in),
            Init::FanInUniform(fan_in),
            stride,
            padding,
            tag,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 4],
        weight_init: Init,
        bias_init: Init,
        stride: usize,
        padding: usize,
        tag: ParamTag,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &shape, weight_init, tag)?;
        let bias = store.param(&format!("{name}.bias"), &[shape[0]], bias_init, tag)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        let b = self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// `y = x Wᵀ + b` over the last dimension of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        tag: ParamTag,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::FanInUniform(in_dim), Init::FanInUniform(in_dim), tag)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Init,
        tag: ParamTag,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[out_dim, in_dim], weight_init, tag)?;
        let bias = store.param(&format!("{name}.bias"), &[out_dim], bias_init, tag)?;
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wt = self.weight.t()?;
        let y = if x.rank() == 2 {
            x.matmul(&wt)?
        } else {
            x.broadcast_matmul(&wt)?
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}
