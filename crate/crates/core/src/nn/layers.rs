use candle_core::Tensor;

use super::{sigmoid, Scope};
use crate::Result;

/// Affine map over the last dimension: `x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Linear {
            weight: scope.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: Some(scope.uniform("bias", &[out_dim], bound)?),
        })
    }

    pub fn no_bias(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Linear {
            weight: scope.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: None,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Linear { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Multiplicative conditioning: `x * sigmoid(E c)`.
#[derive(Clone, Debug)]
pub struct Gate {
    pub embed: Linear,
}

impl Gate {
    pub fn new(scope: &Scope, cond_dim: usize, feature_dim: usize) -> Result<Self> {
        Ok(Gate {
            embed: Linear::new(&scope.pp("embed"), cond_dim, feature_dim)?,
        })
    }

    pub fn weights(&self, cond: &Tensor) -> Result<Tensor> {
        sigmoid(&self.embed.forward(cond)?)
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        Ok(x.mul(&self.weights(cond)?)?)
    }
}

/// 2-D convolution on `(batch, channels, height, width)` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Conv2d {
            weight: scope.uniform("weight", &[out_ch, in_ch, kernel, kernel], bound)?,
            bias: scope.uniform("bias", &[out_ch], bound)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Transposed 2-D convolution; with kernel 4, stride 2, padding 1 it doubles
/// the spatial size exactly.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((out_ch * kernel * kernel) as f64).sqrt();
        Ok(ConvTranspose2d {
            weight: scope.uniform("weight", &[in_ch, out_ch, kernel, kernel], bound)?,
            bias: scope.uniform("bias", &[out_ch], bound)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}
