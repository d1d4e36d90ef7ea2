//! Small layer toolkit built from differentiable tensor primitives.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, Params};

/// Affine map `x @ weight + bias` over the last axis. `weight` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = p.get("weight", &[in_dim, out_dim], Init::FanIn { fan_in: in_dim })?;
        let bias = p.get("bias", &[out_dim], Init::FanIn { fan_in: in_dim })?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = p.get("weight", &[in_dim, out_dim], Init::FanIn { fan_in: in_dim })?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input has at least one axis");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: p.get("gain", &[dim], Init::Ones)?,
            bias: p.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(p: &Params, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::new(&p.pp("fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu_erf()?;
        self.fc2.forward(&h)
    }
}

/// Softmax over `dim`, max-shifted.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, dim)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + exp(-x)), kept in primitives so every dtype has a backward pass.
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Flatten a tensor to a `Vec<f64>` regardless of dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}
