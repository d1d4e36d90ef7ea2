use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{softmax, LayerNorm, Linear, Mlp};
use crate::params::Params;

#[derive(Clone, Debug)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(p: &Params, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(&p.pp("qkv"), width, 3 * width)?,
            out: Linear::new(&p.pp("out"), width, width)?,
            heads,
        })
    }

    /// `x`: `[B, N, W]`. `mask` is added to the `[N, N]` attention logits.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, w) = x.dims3()?;
        let dh = w / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, dh))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let mut logits = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(mask) = mask {
            logits = logits.broadcast_add(mask)?;
        }
        let attn = softmax(&logits, 3)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, w))?;
        self.out.forward(&y)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(p: &Params, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&p.pp("ln1"), width)?,
            attn: SelfAttention::new(&p.pp("attn"), width, heads)?,
            ln2: LayerNorm::new(&p.pp("ln2"), width)?,
            mlp: Mlp::new(&p.pp("mlp"), width, width * mlp_ratio, width)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        let y = self.mlp.forward(&self.ln2.forward(&x)?)?;
        Ok((x + y)?)
    }
}

pub fn causal_mask(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (n, n), device)?.to_dtype(dtype)?)
}
