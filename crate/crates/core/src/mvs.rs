//! Multi-view slot attention.
//!
//! Global-aware patch embeddings act as queries and the `2M` encoded class
//! prompts act as keys and values. The softmax runs over the patch axis, so
//! every text view distributes one unit of attention across the patches; the
//! result is then renormalized per patch over the views, aggregated into a
//! per-patch update, and folded into the patch state by a GRU cell followed by
//! a residual MLP.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax, LayerNorm, Linear, Mlp};
use crate::params::Params;

pub const DEFAULT_ITERATIONS: usize = 3;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvsConfig {
    /// Refinement iterations; `0` makes the module an identity map.
    pub i_max: usize,
    pub epsilon: f64,
}

impl Default for MvsConfig {
    fn default() -> Self {
        Self {
            i_max: DEFAULT_ITERATIONS,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Attention of one iteration, both `[B, L, 2M]`.
#[derive(Clone, Debug)]
pub struct AttentionScores {
    /// Softmax over patches; each view column sums to one.
    pub pre: Tensor,
    /// `pre` divided by its per-patch sum over views plus epsilon.
    pub attn: Tensor,
}

/// `q`: `[B, L, D]`, `k`: `[B, 2M, D]`.
pub fn attention_scores(q: &Tensor, k: &Tensor, epsilon: f64) -> Result<AttentionScores> {
    let (b, l, d) = q.dims3()?;
    let (bk, views, dk) = k.dims3()?;
    if b == 0 || l == 0 || d == 0 || views == 0 {
        return Err(Error::Shape(format!("empty attention input: q {:?}, k {:?}", q.dims(), k.dims())));
    }
    if bk != b || dk != d {
        return Err(Error::Shape(format!("q {:?} incompatible with k {:?}", q.dims(), k.dims())));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let logits = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
    let pre = softmax(&logits, 1)?;
    let per_patch = (pre.sum_keepdim(2)? + epsilon)?;
    let attn = pre.broadcast_div(&per_patch)?;
    Ok(AttentionScores { pre, attn })
}

/// `attn`: `[B, L, 2M]`, `v`: `[B, 2M, D]` to `[B, L, D]`.
pub fn aggregate_views(attn: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (b, _l, views) = attn.dims3()?;
    let (bv, vv, _d) = v.dims3()?;
    if b != bv || views != vv {
        return Err(Error::Shape(format!("attn {:?} incompatible with v {:?}", attn.dims(), v.dims())));
    }
    Ok(attn.matmul(v)?)
}

/// GRU cell applied independently at every position of a `[..., D]` tensor.
///
/// `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
/// `n = tanh(x W_n + r ∘ (h U_n) + b_n)`, `h' = (1 - z) ∘ n + z ∘ h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    /// `[D, 3D]` input weights for (z, r, n) with bias `[3D]`.
    input: Linear,
    /// `[D, 3D]` hidden weights for (z, r, n).
    hidden: Linear,
    dim: usize,
}

impl GruCell {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(&p.pp("input"), dim, 3 * dim)?,
            hidden: Linear::no_bias(&p.pp("hidden"), dim, 3 * dim)?,
            dim,
        })
    }

    pub fn from_tensors(w_input: Tensor, bias: Tensor, w_hidden: Tensor) -> Result<Self> {
        let dim = w_input.dim(0)?;
        Ok(Self {
            input: Linear {
                weight: w_input,
                bias: Some(bias),
            },
            hidden: Linear {
                weight: w_hidden,
                bias: None,
            },
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        if x.dims() != h.dims() {
            return Err(Error::Shape(format!("GRU input {:?} vs hidden {:?}", x.dims(), h.dims())));
        }
        let axis = x.rank() - 1;
        let d = self.dim;
        let gx = self.input.forward(x)?;
        let gh = self.hidden.forward(h)?;
        let z = sigmoid(&(gx.narrow(axis, 0, d)? + gh.narrow(axis, 0, d)?)?)?;
        let r = sigmoid(&(gx.narrow(axis, d, d)? + gh.narrow(axis, d, d)?)?)?;
        let n = (gx.narrow(axis, 2 * d, d)? + (r * gh.narrow(axis, 2 * d, d)?)?)?.tanh()?;
        let keep = z.affine(-1.0, 1.0)?;
        Ok(((keep * n)? + (z * h)?)?)
    }
}

/// Standalone form of the GRU update used by the module.
pub fn gru_update(cell: &GruCell, updates: &Tensor, hidden: &Tensor) -> Result<Tensor> {
    cell.forward(updates, hidden)
}

#[derive(Clone, Debug)]
pub struct MultiViewFeature {
    /// `F_MV`: `[B, L, D]`
    pub features: Tensor,
    /// Attention of every iteration, in order.
    pub attention: Vec<AttentionScores>,
}

#[derive(Clone, Debug)]
pub struct MultiViewSlotAttention {
    norm_texts: LayerNorm,
    norm_patches: LayerNorm,
    norm_mlp: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    gru: GruCell,
    mlp: Mlp,
    config: MvsConfig,
}

impl MultiViewSlotAttention {
    pub fn new(p: &Params, dim: usize, config: MvsConfig) -> Result<Self> {
        if config.epsilon <= 0.0 {
            return Err(Error::Config("MVS epsilon must be positive".into()));
        }
        Ok(Self {
            norm_texts: LayerNorm::new(&p.pp("norm_texts"), dim)?,
            norm_patches: LayerNorm::new(&p.pp("norm_patches"), dim)?,
            norm_mlp: LayerNorm::new(&p.pp("norm_mlp"), dim)?,
            to_q: Linear::no_bias(&p.pp("to_q"), dim, dim)?,
            to_k: Linear::no_bias(&p.pp("to_k"), dim, dim)?,
            to_v: Linear::no_bias(&p.pp("to_v"), dim, dim)?,
            gru: GruCell::new(&p.pp("gru"), dim)?,
            mlp: Mlp::new(&p.pp("mlp"), dim, dim, dim)?,
            config,
        })
    }

    pub fn config(&self) -> MvsConfig {
        self.config
    }

    /// `s_q`: `[B, L, D]`, `s_kv`: `[2M, D]` ordered positives then negatives.
    pub fn forward(&self, s_q: &Tensor, s_kv: &Tensor) -> Result<MultiViewFeature> {
        let (b, _l, d) = s_q.dims3()?;
        let (views, dk) = s_kv.dims2()?;
        if dk != d {
            return Err(Error::Shape(format!("patch dim {d} vs text dim {dk}")));
        }
        if self.config.i_max == 0 {
            return Ok(MultiViewFeature {
                features: s_q.clone(),
                attention: Vec::new(),
            });
        }
        let texts = s_kv.unsqueeze(0)?.broadcast_as((b, views, d))?.contiguous()?;
        let texts = self.norm_texts.forward(&texts)?;
        let k = self.to_k.forward(&texts)?;
        let v = self.to_v.forward(&texts)?;

        let mut state = s_q.clone();
        let mut attention = Vec::with_capacity(self.config.i_max);
        for _ in 0..self.config.i_max {
            let prev = state.clone();
            let q = self.to_q.forward(&self.norm_patches.forward(&state)?)?;
            let scores = attention_scores(&q, &k, self.config.epsilon)?;
            let updates = aggregate_views(&scores.attn, &v)?;
            state = self.gru.forward(&updates, &prev)?;
            state = (&state + self.mlp.forward(&self.norm_mlp.forward(&state)?)?)?;
            attention.push(scores);
        }
        Ok(MultiViewFeature {
            features: state,
            attention,
        })
    }
}
