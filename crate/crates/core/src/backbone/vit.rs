//! Trainable vision transformer image encoder.

use candle_core::{Tensor, D};

use super::transformer::Block;
use super::{BackboneConfig, EncoderOutput, ImageBatch};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, Params};

/// Per-channel normalization statistics of the CLIP image preprocessing.
pub const PIXEL_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    patch_embed: Linear,
    cls_token: Tensor,
    pos_embed: Tensor,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    image_size: usize,
    patch_size: usize,
}

impl ImageEncoder {
    pub fn new(p: &Params, cfg: &BackboneConfig) -> Result<Self> {
        let grid = cfg.grid()?;
        let w = cfg.vision_width;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let blocks = (0..cfg.vision_depth)
            .map(|i| Block::new(&p.pp(&format!("blocks.{i}")), w, cfg.vision_heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: Linear::no_bias(&p.pp("patch_embed"), patch_dim, w)?,
            cls_token: p.get("cls_token", &[w], Init::Normal { std: 0.02 })?,
            pos_embed: p.get("pos_embed", &[grid * grid + 1, w], Init::Normal { std: 0.02 })?,
            ln_pre: LayerNorm::new(&p.pp("ln_pre"), w)?,
            blocks,
            ln_post: LayerNorm::new(&p.pp("ln_post"), w)?,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
        })
    }

    /// `[B, H, W, 3]` in `[0, 1]` to CLS token `[B, W]` and patch tokens `[B, L, W]`.
    pub fn forward(&self, batch: &ImageBatch) -> Result<EncoderOutput> {
        let x = &batch.pixels;
        let (b, h, w, c) = x.dims4()?;
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(Error::Config(format!(
                "expected {0}x{0}x3 images, got {h}x{w}x{c}",
                self.image_size
            )));
        }
        let p = self.patch_size;
        let g = h / p;
        let (dtype, device) = (x.dtype(), x.device());
        let mean = Tensor::new(&PIXEL_MEAN, device)?.to_dtype(dtype)?;
        let std = Tensor::new(&PIXEL_STD, device)?.to_dtype(dtype)?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let patches = x
            .reshape((b, g, p, g, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, g * g, p * p * 3))?;
        let tokens = self.patch_embed.forward(&patches)?;
        let width = tokens.dim(D::Minus1)?;
        let cls = self.cls_token.reshape((1, 1, width))?.broadcast_as((b, 1, width))?;
        let mut x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos_embed)?;
        x = self.ln_pre.forward(&x)?;
        for block in &self.blocks {
            x = block.forward(&x, None)?;
        }
        let x = self.ln_post.forward(&x)?;
        let n = x.dim(1)?;
        Ok(EncoderOutput {
            cls_token: x.narrow(1, 0, 1)?.squeeze(1)?,
            patch_tokens: x.narrow(1, 1, n - 1)?,
        })
    }
}
