//! Image and text encoders plus the projections that produce global-aware
//! patch embeddings.

mod pretrained;
mod text_encoder;
mod transformer;
mod vit;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::Params;

pub use pretrained::load_clip_vision_weights;
pub use text_encoder::TextEncoder;
pub use transformer::{Block, SelfAttention};
pub use vit::{ImageEncoder, PIXEL_MEAN, PIXEL_STD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_depth: usize,
    pub vision_heads: usize,
    pub mlp_ratio: usize,
    /// Joint embedding dimension `D`.
    pub embed_dim: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    pub vocab_size: usize,
    /// Optional safetensors file with pretrained CLIP vision weights.
    pub weights: Option<PathBuf>,
}

impl BackboneConfig {
    /// Small trainable backbone that fits a commodity CPU.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            vision_width: 64,
            vision_depth: 4,
            vision_heads: 4,
            mlp_ratio: 2,
            embed_dim: 64,
            text_width: 64,
            text_depth: 2,
            text_heads: 4,
            text_max_len: 77,
            vocab_size: 4096,
            weights: None,
        }
    }

    /// ViT-B/16 geometry at 224x224 with `D = 512`.
    pub fn clip_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            vision_width: 768,
            vision_depth: 12,
            vision_heads: 12,
            mlp_ratio: 4,
            embed_dim: 512,
            text_width: 512,
            text_depth: 2,
            text_heads: 8,
            text_max_len: 77,
            vocab_size: 49408,
            weights: None,
        }
    }

    /// Patch grid side length; errors when the image does not tile evenly.
    pub fn grid(&self) -> Result<usize> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(self.image_size / self.patch_size)
    }

    /// Patch count `L`.
    pub fn num_patches(&self) -> Result<usize> {
        Ok(self.grid()?.pow(2))
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Images `[B, H, W, 3]` in `[0, 1]` and labels (1 = real, 0 = spoof).
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<u32>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<u32>) -> Result<Self> {
        let (b, h, w, c) = pixels.dims4()?;
        if b != labels.len() {
            return Err(Error::Shape(format!("{b} images but {} labels", labels.len())));
        }
        if h != w || c != 3 {
            return Err(Error::Shape(format!("expected square RGB images, got {h}x{w}x{c}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidLabel(bad as i64));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::new(self.labels.as_slice(), device)?)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B, D_v]`
    pub cls_token: Tensor,
    /// `[B, L, D_v]`
    pub patch_tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct ProjectedFeatures {
    /// `[B, D]`
    pub cls_proj: Tensor,
    /// `E`: `[B, L, D]`
    pub patches_proj: Tensor,
    /// `S_q`: `[B, L, D]`
    pub global_aware: Tensor,
}

/// Broadcast the projected CLS token over every projected patch by addition.
pub fn fuse(cls_proj: &Tensor, patches_proj: &Tensor) -> Result<ProjectedFeatures> {
    let global_aware = patches_proj.broadcast_add(&cls_proj.unsqueeze(1)?)?;
    Ok(ProjectedFeatures {
        cls_proj: cls_proj.clone(),
        patches_proj: patches_proj.clone(),
        global_aware,
    })
}

/// Separate two-layer projections for the CLS token and the patch tokens.
#[derive(Clone, Debug)]
pub struct Projections {
    cls: Mlp,
    patches: Mlp,
}

impl Projections {
    pub fn new(p: &Params, vision_width: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            cls: Mlp::new(&p.pp("cls"), vision_width, embed_dim, embed_dim)?,
            patches: Mlp::new(&p.pp("patches"), vision_width, embed_dim, embed_dim)?,
        })
    }

    pub fn project_and_fuse(&self, enc: &EncoderOutput) -> Result<ProjectedFeatures> {
        let cls_proj = self.cls.forward(&enc.cls_token)?;
        let patches_proj = self.patches.forward(&enc.patch_tokens)?;
        fuse(&cls_proj, &patches_proj)
    }
}

/// Image encoder, frozen text encoder and projections.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub projections: Projections,
}

impl Backbone {
    pub fn new(p: &Params, config: &BackboneConfig) -> Result<Self> {
        config.grid()?;
        Ok(Self {
            config: config.clone(),
            image: ImageEncoder::new(&p.pp("image"), config)?,
            text: TextEncoder::new(&p.pp("text_encoder").frozen(), config)?,
            projections: Projections::new(&p.pp("proj"), config.vision_width, config.embed_dim)?,
        })
    }

    pub fn encode_image(&self, batch: &ImageBatch) -> Result<EncoderOutput> {
        self.image.forward(batch)
    }

    pub fn dtype(&self) -> DType {
        self.projections.cls.fc1.weight.dtype()
    }
}
