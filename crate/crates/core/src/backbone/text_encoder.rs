//! Frozen text encoder.
//!
//! Words are hashed into a fixed vocabulary, embedded, prefixed with the
//! learnable prompt context and terminated by an end-of-text token. A causal
//! transformer stack runs over the sequence and the end-of-text position is
//! projected to the joint embedding dimension. Every weight here is frozen;
//! only the context vectors passed in with each prompt receive gradients.

use candle_core::Tensor;
use sha2::{Digest, Sha256};

use super::transformer::{causal_mask, Block};
use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, Params};
use crate::text_bank::PromptSpec;

const PAD: u32 = 0;
const EOT: u32 = 1;
const RESERVED: u32 = 2;

#[derive(Clone, Debug)]
pub struct TextEncoder {
    token_embedding: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    projection: Linear,
    vocab_size: usize,
    max_len: usize,
}

impl TextEncoder {
    /// `p` should already be frozen; the constructor freezes it regardless.
    pub fn new(p: &Params, cfg: &BackboneConfig) -> Result<Self> {
        let p = p.frozen();
        let w = cfg.text_width;
        if cfg.vocab_size <= RESERVED as usize {
            return Err(Error::Config("vocab_size too small".into()));
        }
        let blocks = (0..cfg.text_depth)
            .map(|i| Block::new(&p.pp(&format!("blocks.{i}")), w, cfg.text_heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding: p.get("token_embedding", &[cfg.vocab_size, w], Init::Normal { std: 0.02 })?,
            pos_embed: p.get("pos_embed", &[cfg.text_max_len, w], Init::Normal { std: 0.01 })?,
            blocks,
            ln_final: LayerNorm::new(&p.pp("ln_final"), w)?,
            projection: Linear::no_bias(&p.pp("projection"), w, cfg.embed_dim)?,
            vocab_size: cfg.vocab_size,
            max_len: cfg.text_max_len,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Stable word-hash tokenization followed by the end-of-text token.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let buckets = self.vocab_size as u32 - RESERVED;
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                let digest = Sha256::digest(w.to_lowercase().as_bytes());
                let h = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]);
                RESERVED + h % buckets
            })
            .chain(std::iter::once(EOT))
            .collect()
    }

    /// Encode a batch of prompts to `[N, D]`.
    pub fn encode_prompts(&self, prompts: &[PromptSpec]) -> Result<Tensor> {
        if prompts.is_empty() {
            return Err(Error::Shape("no prompts to encode".into()));
        }
        let device = self.token_embedding.device().clone();
        let dtype = self.token_embedding.dtype();
        let mut sequences = Vec::with_capacity(prompts.len());
        let mut eot_positions = Vec::with_capacity(prompts.len());
        for prompt in prompts {
            let tokens = self.tokenize(&prompt.class_text);
            let ctx_len = prompt.context.dim(0)?;
            let len = ctx_len + tokens.len();
            if len > self.max_len {
                return Err(Error::SequenceTooLong { len, max: self.max_len });
            }
            eot_positions.push(len - 1);
            sequences.push((prompt.context.clone(), tokens));
        }
        let seq_len = eot_positions.iter().max().unwrap() + 1;
        let mut rows = Vec::with_capacity(prompts.len());
        for (context, mut tokens) in sequences {
            let pad = seq_len - context.dim(0)? - tokens.len();
            tokens.extend(std::iter::repeat_n(PAD, pad));
            let ids = Tensor::new(tokens.as_slice(), &device)?;
            let words = self.token_embedding.index_select(&ids, 0)?;
            rows.push(Tensor::cat(&[&context, &words], 0)?);
        }
        let x = Tensor::stack(&rows, 0)?;
        let mut x = x.broadcast_add(&self.pos_embed.narrow(0, 0, seq_len)?)?;
        let mask = causal_mask(seq_len, dtype, &device)?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let x = self.ln_final.forward(&x)?;
        let picked = eot_positions
            .iter()
            .enumerate()
            .map(|(i, &pos)| x.get(i)?.narrow(0, pos, 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let pooled = Tensor::cat(&picked, 0)?;
        self.projection.forward(&pooled)
    }

    pub fn encode_text(&self, prompt: &PromptSpec) -> Result<Tensor> {
        Ok(self.encode_prompts(std::slice::from_ref(prompt))?.squeeze(0)?)
    }
}
