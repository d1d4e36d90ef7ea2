//! Loading pretrained CLIP vision-tower weights from a safetensors file.
//!
//! Accepts either Hugging Face `CLIPVisionModel` key names or this crate's own
//! parameter names (`image.*`). Linear weights are stored `[in, out]` here and
//! `[out, in]` upstream, so they are transposed on the way in.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub fn load_clip_vision_weights(path: &Path, store: &ParamStore, cfg: &BackboneConfig) -> Result<usize> {
    let raw = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mapped = map_hf_vision(&raw, cfg)?;
    let n = mapped.len();
    store.assign(&mapped)?;
    Ok(n)
}

fn map_hf_vision(raw: &std::collections::HashMap<String, Tensor>, cfg: &BackboneConfig) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (k, v) in raw {
        if k.starts_with("image.") {
            out.insert(k.clone(), v.clone());
        }
    }
    let prefix = if raw.contains_key("vision_model.embeddings.class_embedding") {
        "vision_model"
    } else if out.is_empty() {
        return Err(Error::Checkpoint("no recognised vision weights in file".into()));
    } else {
        return Ok(out);
    };
    let get = |name: &str| -> Result<Tensor> {
        raw.get(&format!("{prefix}.{name}"))
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.{name}")))
    };
    let p = cfg.patch_size;
    out.insert("image.cls_token".into(), get("embeddings.class_embedding")?);
    // conv weight [out, c, py, px] -> linear [(py, px, c), out]
    let conv = get("embeddings.patch_embedding.weight")?;
    let w = conv.permute((2, 3, 1, 0))?.contiguous()?.reshape((p * p * 3, cfg.vision_width))?;
    out.insert("image.patch_embed.weight".into(), w);
    out.insert("image.pos_embed".into(), get("embeddings.position_embedding.weight")?);
    out.insert("image.ln_pre.gain".into(), get("pre_layrnorm.weight")?);
    out.insert("image.ln_pre.bias".into(), get("pre_layrnorm.bias")?);
    out.insert("image.ln_post.gain".into(), get("post_layernorm.weight")?);
    out.insert("image.ln_post.bias".into(), get("post_layernorm.bias")?);
    for i in 0..cfg.vision_depth {
        let l = format!("encoder.layers.{i}");
        let b = format!("image.blocks.{i}");
        let t = |name: &str| -> Result<Tensor> { Ok(get(&format!("{l}.{name}"))?.t()?.contiguous()?) };
        let qkv_w = Tensor::cat(
            &[t("self_attn.q_proj.weight")?, t("self_attn.k_proj.weight")?, t("self_attn.v_proj.weight")?],
            1,
        )?;
        let qkv_b = Tensor::cat(
            &[
                get(&format!("{l}.self_attn.q_proj.bias"))?,
                get(&format!("{l}.self_attn.k_proj.bias"))?,
                get(&format!("{l}.self_attn.v_proj.bias"))?,
            ],
            0,
        )?;
        out.insert(format!("{b}.attn.qkv.weight"), qkv_w);
        out.insert(format!("{b}.attn.qkv.bias"), qkv_b);
        out.insert(format!("{b}.attn.out.weight"), t("self_attn.out_proj.weight")?);
        out.insert(format!("{b}.attn.out.bias"), get(&format!("{l}.self_attn.out_proj.bias"))?);
        for (hf, ours) in [("layer_norm1", "ln1"), ("layer_norm2", "ln2")] {
            out.insert(format!("{b}.{ours}.gain"), get(&format!("{l}.{hf}.weight"))?);
            out.insert(format!("{b}.{ours}.bias"), get(&format!("{l}.{hf}.bias"))?);
        }
        for fc in ["fc1", "fc2"] {
            out.insert(format!("{b}.mlp.{fc}.weight"), t(&format!("mlp.{fc}.weight"))?);
            out.insert(format!("{b}.mlp.{fc}.bias"), get(&format!("{l}.mlp.{fc}.bias"))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, ImageBatch};
    use crate::nn::to_f64_vec;
    use candle_core::DType;
    use std::collections::HashMap;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            vision_width: 8,
            vision_depth: 1,
            vision_heads: 2,
            mlp_ratio: 2,
            embed_dim: 4,
            text_width: 8,
            text_depth: 1,
            text_heads: 2,
            text_max_len: 8,
            vocab_size: 16,
            weights: None,
        }
    }

    #[test]
    fn hf_layout_maps_onto_encoder() {
        let cfg = tiny();
        let dev = Device::Cpu;
        let w = cfg.vision_width;
        let mut m: HashMap<String, Tensor> = HashMap::new();
        let mut put = |k: &str, shape: &[usize]| {
            let t = Tensor::rand(-0.1f32, 0.1f32, shape, &dev).unwrap();
            m.insert(format!("vision_model.{k}"), t);
        };
        put("embeddings.class_embedding", &[w]);
        put("embeddings.patch_embedding.weight", &[w, 3, 4, 4]);
        put("embeddings.position_embedding.weight", &[5, w]);
        for n in ["pre_layrnorm", "post_layernorm", "encoder.layers.0.layer_norm1", "encoder.layers.0.layer_norm2"] {
            put(&format!("{n}.weight"), &[w]);
            put(&format!("{n}.bias"), &[w]);
        }
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            put(&format!("encoder.layers.0.self_attn.{proj}.weight"), &[w, w]);
            put(&format!("encoder.layers.0.self_attn.{proj}.bias"), &[w]);
        }
        put("encoder.layers.0.mlp.fc1.weight", &[2 * w, w]);
        put("encoder.layers.0.mlp.fc1.bias", &[2 * w]);
        put("encoder.layers.0.mlp.fc2.weight", &[w, 2 * w]);
        put("encoder.layers.0.mlp.fc2.bias", &[w]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.safetensors");
        candle_core::safetensors::save(&m, &path).unwrap();

        let store = ParamStore::new(0, DType::F32, dev.clone());
        let bb = Backbone::new(&store.root(), &cfg).unwrap();
        let n = load_clip_vision_weights(&path, &store, &cfg).unwrap();
        // 7 embedding and norm tensors plus 12 per block
        assert_eq!(n, 19);
        let cls = store.trainable_var("image.cls_token").unwrap();
        assert_eq!(
            to_f64_vec(cls.as_tensor()).unwrap(),
            to_f64_vec(&m["vision_model.embeddings.class_embedding"]).unwrap()
        );

        // Linearised patch embedding element matches its convolution counterpart.
        let conv = to_f64_vec(&m["vision_model.embeddings.patch_embedding.weight"]).unwrap();
        let lin = to_f64_vec(store.trainable_var("image.patch_embed.weight").unwrap().as_tensor()).unwrap();
        let (o, c, py, px) = (3, 2, 1, 3);
        assert_eq!(lin[((py * 4 + px) * 3 + c) * w + o], conv[((o * 3 + c) * 4 + py) * 4 + px]);

        let pixels = Tensor::rand(0f32, 1f32, (1, 8, 8, 3), &dev).unwrap();
        let out = bb.encode_image(&ImageBatch::new(pixels, vec![1]).unwrap()).unwrap();
        assert!(to_f64_vec(&out.cls_token).unwrap().iter().all(|v| v.is_finite()));
    }
}
