//! Classification head, losses, and the alternative text-patch interaction
//! variants used for ablation.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtpa::cross_entropy;
use crate::nn::{softmax, LayerNorm, Linear, Mlp};
use crate::params::Params;
use crate::text_bank::Anchors;

#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B, 2]`, column 0 spoof, column 1 real.
    pub logits: Tensor,
    pub probabilities: Tensor,
    /// `[B]`, probability of the real class.
    pub real_score: Tensor,
}

impl Prediction {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probabilities = softmax(&logits, 1)?;
        let real_score = probabilities.narrow(1, 1, 1)?.squeeze(1)?;
        Ok(Self {
            logits,
            probabilities,
            real_score,
        })
    }
}

/// Global average pooling, a two-layer projection MLP, and a linear classifier.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    proj: Mlp,
    fc: Linear,
}

impl ClassificationHead {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Mlp::new(&p.pp("proj"), dim, dim, dim)?,
            fc: Linear::new(&p.pp("fc"), dim, 2)?,
        })
    }

    /// `features`: `[B, N, D]`, pooled over `N`.
    pub fn classify(&self, features: &Tensor) -> Result<Prediction> {
        let pooled = features.mean(1)?;
        let logits = self.fc.forward(&self.proj.forward(&pooled)?)?;
        Prediction::from_logits(logits)
    }

    pub fn proj(&self) -> &Mlp {
        &self.proj
    }

    pub fn fc(&self) -> &Linear {
        &self.fc
    }
}

pub fn cls_loss(pred: &Prediction, labels: &[u32]) -> Result<Tensor> {
    cross_entropy(&pred.probabilities, labels)
}

pub fn total_loss(cls: &Tensor, mtpa: Option<&Tensor>) -> Result<Tensor> {
    match mtpa {
        Some(m) => Ok((cls + m)?),
        None => Ok(cls.clone()),
    }
}

/// Text-patch interaction block placed between the backbone and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mvs,
    Similarity,
    CrossAttention,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvs" => Ok(Variant::Mvs),
            "similarity" => Ok(Variant::Similarity),
            "cross_attention" => Ok(Variant::CrossAttention),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Cosine similarity between the mean patch and each class anchor, softmaxed
/// at temperature 1 into `[spoof, real]`.
pub fn similarity_prediction(global_aware: &Tensor, anchors: &Anchors) -> Result<Prediction> {
    let mean = global_aware.mean(1)?;
    let unit = |x: &Tensor| -> Result<Tensor> {
        let n = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + crate::mtpa::NORM_FLOOR)?;
        Ok(x.broadcast_div(&n)?)
    };
    let m = unit(&mean)?;
    let classes = Tensor::stack(&[&anchors.negative, &anchors.positive], 1)?;
    let logits = m.matmul(&unit(&classes.t()?)?.t()?)?;
    Prediction::from_logits(logits)
}

/// Single-head cross-attention with texts as queries and patches as keys and values.
#[derive(Clone, Debug)]
pub struct TextCrossAttention {
    norm_texts: LayerNorm,
    norm_patches: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
}

impl TextCrossAttention {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            norm_texts: LayerNorm::new(&p.pp("norm_texts"), dim)?,
            norm_patches: LayerNorm::new(&p.pp("norm_patches"), dim)?,
            to_q: Linear::no_bias(&p.pp("to_q"), dim, dim)?,
            to_k: Linear::no_bias(&p.pp("to_k"), dim, dim)?,
            to_v: Linear::no_bias(&p.pp("to_v"), dim, dim)?,
        })
    }

    /// `patches`: `[B, L, D]`, `texts`: `[2M, D]` to `[B, 2M, D]`.
    pub fn forward(&self, patches: &Tensor, texts: &Tensor) -> Result<Tensor> {
        let (b, _l, d) = patches.dims3()?;
        let views = texts.dim(0)?;
        let texts = texts.unsqueeze(0)?.broadcast_as((b, views, d))?.contiguous()?;
        let q = self.to_q.forward(&self.norm_texts.forward(&texts)?)?;
        let normed = self.norm_patches.forward(patches)?;
        let k = self.to_k.forward(&normed)?;
        let v = self.to_v.forward(&normed)?;
        let logits = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
        let attn = softmax(&logits, 2)?;
        Ok(attn.matmul(&v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtpa::scalar;
    use crate::nn::to_f64_vec;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn head(d: usize) -> ClassificationHead {
        let store = ParamStore::new(3, DType::F64, Device::Cpu);
        ClassificationHead::new(&store.root().pp("head"), d).unwrap()
    }

    #[test]
    fn constant_features_pool_to_the_row() {
        let h = head(3);
        let row = Tensor::new(&[[0.3f64, -0.7, 1.1]], &Device::Cpu).unwrap();
        let f = row.unsqueeze(1).unwrap().broadcast_as((1, 5, 3)).unwrap().contiguous().unwrap();
        let a = h.classify(&f).unwrap();
        let b = h.classify(&row.unsqueeze(1).unwrap()).unwrap();
        let (x, y) = (to_f64_vec(&a.probabilities).unwrap(), to_f64_vec(&b.probabilities).unwrap());
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn probabilities_normalized_and_real_score_is_column_one() {
        let h = head(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = h.classify(&rand_tensor(&mut rng, &[3, 6, 4])).unwrap();
        let p = pred.probabilities.to_vec2::<f64>().unwrap();
        let r = pred.real_score.to_vec1::<f64>().unwrap();
        for (row, s) in p.iter().zip(r) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            assert_eq!(row[1], s);
        }
    }

    #[test]
    fn permuting_patches_leaves_prediction() {
        let h = head(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_tensor(&mut rng, &[2, 5, 4]);
        let idx = Tensor::new(&[4u32, 2, 0, 1, 3], &Device::Cpu).unwrap();
        let a = to_f64_vec(&h.classify(&f).unwrap().probabilities).unwrap();
        let b = to_f64_vec(&h.classify(&f.index_select(&idx, 1).unwrap()).unwrap().probabilities).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn losses() {
        let dev = Device::Cpu;
        let pred = Prediction::from_logits(Tensor::new(&[[0f64, 0.]], &dev).unwrap()).unwrap();
        assert!((scalar(&cls_loss(&pred, &[1]).unwrap()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let a = Tensor::new(0.5f64, &dev).unwrap();
        let b = Tensor::new(0.25f64, &dev).unwrap();
        assert_eq!(scalar(&total_loss(&a, Some(&b)).unwrap()).unwrap(), 0.75);
        assert_eq!(scalar(&total_loss(&a, None).unwrap()).unwrap(), 0.5);
        let z = Tensor::new(0f64, &dev).unwrap();
        assert_eq!(scalar(&total_loss(&z, Some(&z)).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn similarity_prefers_matching_anchor() {
        let dev = Device::Cpu;
        let anchors = Anchors {
            positive: Tensor::new(&[1f64, 1., 0.], &dev).unwrap(),
            negative: Tensor::new(&[1f64, -1., 0.5], &dev).unwrap(),
        };
        let patches = Tensor::new(&[[[2f64, 2., 0.], [0., 0., 0.]]], &dev).unwrap();
        let pred = similarity_prediction(&patches, &anchors).unwrap();
        let p = pred.probabilities.to_vec2::<f64>().unwrap();
        assert!(p[0][1] > p[0][0]);
    }

    #[test]
    fn cross_attention_shapes() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let x = TextCrossAttention::new(&store.root().pp("x"), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = x.forward(&rand_tensor(&mut rng, &[2, 9, 4]), &rand_tensor(&mut rng, &[6, 4])).unwrap();
        assert_eq!(out.dims(), &[2, 6, 4]);
        assert_eq!("cross_attention".parse::<Variant>().unwrap(), Variant::CrossAttention);
        assert!("bogus".parse::<Variant>().is_err());
    }
}
