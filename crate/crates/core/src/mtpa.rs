//! Multi-text patch alignment.
//!
//! Each patch is weighted by a sigmoid of its cosine similarity to the anchor
//! of the image's own class; the weighted patches are summed and classified by
//! an auxiliary linear layer trained with cross-entropy.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax, Linear};
use crate::params::Params;
use crate::text_bank::Anchors;

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const NORM_FLOOR: f64 = 1e-12;
pub const LOG_FLOOR: f64 = 1e-12;

/// Which patch embeddings are aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    /// Projected patches before CLS fusion.
    Patches,
    /// Global-aware patches.
    GlobalAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    /// Mean of every text of the class.
    Mean,
    /// The first text pair only.
    Single,
    /// Every pair separately; losses averaged.
    Individual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtpaConfig {
    pub alpha: f64,
    pub patch_source: PatchSource,
    pub anchor: AnchorKind,
}

impl Default for MtpaConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            patch_source: PatchSource::Patches,
            anchor: AnchorKind::Mean,
        }
    }
}

/// `[B, D]` rows: the positive anchor for real images, the negative one for spoofs.
pub fn select_anchor(labels: &[u32], anchors: &Anchors) -> Result<Tensor> {
    let rows = labels
        .iter()
        .map(|&l| match l {
            1 => Ok(anchors.positive.clone()),
            0 => Ok(anchors.negative.clone()),
            other => Err(Error::InvalidLabel(other as i64)),
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Shape("empty label batch".into()));
    }
    Ok(Tensor::stack(&rows, 0)?)
}

fn normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + NORM_FLOOR)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Cosine similarity `[B, L, 1]` between patches `[B, L, D]` and anchor rows `[B, D]`.
pub fn patch_similarity(e: &Tensor, anchor_rows: &Tensor) -> Result<Tensor> {
    let (b, _l, d) = e.dims3()?;
    let (ba, da) = anchor_rows.dims2()?;
    if b != ba || d != da {
        return Err(Error::Shape(format!("patches {:?} vs anchors {:?}", e.dims(), anchor_rows.dims())));
    }
    let a = normalize(anchor_rows)?.unsqueeze(2)?;
    Ok(normalize(e)?.matmul(&a)?)
}

pub fn soft_mask(similarity: &Tensor, alpha: f64) -> Result<Tensor> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    sigmoid(&(similarity * alpha)?)
}

/// Auxiliary classifier over soft-masked patch sums.
#[derive(Clone, Debug)]
pub struct MtpaClassifier {
    pub fc: Linear,
}

impl MtpaClassifier {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(&p.pp("fc"), dim, 2)?,
        })
    }

    /// `softmax(FC(sum_l mask_l * E_l))`, `[B, 2]`.
    pub fn probability(&self, mask: &Tensor, e: &Tensor) -> Result<Tensor> {
        let pooled = mask.broadcast_mul(e)?.sum(1)?;
        softmax(&self.fc.forward(&pooled)?, 1)
    }

    /// Loss for one anchor pair.
    pub fn loss(&self, e: &Tensor, labels: &[u32], anchors: &Anchors, alpha: f64) -> Result<(Tensor, Tensor)> {
        let rows = select_anchor(labels, anchors)?;
        let mask = soft_mask(&patch_similarity(e, &rows)?, alpha)?;
        let p = self.probability(&mask, e)?;
        let loss = cross_entropy(&p, labels)?;
        Ok((p, loss))
    }
}

pub fn mtpa_probability(mask: &Tensor, e: &Tensor, classifier: &MtpaClassifier) -> Result<Tensor> {
    classifier.probability(mask, e)
}

/// Mean over the batch of `-log p[b, label_b]`, with the probability floored.
pub fn cross_entropy(p: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, classes) = p.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} predictions but {} labels", labels.len())));
    }
    let mut onehot = vec![0f64; b * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::InvalidLabel(l as i64));
        }
        onehot[i * classes + l as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, classes), p.device())?.to_dtype(p.dtype())?;
    let picked = (p * onehot)?.sum(1)?;
    let floor = Tensor::new(LOG_FLOOR, p.device())?.to_dtype(p.dtype())?;
    let nll = picked.broadcast_maximum(&floor)?.log()?.neg()?;
    Ok(nll.mean_all()?)
}

pub fn mtpa_loss(p: &Tensor, labels: &[u32]) -> Result<Tensor> {
    cross_entropy(p, labels)
}

/// Anchor pairs used by the configured anchor kind.
pub fn anchor_sets(kind: AnchorKind, text_embeddings: &Tensor, mean: &Anchors) -> Result<Vec<Anchors>> {
    let (rows, _) = text_embeddings.dims2()?;
    let m = rows / 2;
    let pair = |j: usize| -> Result<Anchors> {
        Ok(Anchors {
            positive: text_embeddings.get(j)?,
            negative: text_embeddings.get(m + j)?,
        })
    };
    match kind {
        AnchorKind::Mean => Ok(vec![mean.clone()]),
        AnchorKind::Single => Ok(vec![pair(0)?]),
        AnchorKind::Individual => (0..m).map(pair).collect(),
    }
}

/// Scalar as `f64` regardless of dtype.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::params::ParamStore;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anchors() -> Anchors {
        Anchors {
            positive: Tensor::new(&[1f64, 0., 0.], &Device::Cpu).unwrap(),
            negative: Tensor::new(&[0f64, 1., 0.], &Device::Cpu).unwrap(),
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn anchor_selection_follows_labels() {
        let a = anchors();
        let rows = select_anchor(&[1, 0], &a).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(rows, vec![vec![1., 0., 0.], vec![0., 1., 0.]]);
        let rows = select_anchor(&[1, 1, 1], &a).unwrap().to_vec2::<f64>().unwrap();
        assert!(rows.iter().all(|r| r == &vec![1., 0., 0.]));
        assert!(matches!(select_anchor(&[2], &a), Err(Error::InvalidLabel(2))));
    }

    #[test]
    fn cosine_special_cases() {
        let anchor = Tensor::new(&[[1f64, 2., -1.]], &Device::Cpu).unwrap();
        let e = Tensor::new(&[[[1f64, 2., -1.], [-1., -2., 1.], [2., -1., 0.]]], &Device::Cpu).unwrap();
        let c = to_f64_vec(&patch_similarity(&e, &anchor).unwrap()).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!((c[1] + 1.0).abs() < 1e-12);
        assert!(c[2].abs() < 1e-12);
    }

    #[test]
    fn zero_patch_does_not_divide_by_zero() {
        let anchor = Tensor::new(&[[1f64, 0.]], &Device::Cpu).unwrap();
        let e = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let c = to_f64_vec(&patch_similarity(&e, &anchor).unwrap()).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn soft_mask_closed_forms() {
        let c = Tensor::new(&[0f64, 1., -1.], &Device::Cpu).unwrap();
        let m = to_f64_vec(&soft_mask(&c, 10.0).unwrap()).unwrap();
        assert_eq!(m[0], 0.5);
        assert!((m[1] - 0.9999546).abs() < 1e-7);
        assert!((m[2] - 4.5398e-5).abs() < 1e-9);
        assert!(soft_mask(&c, 0.0).is_err());
    }

    #[test]
    fn zero_mask_gives_softmax_of_bias() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let clf = MtpaClassifier::new(&store.root().pp("mtpa"), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = rand_tensor(&mut rng, &[2, 4, 3]);
        let mask = Tensor::zeros((2, 4, 1), DType::F64, &Device::Cpu).unwrap();
        let p = mtpa_probability(&mask, &e, &clf).unwrap().to_vec2::<f64>().unwrap();
        let bias = to_f64_vec(clf.fc.bias.as_ref().unwrap()).unwrap();
        let z = bias[0].exp() + bias[1].exp();
        for row in p {
            assert!((row[0] - bias[0].exp() / z).abs() < 1e-12);
            assert!((row[1] - bias[1].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_matches_loop_oracle() {
        let store = ParamStore::new(1, DType::F64, Device::Cpu);
        let clf = MtpaClassifier::new(&store.root().pp("mtpa"), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, l, d) = (3, 4, 5);
        let e = rand_tensor(&mut rng, &[b, l, d]);
        let mask = rand_tensor(&mut rng, &[b, l, 1]).abs().unwrap();
        let p = mtpa_probability(&mask, &e, &clf).unwrap().to_vec2::<f64>().unwrap();
        let ev = e.to_vec3::<f64>().unwrap();
        let mv = mask.to_vec3::<f64>().unwrap();
        let w = clf.fc.weight.to_vec2::<f64>().unwrap();
        let bias = to_f64_vec(clf.fc.bias.as_ref().unwrap()).unwrap();
        for bi in 0..b {
            let mut pooled = vec![0.0; d];
            for li in 0..l {
                for x in 0..d {
                    pooled[x] += mv[bi][li][0] * ev[bi][li][x];
                }
            }
            let logits: Vec<f64> = (0..2).map(|c| bias[c] + (0..d).map(|x| pooled[x] * w[x][c]).sum::<f64>()).collect();
            let mx = logits[0].max(logits[1]);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..2 {
                assert!((p[bi][c] - (logits[c] - mx).exp() / z).abs() < 1e-10);
            }
            assert!((p[bi][0] + p[bi][1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let dev = Device::Cpu;
        let onehot = Tensor::new(&[[1f64, 0.], [0., 1.]], &dev).unwrap();
        assert_eq!(scalar(&mtpa_loss(&onehot, &[0, 1]).unwrap()).unwrap(), 0.0);
        let uniform = Tensor::new(&[[0.5f64, 0.5]], &dev).unwrap();
        assert!((scalar(&mtpa_loss(&uniform, &[1]).unwrap()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = Tensor::new(&[[0.9f64, 0.1], [0.2, 0.8]], &dev).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        let got = scalar(&mtpa_loss(&p, &[0, 1]).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.1643).abs() < 1e-4);
        let zero = Tensor::new(&[[0f64, 1.]], &dev).unwrap();
        let floored = scalar(&mtpa_loss(&zero, &[0]).unwrap()).unwrap();
        assert!((floored + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn anchor_kinds() {
        let e = Tensor::new(&[[1f64, 0.], [2., 0.], [0., 1.], [0., 2.]], &Device::Cpu).unwrap();
        let mean = crate::text_bank::compute_anchors(&e).unwrap();
        assert_eq!(anchor_sets(AnchorKind::Mean, &e, &mean).unwrap().len(), 1);
        let single = anchor_sets(AnchorKind::Single, &e, &mean).unwrap();
        assert_eq!(single[0].negative.to_vec1::<f64>().unwrap(), vec![0., 1.]);
        let ind = anchor_sets(AnchorKind::Individual, &e, &mean).unwrap();
        assert_eq!(ind.len(), 2);
        assert_eq!(ind[1].positive.to_vec1::<f64>().unwrap(), vec![2., 0.]);
    }

    proptest! {
        #[test]
        fn mask_is_monotone_and_bounded(mut c in proptest::collection::vec(-1.0f64..1.0, 2..20), alpha in 0.5f64..20.0) {
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c.dedup();
            let t = Tensor::new(c.as_slice(), &Device::Cpu).unwrap();
            let m = to_f64_vec(&soft_mask(&t, alpha).unwrap()).unwrap();
            let lo = 1.0 / (1.0 + alpha.exp());
            let hi = 1.0 / (1.0 + (-alpha).exp());
            for w in m.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for v in &m {
                prop_assert!(*v >= lo && *v <= hi);
            }
        }

        #[test]
        fn similarity_is_scale_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 12), a in proptest::collection::vec(-3.0f64..3.0, 3), scale in 0.01f64..100.0) {
            prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-3);
            let e = Tensor::from_vec(vals, (1, 4, 3), &Device::Cpu).unwrap();
            let anchor = Tensor::from_vec(a, (1, 3), &Device::Cpu).unwrap();
            let base = to_f64_vec(&patch_similarity(&e, &anchor).unwrap()).unwrap();
            let scaled = to_f64_vec(&patch_similarity(&(e * scale).unwrap(), &anchor).unwrap()).unwrap();
            for (x, y) in base.iter().zip(&scaled) {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!(*x >= -1.0 - 1e-12 && *x <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn loss_is_non_negative(p0 in 0.0f64..1.0, label in 0u32..2) {
            let p = Tensor::new(&[[p0, 1.0 - p0]], &Device::Cpu).unwrap();
            prop_assert!(scalar(&cross_entropy(&p, &[label]).unwrap()).unwrap() >= 0.0);
        }
    }
}
