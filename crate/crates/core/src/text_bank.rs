//! Paraphrased class texts, the shared learnable prompt context, and the
//! per-polarity mean anchors derived from encoded prompts.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, Params};

/// Paraphrase pairs ordered by their single-view reference HTER, best first.
pub const PARAPHRASE_PAIRS: [(&str, &str); 5] = [
    ("real face", "spoof face"),
    ("bonafide face", "attack face"),
    ("genuine face", "fake face"),
    ("true face", "false face"),
    ("verified face", "deceptive face"),
];

pub const DEFAULT_VIEWS: usize = 3;
pub const DEFAULT_CTX_LEN: usize = 16;
pub const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// `M` positive and `M` negative class texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPairBank {
    positive: Vec<String>,
    negative: Vec<String>,
}

impl TextPairBank {
    pub fn new(positive: Vec<String>, negative: Vec<String>) -> Result<Self> {
        if positive.is_empty() {
            return Err(Error::InvalidBank("at least one text pair is required".into()));
        }
        if positive.len() != negative.len() {
            return Err(Error::InvalidBank(format!(
                "{} positive texts but {} negative texts",
                positive.len(),
                negative.len()
            )));
        }
        for (name, texts) in [("positive", &positive), ("negative", &negative)] {
            for (i, t) in texts.iter().enumerate() {
                if t.trim().is_empty() {
                    return Err(Error::InvalidBank(format!("{name} text {i} is empty")));
                }
                if texts[..i].contains(t) {
                    return Err(Error::InvalidBank(format!("duplicate {name} text {t:?}")));
                }
            }
        }
        Ok(Self { positive, negative })
    }

    /// The first `views` pairs of [`PARAPHRASE_PAIRS`].
    pub fn paraphrases(views: usize) -> Result<Self> {
        if views == 0 || views > PARAPHRASE_PAIRS.len() {
            return Err(Error::InvalidBank(format!(
                "views must be in 1..={}, got {views}",
                PARAPHRASE_PAIRS.len()
            )));
        }
        let (p, n) = PARAPHRASE_PAIRS[..views]
            .iter()
            .map(|(p, n)| (p.to_string(), n.to_string()))
            .unzip();
        Self::new(p, n)
    }

    /// Number of views per polarity.
    pub fn views(&self) -> usize {
        self.positive.len()
    }

    pub fn positive(&self) -> &[String] {
        &self.positive
    }

    pub fn negative(&self) -> &[String] {
        &self.negative
    }

    /// Keep only the first `views` pairs.
    pub fn truncate(&self, views: usize) -> Result<Self> {
        if views == 0 || views > self.views() {
            return Err(Error::InvalidBank(format!(
                "cannot take {views} views from a bank of {}",
                self.views()
            )));
        }
        Self::new(self.positive[..views].to_vec(), self.negative[..views].to_vec())
    }
}

impl Default for TextPairBank {
    fn default() -> Self {
        Self::paraphrases(DEFAULT_VIEWS).expect("built-in bank is valid")
    }
}

/// Learnable context vectors shared by every class prompt.
#[derive(Clone, Debug)]
pub struct PromptContext {
    pub vectors: Tensor,
}

impl PromptContext {
    pub fn new(p: &Params, ctx_len: usize, width: usize) -> Result<Self> {
        if ctx_len == 0 {
            return Err(Error::Config("ctx_len must be positive".into()));
        }
        let vectors = p.get("vectors", &[ctx_len, width], Init::Normal { std: CONTEXT_INIT_STD })?;
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One `[V][CLASS]` prompt before tokenization.
#[derive(Clone, Debug)]
pub struct PromptSpec {
    pub context: Tensor,
    pub class_text: String,
    pub polarity: Polarity,
    pub view: usize,
}

/// Prompts ordered `[positive_1..positive_M, negative_1..negative_M]`, all sharing one context.
pub fn build_prompts(bank: &TextPairBank, context: &PromptContext) -> Result<Vec<PromptSpec>> {
    let positives = bank.positive.iter().enumerate().map(|(i, t)| (Polarity::Positive, i, t));
    let negatives = bank.negative.iter().enumerate().map(|(i, t)| (Polarity::Negative, i, t));
    positives
        .chain(negatives)
        .map(|(polarity, view, text)| {
            if text.trim().is_empty() {
                return Err(Error::InvalidBank(format!("empty class text at view {view}")));
            }
            Ok(PromptSpec {
                context: context.vectors.clone(),
                class_text: text.clone(),
                polarity,
                view,
            })
        })
        .collect()
}

/// Mean text embedding per polarity.
#[derive(Clone, Debug)]
pub struct Anchors {
    pub positive: Tensor,
    pub negative: Tensor,
}

/// Means of the positive block (first `M` rows) and the negative block (last `M` rows).
pub fn compute_anchors(text_embeddings: &Tensor) -> Result<Anchors> {
    let (rows, _dim) = text_embeddings.dims2()?;
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::Shape(format!(
            "text embeddings need an even, non-zero row count, got {rows}"
        )));
    }
    if crate::nn::to_f64_vec(text_embeddings)?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite text embedding".into()));
    }
    let m = rows / 2;
    Ok(Anchors {
        positive: text_embeddings.narrow(0, 0, m)?.mean(0)?,
        negative: text_embeddings.narrow(0, m, m)?.mean(0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ctx() -> PromptContext {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        PromptContext::new(&store.root().pp("ctx"), 4, 8).unwrap()
    }

    #[test]
    fn three_views_give_six_prompts_positive_first() {
        let bank = TextPairBank::paraphrases(3).unwrap();
        let prompts = build_prompts(&bank, &ctx()).unwrap();
        assert_eq!(prompts.len(), 6);
        assert!(prompts[..3].iter().all(|p| p.polarity == Polarity::Positive));
        assert!(prompts[3..].iter().all(|p| p.polarity == Polarity::Negative));
        assert_eq!(prompts[0].class_text, "real face");
        assert_eq!(prompts[5].class_text, "fake face");
    }

    #[test]
    fn single_pair_bank() {
        let bank = TextPairBank::new(vec!["real face".into()], vec!["spoof face".into()]).unwrap();
        let prompts = build_prompts(&bank, &ctx()).unwrap();
        assert_eq!(prompts.len(), 2);
        assert_eq!(prompts[1].class_text, "spoof face");
    }

    #[test]
    fn prompts_share_context_and_are_stable() {
        let bank = TextPairBank::default();
        let c = ctx();
        let a = build_prompts(&bank, &c).unwrap();
        let b = build_prompts(&bank, &c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.class_text, y.class_text);
            assert_eq!(x.context.id(), c.vectors.id());
        }
    }

    #[test]
    fn invalid_banks_rejected() {
        assert!(matches!(
            TextPairBank::new(vec!["".into()], vec!["spoof face".into()]),
            Err(Error::InvalidBank(_))
        ));
        assert!(TextPairBank::new(vec![], vec![]).is_err());
        assert!(TextPairBank::new(vec!["a".into()], vec!["b".into(), "c".into()]).is_err());
        assert!(TextPairBank::new(vec!["a".into(), "a".into()], vec!["b".into(), "c".into()]).is_err());
        assert!(TextPairBank::paraphrases(6).is_err());
    }

    #[test]
    fn single_view_anchors_are_the_rows() {
        let e = Tensor::new(&[[1f64, 2., 3.], [4., 5., 6.]], &Device::Cpu).unwrap();
        let a = compute_anchors(&e).unwrap();
        assert_eq!(a.positive.to_vec1::<f64>().unwrap(), vec![1., 2., 3.]);
        assert_eq!(a.negative.to_vec1::<f64>().unwrap(), vec![4., 5., 6.]);
    }

    #[test]
    fn identical_positive_rows_give_that_row() {
        let e = Tensor::new(
            &[[0.5f64, -1.0], [0.5, -1.0], [0.5, -1.0], [1., 1.], [2., 2.], [3., 3.]],
            &Device::Cpu,
        )
        .unwrap();
        let a = compute_anchors(&e).unwrap();
        assert_eq!(a.positive.to_vec1::<f64>().unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn anchors_match_loop_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, d) = (3, 7);
        let rows: Vec<Vec<f64>> = (0..2 * m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let e = Tensor::from_vec(flat, (2 * m, d), &Device::Cpu).unwrap();
        let a = compute_anchors(&e).unwrap();
        let pos = a.positive.to_vec1::<f64>().unwrap();
        let neg = a.negative.to_vec1::<f64>().unwrap();
        for k in 0..d {
            let mut sp = 0.0;
            let mut sn = 0.0;
            for j in 0..m {
                sp += rows[j][k];
                sn += rows[m + j][k];
            }
            assert!((pos[k] - sp / m as f64).abs() < 1e-12);
            assert!((neg[k] - sn / m as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_embeddings_rejected() {
        let e = Tensor::new(&[[f64::NAN, 0.], [0., 0.]], &Device::Cpu).unwrap();
        assert!(matches!(compute_anchors(&e), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn anchors_are_linear_and_block_permutation_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 6 * 3),
            c in -3.0f64..3.0,
            perm in Just([2usize, 0, 1]),
        ) {
            let e = Tensor::from_vec(vals.clone(), (6, 3), &Device::Cpu).unwrap();
            let a = compute_anchors(&e).unwrap();
            let scaled = compute_anchors(&(e.clone() * c).unwrap()).unwrap();
            let pa = to_f64_vec(&a.positive).unwrap();
            let ps = to_f64_vec(&scaled.positive).unwrap();
            for (x, y) in pa.iter().zip(&ps) {
                prop_assert!((x * c - y).abs() < 1e-9);
            }
            let mut order: Vec<usize> = perm.to_vec();
            order.extend([5, 3, 4]);
            let idx = Tensor::new(order.iter().map(|&i| i as u32).collect::<Vec<_>>(), &Device::Cpu).unwrap();
            let permuted = compute_anchors(&e.index_select(&idx, 0).unwrap()).unwrap();
            let pp = to_f64_vec(&permuted.positive).unwrap();
            let np = to_f64_vec(&permuted.negative).unwrap();
            let na = to_f64_vec(&a.negative).unwrap();
            for k in 0..3 {
                prop_assert!((pp[k] - pa[k]).abs() < 1e-12);
                prop_assert!((np[k] - na[k]).abs() < 1e-12);
            }
        }
    }
}
