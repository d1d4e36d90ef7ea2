//! Full model: backbone, prompt context, text-patch interaction, heads and losses.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ImageBatch, ProjectedFeatures};
use crate::error::{Error, Result};
use crate::head::{cls_loss, similarity_prediction, total_loss, ClassificationHead, Prediction, TextCrossAttention, Variant};
use crate::mtpa::{anchor_sets, MtpaClassifier, MtpaConfig, PatchSource};
use crate::mvs::{AttentionScores, MultiViewSlotAttention, MvsConfig};
use crate::params::{ParamStore, Params};
use crate::text_bank::{build_prompts, compute_anchors, Anchors, PromptContext, TextPairBank, DEFAULT_CTX_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// When false the head sees the (global-aware) patches directly.
    pub use_mvs: bool,
    /// When false the total loss is the classification loss alone.
    pub use_mtpa: bool,
    pub variant: Variant,
    /// Fuse the CLS token into every patch before the interaction block.
    pub gape: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_mvs: true,
            use_mtpa: true,
            variant: Variant::Mvs,
            gape: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub positive_texts: Vec<String>,
    pub negative_texts: Vec<String>,
    /// Use only the first `views` pairs of the text lists.
    pub views: Option<usize>,
    pub ctx_len: usize,
    pub mvs: MvsConfig,
    pub mtpa: MtpaConfig,
    pub ablation: AblationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let full = TextPairBank::paraphrases(crate::text_bank::PARAPHRASE_PAIRS.len()).expect("valid bank");
        Self {
            backbone: BackboneConfig::desk(),
            positive_texts: full.positive().to_vec(),
            negative_texts: full.negative().to_vec(),
            views: Some(crate::text_bank::DEFAULT_VIEWS),
            ctx_len: DEFAULT_CTX_LEN,
            mvs: MvsConfig::default(),
            mtpa: MtpaConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn bank(&self) -> Result<TextPairBank> {
        let bank = TextPairBank::new(self.positive_texts.clone(), self.negative_texts.clone())?;
        match self.views {
            Some(m) => bank.truncate(m),
            None => Ok(bank),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bank()?;
        self.backbone.grid()?;
        if self.ctx_len == 0 {
            return Err(Error::Config("ctx_len must be positive".into()));
        }
        if self.mvs.epsilon <= 0.0 {
            return Err(Error::Config("mvs.epsilon must be positive".into()));
        }
        if self.mtpa.alpha <= 0.0 {
            return Err(Error::Config("mtpa.alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Everything downstream of the encoders.
#[derive(Clone, Debug)]
pub struct Heads {
    pub mvs: MultiViewSlotAttention,
    pub cross_attention: TextCrossAttention,
    pub mtpa: MtpaClassifier,
    pub classifier: ClassificationHead,
}

#[derive(Clone, Debug)]
pub struct Losses {
    pub cls: Tensor,
    pub mtpa: Option<Tensor>,
    pub total: Tensor,
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub prediction: Prediction,
    /// MTPA probabilities per anchor set.
    pub mtpa_probabilities: Vec<Tensor>,
    pub mvs_attention: Vec<AttentionScores>,
    pub losses: Option<Losses>,
}

impl Heads {
    pub fn new(p: &Params, dim: usize, mvs: MvsConfig) -> Result<Self> {
        Ok(Self {
            mvs: MultiViewSlotAttention::new(&p.pp("mvs"), dim, mvs)?,
            cross_attention: TextCrossAttention::new(&p.pp("xattn"), dim)?,
            mtpa: MtpaClassifier::new(&p.pp("mtpa"), dim)?,
            classifier: ClassificationHead::new(&p.pp("head"), dim)?,
        })
    }

    /// `features` from the backbone, `s_kv` `[2M, D]`. Labels are required for
    /// the losses and for MTPA (whose anchor is chosen by label).
    pub fn forward(
        &self,
        features: &ProjectedFeatures,
        s_kv: &Tensor,
        labels: Option<&[u32]>,
        mtpa_cfg: &MtpaConfig,
        ablation: &AblationConfig,
    ) -> Result<HeadOutput> {
        let queries = if ablation.gape {
            &features.global_aware
        } else {
            &features.patches_proj
        };
        let anchors = compute_anchors(s_kv)?;
        let mut mvs_attention = Vec::new();
        let prediction = if !ablation.use_mvs {
            self.classifier.classify(queries)?
        } else {
            match ablation.variant {
                Variant::Mvs => {
                    let out = self.mvs.forward(queries, s_kv)?;
                    mvs_attention = out.attention;
                    self.classifier.classify(&out.features)?
                }
                Variant::Similarity => similarity_prediction(queries, &anchors)?,
                Variant::CrossAttention => {
                    let tokens = self.cross_attention.forward(queries, s_kv)?;
                    self.classifier.classify(&tokens)?
                }
            }
        };

        let Some(labels) = labels else {
            return Ok(HeadOutput {
                prediction,
                mtpa_probabilities: Vec::new(),
                mvs_attention,
                losses: None,
            });
        };

        let mut mtpa_probabilities = Vec::new();
        let mtpa_loss = if ablation.use_mtpa {
            let e = match mtpa_cfg.patch_source {
                PatchSource::Patches => &features.patches_proj,
                PatchSource::GlobalAware => &features.global_aware,
            };
            let sets = anchor_sets(mtpa_cfg.anchor, s_kv, &anchors)?;
            let mut per_set = Vec::with_capacity(sets.len());
            for a in &sets {
                let (p, l) = self.mtpa.loss(e, labels, a, mtpa_cfg.alpha)?;
                mtpa_probabilities.push(p);
                per_set.push(l);
            }
            let n = per_set.len() as f64;
            Some((Tensor::stack(&per_set, 0)?.sum_all()? / n)?)
        } else {
            None
        };
        let cls = cls_loss(&prediction, labels)?;
        let total = total_loss(&cls, mtpa_loss.as_ref())?;
        Ok(HeadOutput {
            prediction,
            mtpa_probabilities,
            mvs_attention,
            losses: Some(Losses {
                cls,
                mtpa: mtpa_loss,
                total,
            }),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub features: ProjectedFeatures,
    pub text_embeddings: Tensor,
    pub anchors: Anchors,
    pub heads: HeadOutput,
}

/// The assembled model together with the store owning its parameters.
#[derive(Clone)]
pub struct MvpFas {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub bank: TextPairBank,
    pub backbone: Backbone,
    pub context: PromptContext,
    pub heads: Heads,
}

/// Parameter-name prefixes of the frozen text encoder.
pub const TEXT_ENCODER_PREFIX: &str = "text_encoder";

impl MvpFas {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype, device.clone());
        let root = store.root();
        let bank = config.bank()?;
        let backbone = Backbone::new(&root, &config.backbone)?;
        let context = PromptContext::new(&root.pp("prompt"), config.ctx_len, config.backbone.text_width)?;
        let heads = Heads::new(&root, config.backbone.embed_dim, config.mvs)?;
        if let Some(path) = &config.backbone.weights {
            let n = crate::backbone::load_clip_vision_weights(path, &store, &config.backbone)?;
            log::info!("loaded {n} pretrained vision tensors from {}", path.display());
        }
        Ok(Self {
            config: config.clone(),
            store,
            bank,
            backbone,
            context,
            heads,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `S_kv`: `[2M, D]`.
    pub fn encode_texts(&self) -> Result<Tensor> {
        let prompts = build_prompts(&self.bank, &self.context)?;
        self.backbone.text.encode_prompts(&prompts)
    }

    pub fn forward(&self, batch: &ImageBatch, with_losses: bool) -> Result<ModelOutput> {
        let enc = self.backbone.encode_image(batch)?;
        let features = self.backbone.projections.project_and_fuse(&enc)?;
        let text_embeddings = self.encode_texts()?;
        let anchors = compute_anchors(&text_embeddings)?;
        let labels = with_losses.then_some(batch.labels.as_slice());
        let heads = self.heads.forward(
            &features,
            &text_embeddings,
            labels,
            &self.config.mtpa,
            &self.config.ablation,
        )?;
        Ok(ModelOutput {
            features,
            text_embeddings,
            anchors,
            heads,
        })
    }

    /// Real-class probability per image.
    pub fn scores(&self, batch: &ImageBatch) -> Result<Vec<f64>> {
        let out = self.forward(batch, false)?;
        crate::nn::to_f64_vec(&out.heads.prediction.real_score)
    }

    pub fn text_encoder_checksum(&self) -> Result<String> {
        self.store.checksum(TEXT_ENCODER_PREFIX)
    }
}
