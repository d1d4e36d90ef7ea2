//! Run configuration, read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ThresholdMode;
use crate::model::ModelConfig;

use super::synth::SynthRecipe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSource {
    /// `path,label,domain` records; paths relative to the manifest.
    Manifest(PathBuf),
    Synthetic(SynthRecipe),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub source: DomainSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 18,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub target: String,
    pub threshold: ThresholdMode,
    pub domains: Vec<DomainSpec>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target: String::new(),
            threshold: ThresholdMode::Eer,
            domains: Vec::new(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Loads and resolves manifest paths against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.domains {
            if let DomainSource::Manifest(p) = &mut d.source {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let Some(w) = &mut cfg.model.backbone.weights {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate domain {:?}", d.name)));
            }
        }
        if !names.contains(self.target.as_str()) {
            return Err(Error::Config(format!("target {:?} is not a configured domain", self.target)));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", o.lr)));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if o.eps <= 0.0 || o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("eps, batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    /// Small model and four synthetic domains that train in a couple of minutes.
    pub fn smoke() -> Self {
        let mut model = ModelConfig::default();
        model.ctx_len = 4;
        let domains = (0..4)
            .map(|i| DomainSpec {
                name: format!("syn{i}"),
                source: DomainSource::Synthetic(SynthRecipe::preset(i, 100, 100)),
            })
            .collect();
        Self {
            seed: 7,
            target: "syn0".into(),
            threshold: ThresholdMode::Eer,
            domains,
            model,
            optim: OptimConfig {
                lr: 3e-4,
                epochs: 10,
                ..OptimConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::smoke();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            target = "a"
            [[domains]]
            name = "a"
            source = { manifest = "a.csv" }
            [[domains]]
            name = "b"
            source = { manifest = "b.csv" }
            [optim]
            epochs = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.optim.batch_size, 18);
        assert_eq!(cfg.optim.weight_decay, 1e-3);
        assert_eq!(cfg.optim.epochs, 2);
        assert_eq!(cfg.model.mvs.i_max, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let mut cfg = RunConfig::smoke();
        cfg.target = "nowhere".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::smoke();
        cfg.domains[1].name = "syn0".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::smoke();
        cfg.optim.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::smoke();
        cfg.model.mvs.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }
}
