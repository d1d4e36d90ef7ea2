//! Adam optimisation of the total loss over shuffled minibatches.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::MvpFas;
use crate::mtpa::scalar;

use super::config::{OptimConfig, RunConfig};
use super::data::{make_batch, Sample};

/// Adam with L2 weight decay added to the gradient.
pub struct Adam {
    pub config: OptimConfig,
    pub step: usize,
    vars: Vec<(String, Var)>,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: OptimConfig) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, v) in &vars {
            let z = v.as_tensor().zeros_like()?;
            moments.insert(name.clone(), (z.clone(), z));
        }
        Ok(Self {
            config,
            step: 0,
            vars,
            moments,
        })
    }

    pub fn set_moments(&mut self, step: usize, moments: BTreeMap<String, (Tensor, Tensor)>) -> Result<()> {
        for (name, v) in &self.vars {
            let (m, s) = moments
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))?;
            if m.dims() != v.dims() || s.dims() != v.dims() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
            }
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }

    /// Parameters without a gradient (unused by the active variant) are left alone.
    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Detached so the moments do not chain autograd history across steps.
            let theta = var.as_tensor().detach();
            let g = g.detach();
            let g = if c.weight_decay > 0.0 {
                (g + (&theta * c.weight_decay)?)?
            } else {
                g
            };
            let (m, v) = self.moments.get_mut(name).expect("moment per var");
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(&theta - (update * c.lr)?)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Compare the text-encoder checksum after every step instead of every epoch.
    pub check_frozen_every_step: bool,
}

pub struct TrainOutcome {
    pub model: MvpFas,
    pub optimizer: Adam,
    /// Sample-weighted mean loss per epoch.
    pub history: Vec<f64>,
    pub epochs: usize,
}

pub const TRAIN_DTYPE: DType = DType::F32;

/// Fresh model from `cfg.seed`, trained on `samples`.
pub fn train(cfg: &RunConfig, samples: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = MvpFas::new(&cfg.model, cfg.seed, TRAIN_DTYPE, &Device::Cpu)?;
    train_model(cfg, model, samples, opts)
}

pub fn train_model(cfg: &RunConfig, model: MvpFas, samples: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::Config(format!("training sample {} has no label", s.id)));
    }
    let size = cfg.model.backbone.image_size;
    let mut optimizer = Adam::new(model.store.trainable(), cfg.optim)?;
    let frozen = model.text_encoder_checksum()?;
    let verify = |m: &MvpFas| -> Result<()> {
        if m.text_encoder_checksum()? != frozen {
            return Err(Error::Numeric("text encoder parameters changed during training".into()));
        }
        Ok(())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.optim.epochs);
    let mut epochs = 0;
    'outer: for epoch in 0..cfg.optim.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.optim.batch_size) {
            if opts.max_steps.is_some_and(|m| optimizer.step >= m) {
                break 'outer;
            }
            let batch = make_batch(samples, chunk, size, model.dtype(), model.device())?;
            let out = model.forward(&batch, true)?;
            let loss = out.heads.losses.expect("losses requested").total;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {} step {}",
                    epoch + 1,
                    optimizer.step + 1
                )));
            }
            let grads = loss.backward()?;
            optimizer.apply(&grads)?;
            if opts.check_frozen_every_step {
                verify(&model)?;
            }
            sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        verify(&model)?;
        history.push(sum / seen as f64);
        epochs += 1;
        log::info!("epoch {} loss {:.6}", epoch + 1, sum / seen as f64);
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_scalar_reference() {
        let var = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let cfg = OptimConfig { lr: 0.1, weight_decay: 0.01, ..OptimConfig::default() };
        let mut opt = Adam::new(vec![("w".into(), var.clone())], cfg).unwrap();
        let (mut m, mut v, mut th) = ([0f64; 2], [0f64; 2], [1.0f64, -2.0]);
        for t in 1..=3 {
            // loss = sum(w^2)
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.apply(&loss.backward().unwrap()).unwrap();
            for i in 0..2 {
                let g = 2.0 * th[i] + 0.01 * th[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                th[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = var.as_tensor().to_vec1::<f64>().unwrap();
        for i in 0..2 {
            assert!((got[i] - th[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let var = Var::new(&[0.5f64, 0.25], &Device::Cpu).unwrap();
        let cfg = OptimConfig { lr: 0.0, ..OptimConfig::default() };
        let mut opt = Adam::new(vec![("w".into(), var.clone())], cfg).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.apply(&loss.backward().unwrap()).unwrap();
        assert_eq!(var.as_tensor().to_vec1::<f64>().unwrap(), vec![0.5, 0.25]);
    }
}
