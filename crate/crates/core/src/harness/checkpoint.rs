//! Single-file checkpoints: safetensors payload with a JSON config snapshot in
//! the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::MvpFas;

use super::config::RunConfig;
use super::train::Adam;

pub const FORMAT: &str = "mvfas-checkpoint";
pub const VERSION: u32 = 1;

const PARAM: &str = "param.";
const FROZEN: &str = "frozen.";
const ADAM_M: &str = "adam_m.";
const ADAM_V: &str = "adam_v.";

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: MvpFas,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<f64>,
    /// Adam moments by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

fn bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (Dtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    model: &MvpFas,
    optimizer: &Adam,
    epoch: usize,
    history: &[f64],
) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Dtype, Vec<u8>)> = Vec::new();
    let mut push = |name: String, t: &Tensor| -> Result<()> {
        let (dt, b) = bytes(t)?;
        entries.push((name, t.dims().to_vec(), dt, b));
        Ok(())
    };
    for (name, var) in model.store.trainable() {
        push(format!("{PARAM}{name}"), var.as_tensor())?;
    }
    for (name, t) in model.store.frozen() {
        push(format!("{FROZEN}{name}"), &t)?;
    }
    for (name, (m, v)) in &optimizer.moments {
        push(format!("{ADAM_M}{name}"), m)?;
        push(format!("{ADAM_V}{name}"), v)?;
    }
    let views = entries
        .iter()
        .map(|(n, shape, dt, b)| Ok((n.clone(), TensorView::new(*dt, shape.clone(), b).map_err(|e| Error::Checkpoint(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let json = |v: serde_json::Result<String>| v.map_err(|e| Error::Checkpoint(e.to_string()));
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("config".to_string(), json(serde_json::to_string(config))?),
        ("epoch".to_string(), epoch.to_string()),
        ("step".to_string(), optimizer.step.to_string()),
        ("history".to_string(), json(serde_json::to_string(history))?),
    ]);
    let buf = safetensors::tensor::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn to_tensor(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    let dtype = match view.dtype() {
        Dtype::F32 => DType::F32,
        Dtype::F64 => DType::F64,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(Tensor::from_raw_buffer(view.data(), dtype, view.shape(), device)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(bad)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata", path.display())))?;
    let field = |k: &str| -> Result<&String> {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing {k}", path.display())))
    };
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("{}: not an mvfas checkpoint", path.display())));
    }
    let version: u32 = field("version")?.parse().map_err(|_| Error::Checkpoint("bad version".into()))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let parse_err = |e: serde_json::Error| Error::Checkpoint(e.to_string());
    let config: RunConfig = serde_json::from_str(field("config")?).map_err(parse_err)?;
    let history: Vec<f64> = serde_json::from_str(field("history")?).map_err(parse_err)?;
    let epoch: usize = field("epoch")?.parse().map_err(|_| Error::Checkpoint("bad epoch".into()))?;
    let step: usize = field("step")?.parse().map_err(|_| Error::Checkpoint("bad step".into()))?;

    let st = SafeTensors::deserialize(&buf).map_err(bad)?;
    let device = Device::Cpu;
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut dtype = None;
    for (name, view) in st.tensors() {
        let t = to_tensor(&view, &device)?;
        if let Some(n) = name.strip_prefix(PARAM).or_else(|| name.strip_prefix(FROZEN)) {
            dtype.get_or_insert(t.dtype());
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_M) {
            m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            v.insert(n.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    // Stored tensors replace any pretrained initialisation.
    let mut model_cfg = config.model.clone();
    model_cfg.backbone.weights = None;
    let model = MvpFas::new(&model_cfg, config.seed, dtype.unwrap_or(DType::F32), &device)?;
    let expected = model.store.trainable().len() + model.store.frozen().len();
    if params.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} parameters, found {}", params.len())));
    }
    model.store.assign(&params)?;
    let mut moments = BTreeMap::new();
    for (k, mt) in m {
        let vt = v.remove(&k).ok_or_else(|| Error::Checkpoint(format!("missing second moment for {k}")))?;
        moments.insert(k, (mt, vt));
    }
    Ok(Checkpoint {
        config,
        model,
        epoch,
        step,
        history,
        moments,
    })
}

impl Checkpoint {
    pub fn optimizer(&self) -> Result<Adam> {
        let mut opt = Adam::new(self.model.store.trainable(), self.config.optim)?;
        opt.set_moments(self.step, self.moments.clone())?;
        Ok(opt)
    }
}
