//! Labelled image samples, manifests and batching.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use crate::backbone::ImageBatch;
use crate::error::{Error, Result};

use super::config::{DomainSource, DomainSpec};
use super::synth;

pub const MANIFEST_HEADER: [&str; 3] = ["path", "label", "domain"];

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    /// `None` for unlabelled data.
    pub label: Option<u32>,
    /// `H * W * 3` values in `[0, 1]`, row-major.
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: Option<u32>,
    pub domain: String,
}

fn parse_label(s: &str) -> Result<Option<u32>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    let v: i64 = s
        .parse()
        .map_err(|_| Error::Config(format!("label {s:?} is not an integer")))?;
    match v {
        0 | 1 => Ok(Some(v as u32)),
        other => Err(Error::InvalidLabel(other)),
    }
}

/// Reads `path,label,domain` records; a header row is optional and the label
/// column may be empty for unlabelled data.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        if row.len() != 3 {
            return Err(Error::Config(format!("{}: row {} has {} fields, expected 3", path.display(), i + 1, row.len())));
        }
        if i == 0 && row.iter().zip(MANIFEST_HEADER).all(|(a, b)| a.eq_ignore_ascii_case(b)) {
            continue;
        }
        out.push(ManifestRecord {
            path: PathBuf::from(&row[0]),
            label: parse_label(&row[1])?,
            domain: row[2].to_string(),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([r.path.to_string_lossy().as_ref(), label.as_str(), r.domain.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn image_to_pixels(img: &RgbImage, size: usize) -> Vec<f32> {
    let resized;
    let img = if img.width() as usize != size || img.height() as usize != size {
        resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    } else {
        img
    };
    img.as_raw().iter().map(|&v| v as f32 / 255.0).collect()
}

pub fn load_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(image_to_pixels(&img.to_rgb8(), size))
}

/// All samples of one domain, resized to `size`.
pub fn load_domain(spec: &DomainSpec, size: usize) -> Result<Vec<Sample>> {
    match &spec.source {
        DomainSource::Synthetic(recipe) => Ok(synth::generate(&spec.name, recipe)?
            .into_iter()
            .map(|s| Sample {
                pixels: image_to_pixels(&s.image, size),
                id: s.id,
                domain: spec.name.clone(),
                label: Some(s.label),
            })
            .collect()),
        DomainSource::Manifest(path) => {
            let base = path.parent().unwrap_or(Path::new("."));
            let mut out = Vec::new();
            for r in read_manifest(path)?.into_iter().filter(|r| r.domain == spec.name) {
                let full = if r.path.is_relative() { base.join(&r.path) } else { r.path.clone() };
                out.push(Sample {
                    id: r.path.to_string_lossy().into_owned(),
                    domain: r.domain,
                    label: r.label,
                    pixels: load_image(&full, size)?,
                });
            }
            if out.is_empty() {
                return Err(Error::Config(format!("{}: no samples for domain {:?}", path.display(), spec.name)));
            }
            Ok(out)
        }
    }
}

pub fn load_domains(specs: &[DomainSpec], size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in specs {
        out.extend(load_domain(s, size)?);
    }
    Ok(out)
}

/// Stacks the indexed samples into a batch; unlabelled samples get label 0.
pub fn make_batch(samples: &[Sample], idx: &[usize], size: usize, dtype: DType, device: &Device) -> Result<ImageBatch> {
    let mut pixels = Vec::with_capacity(idx.len() * size * size * 3);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &samples[i];
        if s.pixels.len() != size * size * 3 {
            return Err(Error::Shape(format!("sample {} has {} values, expected {}", s.id, s.pixels.len(), size * size * 3)));
        }
        pixels.extend_from_slice(&s.pixels);
        labels.push(s.label.unwrap_or(0));
    }
    let t = Tensor::from_vec(pixels, (idx.len(), size, size, 3), device)?.to_dtype(dtype)?;
    ImageBatch::new(t, labels)
}
