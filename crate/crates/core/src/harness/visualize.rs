//! Per-view attention heatmaps from the first slot-attention iteration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::{Rgb, RgbImage};

use crate::backbone::ImageBatch;
use crate::error::{Error, Result};
use crate::head::Variant;
use crate::model::MvpFas;

const POSITIVE_TINT: [f32; 3] = [1.0, 0.9, 0.0];
const NEGATIVE_TINT: [f32; 3] = [1.0, 0.0, 0.0];
const MAX_ALPHA: f32 = 0.65;

#[derive(Debug, Clone)]
pub struct ViewMap {
    /// `pos0`, `pos1`, ..., `neg0`, ...
    pub name: String,
    pub positive: bool,
    /// Row-major `g x g` grid.
    pub grid: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct VisualOutput {
    pub maps: Vec<ViewMap>,
    pub grid_files: Vec<PathBuf>,
    pub overlay_files: Vec<PathBuf>,
    pub composite: PathBuf,
}

/// Softmax-over-patches attention of iteration one, one `g x g` map per text.
pub fn attention_maps(model: &MvpFas, pixels: &[f32]) -> Result<Vec<ViewMap>> {
    let ab = model.config.ablation;
    if !ab.use_mvs || ab.variant != Variant::Mvs || model.config.mvs.i_max == 0 {
        return Err(Error::Config("visualization needs the slot-attention variant with i_max >= 1".into()));
    }
    let size = model.config.backbone.image_size;
    let t = Tensor::from_vec(pixels.to_vec(), (1, size, size, 3), model.device())?.to_dtype(model.dtype())?;
    let out = model.forward(&ImageBatch::new(t, vec![0])?, false)?;
    let first = out
        .heads
        .mvs_attention
        .first()
        .ok_or_else(|| Error::Config("no attention recorded".into()))?;
    let attn = first.pre.squeeze(0)?.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let l = attn.len();
    let g = (l as f64).sqrt().round() as usize;
    if g * g != l {
        return Err(Error::Shape(format!("{l} patches do not form a square grid")));
    }
    let views = attn[0].len();
    let m = views / 2;
    Ok((0..views)
        .map(|j| ViewMap {
            name: if j < m { format!("pos{j}") } else { format!("neg{}", j - m) },
            positive: j < m,
            grid: (0..g).map(|r| (0..g).map(|c| attn[r * g + c][j]).collect()).collect(),
        })
        .collect())
}

pub fn write_grid(path: &Path, grid: &[Vec<f64>]) -> Result<()> {
    let mut s = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grid = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("{}: bad value {v:?}", path.display()))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if grid.iter().any(|r| r.len() != grid.len()) {
        return Err(Error::Shape(format!("{}: grid is not square", path.display())));
    }
    Ok(grid)
}

fn overlay(pixels: &[f32], size: usize, map: &ViewMap) -> RgbImage {
    let g = map.grid.len();
    let max = map.grid.iter().flatten().cloned().fold(0.0, f64::max).max(1e-12);
    let tint = if map.positive { POSITIVE_TINT } else { NEGATIVE_TINT };
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let h = (map.grid[y * g / size][x * g / size] / max) as f32;
            let a = MAX_ALPHA * h;
            let base = &pixels[(y * size + x) * 3..(y * size + x) * 3 + 3];
            let px: [u8; 3] = std::array::from_fn(|c| ((base[c] * (1.0 - a) + tint[c] * a).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Writes `<name>.txt` grids, `<name>.png` overlays and `composite.png`
/// (positive views on the top row, negative below).
pub fn write_visualization(dir: &Path, pixels: &[f32], size: usize, maps: &[ViewMap]) -> Result<VisualOutput> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut grid_files = Vec::new();
    let mut overlay_files = Vec::new();
    let m = maps.len() / 2;
    let mut composite = RgbImage::new((size * m.max(1)) as u32, (size * 2) as u32);
    for (j, map) in maps.iter().enumerate() {
        let gp = dir.join(format!("{}.txt", map.name));
        write_grid(&gp, &map.grid)?;
        grid_files.push(gp);
        let img = overlay(pixels, size, map);
        let op = dir.join(format!("{}.png", map.name));
        img.save(&op)?;
        overlay_files.push(op);
        let (col, row) = if j < m { (j, 0) } else { (j - m, 1) };
        image::imageops::replace(&mut composite, &img, (col * size) as i64, (row * size) as i64);
    }
    let cp = dir.join("composite.png");
    composite.save(&cp)?;
    Ok(VisualOutput {
        maps: maps.to_vec(),
        grid_files,
        overlay_files,
        composite: cp,
    })
}
