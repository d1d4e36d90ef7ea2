//! Deterministic synthetic face / presentation-attack domains.
//!
//! Real images are a shaded face-like blob on a gradient background. Spoofs
//! start from the same kind of image and add a blur, a periodic grid and a
//! specular highlight. Each domain shifts the colour by a fixed offset and has
//! its own noise level and artifact parameters.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRecipe {
    pub seed: u64,
    pub real: usize,
    pub spoof: usize,
    pub image_size: usize,
    /// Additive per-channel colour offset.
    pub hue: [f32; 3],
    pub noise: f32,
    pub grid_period: usize,
    pub grid_strength: f32,
    pub blur_radius: usize,
    pub specular: f32,
}

impl Default for SynthRecipe {
    fn default() -> Self {
        Self::preset(0, 100, 100)
    }
}

impl SynthRecipe {
    /// Four distinct domains, cycled for `index >= 4`.
    pub fn preset(index: usize, real: usize, spoof: usize) -> Self {
        const HUES: [[f32; 3]; 4] = [[0.08, -0.02, -0.06], [-0.06, 0.0, 0.08], [0.0, 0.07, -0.04], [0.04, 0.04, 0.04]];
        const NOISE: [f32; 4] = [0.02, 0.035, 0.025, 0.045];
        const PERIOD: [usize; 4] = [3, 4, 5, 6];
        const STRENGTH: [f32; 4] = [0.22, 0.18, 0.25, 0.2];
        const BLUR: [usize; 4] = [1, 2, 1, 2];
        const SPEC: [f32; 4] = [0.6, 0.5, 0.7, 0.55];
        let i = index % 4;
        Self {
            seed: 1000 + index as u64,
            real,
            spoof,
            image_size: 64,
            hue: HUES[i],
            noise: NOISE[i],
            grid_period: PERIOD[i],
            grid_strength: STRENGTH[i],
            blur_radius: BLUR[i],
            specular: SPEC[i],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.real == 0 || self.spoof == 0 {
            return Err(Error::Config("synthetic recipe needs positive real and spoof counts".into()));
        }
        if self.image_size < 8 || self.grid_period == 0 {
            return Err(Error::Config("synthetic image_size must be >= 8 and grid_period > 0".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("synthetic noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub label: u32,
    pub image: RgbImage,
}

type Canvas = Vec<[f32; 3]>;

fn face(rng: &mut ChaCha8Rng, n: usize) -> Canvas {
    let nf = n as f32;
    let cx = nf * (0.5 + rng.random_range(-0.08..0.08));
    let cy = nf * (0.5 + rng.random_range(-0.08..0.08));
    let rx = nf * rng.random_range(0.2..0.27);
    let ry = nf * rng.random_range(0.27..0.34);
    let skin = [
        0.72 + rng.random_range(-0.06..0.06),
        0.56 + rng.random_range(-0.05..0.05),
        0.46 + rng.random_range(-0.05..0.05),
    ];
    let bg_base = rng.random_range(0.35..0.5);
    let light = rng.random_range(-0.3..0.3f32);
    let eye_dy = 0.25 * ry;
    let eye_dx = 0.4 * rx;
    let mut out = vec![[0f32; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let bg = bg_base + 0.15 * yf / nf;
            let d = ((xf - cx) / rx).powi(2) + ((yf - cy) / ry).powi(2);
            let inside = 1.0 / (1.0 + ((d - 1.0) * 8.0).exp());
            let shade = 1.0 + light * (xf - cx) / rx * 0.3 - 0.15 * d.min(1.0);
            let mut px = [0f32; 3];
            for c in 0..3 {
                px[c] = bg * (1.0 - inside) + skin[c] * shade * inside;
            }
            for sx in [-1.0f32, 1.0] {
                let e = ((xf - cx - sx * eye_dx) / (0.16 * rx)).powi(2) + ((yf - cy + eye_dy) / (0.09 * ry)).powi(2);
                if e < 1.0 {
                    px = [0.15, 0.12, 0.12];
                }
            }
            let m = ((xf - cx) / (0.35 * rx)).powi(2) + ((yf - cy - 0.45 * ry) / (0.05 * ry)).powi(2);
            if m < 1.0 {
                px = [0.45, 0.2, 0.2];
            }
            out[y * n + x] = px;
        }
    }
    out
}

fn box_blur(src: &Canvas, n: usize, r: usize) -> Canvas {
    if r == 0 {
        return src.clone();
    }
    let pass = |src: &Canvas, horizontal: bool| -> Canvas {
        let mut out = vec![[0f32; 3]; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut acc = [0f32; 3];
                let mut cnt = 0f32;
                for o in -(r as isize)..=(r as isize) {
                    let (xx, yy) = if horizontal {
                        (x as isize + o, y as isize)
                    } else {
                        (x as isize, y as isize + o)
                    };
                    if xx < 0 || yy < 0 || xx >= n as isize || yy >= n as isize {
                        continue;
                    }
                    let p = src[yy as usize * n + xx as usize];
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    cnt += 1.0;
                }
                out[y * n + x] = acc.map(|a| a / cnt);
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn spoof_artifacts(rng: &mut ChaCha8Rng, img: Canvas, n: usize, r: &SynthRecipe) -> Canvas {
    let mut img = box_blur(&img, n, r.blur_radius);
    // Per-sample jitter around the domain's artifact settings.
    let period = (r.grid_period as i64 + rng.random_range(-1..=1i64)).max(2) as usize;
    let strength = r.grid_strength * rng.random_range(0.6..1.4f32);
    let specular = r.specular * rng.random_range(0.6..1.4f32);
    let phase_x = rng.random_range(0..period);
    let phase_y = rng.random_range(0..period);
    let nf = n as f32;
    let hx = nf * rng.random_range(0.2..0.8);
    let hy = nf * rng.random_range(0.2..0.8);
    let hr = nf * rng.random_range(0.08..0.14);
    for y in 0..n {
        for x in 0..n {
            let on_grid = (x + phase_x) % period == 0 || (y + phase_y) % period == 0;
            let g = if on_grid { 1.0 - strength } else { 1.0 };
            let d = ((x as f32 - hx).powi(2) + (y as f32 - hy).powi(2)) / (hr * hr);
            let s = specular * (-d).exp();
            let p = &mut img[y * n + x];
            for c in 0..3 {
                p[c] = p[c] * g * (1.0 - s) + s;
            }
        }
    }
    img
}

fn finish(rng: &mut ChaCha8Rng, img: &Canvas, n: usize, r: &SynthRecipe) -> RgbImage {
    let noise = Normal::new(0.0f32, r.noise.max(0.0)).expect("finite std");
    let mut out = RgbImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let p = img[y * n + x];
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = p[c] + r.hue[c] + if r.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

/// Generates the domain in memory: reals first, then spoofs.
pub fn generate(name: &str, recipe: &SynthRecipe) -> Result<Vec<SynthSample>> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let n = recipe.image_size;
    let mut out = Vec::with_capacity(recipe.real + recipe.spoof);
    for i in 0..recipe.real {
        let f = face(&mut rng, n);
        out.push(SynthSample {
            id: format!("{name}/real_{i:04}"),
            label: 1,
            image: finish(&mut rng, &f, n, recipe),
        });
    }
    for i in 0..recipe.spoof {
        let f = face(&mut rng, n);
        let f = spoof_artifacts(&mut rng, f, n, recipe);
        out.push(SynthSample {
            id: format!("{name}/spoof_{i:04}"),
            label: 0,
            image: finish(&mut rng, &f, n, recipe),
        });
    }
    Ok(out)
}

/// Writes `<dir>/<id>.png` for each sample and returns `(relative path, label)`.
pub fn write_domain(dir: &Path, samples: &[SynthSample]) -> Result<Vec<(PathBuf, u32)>> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = PathBuf::from(format!("{}.png", s.id));
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        s.image.save(&path)?;
        rows.push((rel, s.label));
    }
    Ok(rows)
}
