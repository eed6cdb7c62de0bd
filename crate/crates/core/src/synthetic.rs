//! Two-class toy task: identical low-frequency backgrounds, one small square
//! patch whose colour encodes the class.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::seeded_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const COARSE_GRID: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch_side: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Seed of the static texture shared by every image.
    pub texture_seed: u64,
    /// Amplitude of the per-image low-frequency background noise.
    pub noise_amplitude: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            channels: 3,
            patch_side: 6,
            classes: 2,
            train_per_class: 200,
            test_per_class: 25,
            texture_seed: 0,
            noise_amplitude: 0.15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 4 {
            return Err(Error::invalid("image_side", "must be at least 4"));
        }
        if self.patch_side == 0 || self.patch_side > self.image_side {
            return Err(Error::Config(format!(
                "patch side {} does not fit inside image side {}",
                self.patch_side, self.image_side
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid("channels", "must be 1 or 3"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least two classes"));
        }
        if self.channels == 1 && self.classes > 8 {
            return Err(Error::invalid("classes", "gray images support at most 8 distinguishable patch shades"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("samples", "need at least one train and one test sample per class"));
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return Err(Error::invalid("noise_amplitude", "must lie in [0, 0.5]"));
        }
        Ok(())
    }

    /// Patch colour of `class`: evenly spaced hues starting at red, so two
    /// classes give red and yellow.
    pub fn patch_color(&self, class: usize) -> Vec<f64> {
        if self.channels == 1 {
            return vec![0.55 + 0.45 * class as f64 / (self.classes - 1) as f64];
        }
        let hue = if self.classes == 2 {
            class as f64 / 6.0
        } else {
            class as f64 / self.classes as f64
        };
        hsv_to_rgb(hue, 0.9, 0.95).to_vec()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    Draw,
    /// Leave the background in place of the patch (control experiment).
    Ablate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    /// `[C, H, W]`, values in `[0, 1]` on the 8-bit grid.
    pub image: Tensor<f64>,
    pub label: usize,
    /// `[H, W]`, 1 on the patch and 0 elsewhere.
    pub gt_mask: Tensor<f64>,
    /// Top-left corner `(x, y)` of the patch.
    pub patch_origin: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Bilinear upsampling of a `g×g` grid to `side×side`.
fn upsample_grid(grid: &[f64], g: usize, side: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    let scale = (g - 1) as f64 / (side - 1).max(1) as f64;
    for y in 0..side {
        let fy = y as f64 * scale;
        let y0 = (fy.floor() as usize).min(g - 2);
        let ty = fy - y0 as f64;
        for x in 0..side {
            let fx = x as f64 * scale;
            let x0 = (fx.floor() as usize).min(g - 2);
            let tx = fx - x0 as f64;
            let at = |r: usize, c: usize| grid[r * g + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn low_frequency_field(rng: &mut impl Rng, side: usize, amplitude: f64) -> Vec<f64> {
    let grid: Vec<f64> = (0..COARSE_GRID * COARSE_GRID)
        .map(|_| rng.gen_range(-amplitude..=amplitude))
        .collect();
    upsample_grid(&grid, COARSE_GRID, side)
}

struct Texture {
    base: Vec<f64>,
    fields: Vec<Vec<f64>>,
}

impl Texture {
    fn new(cfg: &SyntheticConfig) -> Self {
        let mut rng = seeded_rng(cfg.texture_seed, u64::MAX);
        let base = if cfg.channels == 3 {
            vec![0.22, 0.30, 0.18]
        } else {
            vec![0.3]
        };
        let fields = (0..cfg.channels)
            .map(|_| low_frequency_field(&mut rng, cfg.image_side, 0.08))
            .collect();
        Self { base, fields }
    }
}

fn render(
    cfg: &SyntheticConfig,
    texture: &Texture,
    seed: u64,
    index: usize,
    label: usize,
    mode: PatchMode,
) -> (Tensor<f64>, Tensor<f64>, (usize, usize)) {
    let side = cfg.image_side;
    let plane = side * side;
    let mut rng = seeded_rng(seed, index as u64);
    let range = side - cfg.patch_side;
    let origin = (rng.gen_range(0..=range), rng.gen_range(0..=range));
    // One luminance field shared by all channels plus a weaker per-channel tint.
    let shared = low_frequency_field(&mut rng, side, cfg.noise_amplitude);
    let mut data = Vec::with_capacity(cfg.channels * plane);
    for c in 0..cfg.channels {
        let tint = low_frequency_field(&mut rng, side, cfg.noise_amplitude * 0.4);
        for i in 0..plane {
            let jitter: f64 = rng.gen_range(-0.02..=0.02);
            data.push(texture.base[c] + texture.fields[c][i] + shared[i] + tint[i] + jitter);
        }
    }
    let mut mask = vec![0.0; plane];
    let color = cfg.patch_color(label);
    for y in origin.1..origin.1 + cfg.patch_side {
        for x in origin.0..origin.0 + cfg.patch_side {
            mask[y * side + x] = 1.0;
            if mode == PatchMode::Draw {
                for (c, &value) in color.iter().enumerate() {
                    data[c * plane + y * side + x] = value + 0.25 * shared[y * side + x];
                }
            }
        }
    }
    let image = Tensor::new(vec![cfg.channels, side, side], data.into_iter().map(quantize).collect())
        .expect("shape matches data");
    let gt = Tensor::new(vec![side, side], mask).expect("shape matches data");
    (image, gt, origin)
}

/// Deterministic train/test split for `seed`. Labels alternate so both splits
/// are balanced; sample `i` draws from its own RNG stream.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    generate_with(cfg, seed, PatchMode::Draw)
}

pub fn generate_with(cfg: &SyntheticConfig, seed: u64, mode: PatchMode) -> Result<Dataset> {
    cfg.validate()?;
    let texture = Texture::new(cfg);
    let n_train = cfg.train_per_class * cfg.classes;
    let n_test = cfg.test_per_class * cfg.classes;
    let make = |index: usize, split: Split, k: usize| {
        let label = k % cfg.classes;
        let (image, gt_mask, patch_origin) = render(cfg, &texture, seed, index, label, mode);
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        LabeledSample {
            id: format!("{prefix}_{k:05}"),
            image,
            label,
            gt_mask,
            patch_origin,
        }
    };
    let train = (0..n_train).map(|k| make(k, Split::Train, k)).collect();
    let test = (0..n_test).map(|k| make(n_train + k, Split::Test, k)).collect();
    Ok(Dataset {
        config: *cfg,
        seed,
        train,
        test,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    label: usize,
    image: String,
    mask: String,
    patch_x: usize,
    patch_y: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    command: String,
    config: SyntheticConfig,
    seed: u64,
    train: Vec<ManifestEntry>,
    test: Vec<ManifestEntry>,
}

pub fn image_to_png(image: &Tensor<f64>) -> Result<image::DynamicImage> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::InvalidShape {
                shape: other.to_vec(),
                reason: "expected a [C, H, W] image".into(),
            })
        }
    };
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let plane = h * w;
    let d = image.data();
    match c {
        1 => Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([byte(d[y as usize * w + x as usize])])).into()),
        3 => Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([byte(d[i]), byte(d[plane + i]), byte(d[2 * plane + i])])
        })
        .into()),
        _ => Err(Error::invalid("channels", format!("cannot encode {c} channels as PNG"))),
    }
}

pub fn mask_to_png(mask: &Tensor<f64>) -> Result<GrayImage> {
    let (h, w) = match mask.shape() {
        &[h, w] => (h, w),
        other => {
            return Err(Error::InvalidShape {
                shape: other.to_vec(),
                reason: "expected an [H, W] map".into(),
            })
        }
    };
    let d = mask.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(d[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}

/// Reads an 8-bit PNG as a `[C, H, W]` tensor with `channels` channels.
pub fn load_png_image(path: &Path, channels: usize) -> Result<Tensor<f64>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let mut out = vec![0.0; 3 * h * w];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * h * w + i] = px[c] as f64 / 255.0;
                }
            }
            out
        }
        _ => return Err(Error::invalid("channels", "must be 1 or 3")),
    };
    Tensor::new(vec![channels, h, w], data)
}

fn load_png_mask(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![h, w], data)
}

impl Dataset {
    /// Writes `manifest.json`, `images/<id>.png` and `masks/<id>.png`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let entries = |samples: &[LabeledSample]| -> Result<Vec<ManifestEntry>> {
            samples
                .iter()
                .map(|s| {
                    let image = format!("images/{}.png", s.id);
                    let mask = format!("masks/{}.png", s.id);
                    image_to_png(&s.image)?.save(dir.join(&image))?;
                    mask_to_png(&s.gt_mask)?.save(dir.join(&mask))?;
                    Ok(ManifestEntry {
                        id: s.id.clone(),
                        label: s.label,
                        image,
                        mask,
                        patch_x: s.patch_origin.0,
                        patch_y: s.patch_origin.1,
                    })
                })
                .collect()
        };
        let manifest = DatasetManifest {
            command: "generate-dataset".into(),
            config: self.config,
            seed: self.seed,
            train: entries(&self.train)?,
            test: entries(&self.test)?,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.config.validate()?;
        let read = |entries: &[ManifestEntry]| -> Result<Vec<LabeledSample>> {
            entries
                .iter()
                .map(|e| {
                    let image = load_png_image(&dir.join(&e.image), manifest.config.channels)?;
                    let gt_mask = load_png_mask(&dir.join(&e.mask))?;
                    let side = manifest.config.image_side;
                    if image.shape()[1..] != [side, side] || gt_mask.shape() != [side, side] {
                        return Err(Error::Format(format!("sample {} does not match the image side {side}", e.id)));
                    }
                    if e.label >= manifest.config.classes {
                        return Err(Error::Format(format!("sample {} has label {} out of range", e.id, e.label)));
                    }
                    Ok(LabeledSample {
                        id: e.id.clone(),
                        image,
                        label: e.label,
                        gt_mask,
                        patch_origin: (e.patch_x, e.patch_y),
                    })
                })
                .collect()
        };
        Ok(Self {
            config: manifest.config,
            seed: manifest.seed,
            train: read(&manifest.train)?,
            test: read(&manifest.test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}
