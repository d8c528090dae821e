//! Deterministic synthetic scenes whose paired categories can only be told
//! apart by the background texture, written and read in COCO layout.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::checkpoint::config_hash;
use crate::detector::Sample;
use crate::error::{HceError, Result};
use crate::nn::module_rng;
use crate::par::Exec;
use crate::roi_ops::Bbox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub num_classes: usize,
    pub num_context_pairs: usize,
    /// Inclusive range.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of glyph side lengths in pixels.
    pub glyph_size: (usize, usize),
    /// Standard deviation of the additive pixel noise.
    pub noise_level: f64,
    /// Amplitude of the context texture around the mid-grey background.
    pub context_contrast: f64,
    /// Stripe period of the context texture in pixels.
    pub context_period: usize,
    /// Band around every box left untextured, in pixels.
    pub context_margin: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: (64, 64),
            num_classes: 10,
            num_context_pairs: 3,
            objects_per_image: (1, 3),
            glyph_size: (6, 28),
            noise_level: 0.08,
            context_contrast: 0.15,
            context_period: 4,
            context_margin: 12,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HceError::Config(m));
        let (h, w) = self.image_size;
        if h < 64 || w < 64 {
            return bad(format!("image_size {h}x{w}: both sides must be at least 64"));
        }
        if self.num_context_pairs * 2 > self.num_classes {
            return bad(format!(
                "num_context_pairs={} needs {} classes but num_classes={}",
                self.num_context_pairs,
                2 * self.num_context_pairs,
                self.num_classes
            ));
        }
        if self.num_glyphs() > GLYPHS.len() {
            return bad(format!("{} distinct glyphs needed, library has {}", self.num_glyphs(), GLYPHS.len()));
        }
        let (lo, hi) = self.objects_per_image;
        if lo < 1 || lo > hi {
            return bad(format!("objects_per_image ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        let (gl, gh) = self.glyph_size;
        if gl < 4 || gl > gh || gh > h.min(w) / 2 {
            return bad(format!("glyph_size ({gl}, {gh}) must satisfy 4 <= min <= max <= half the image side"));
        }
        if !(0.0..=1.0).contains(&self.noise_level) || !(0.0..=0.5).contains(&self.context_contrast) {
            return bad("noise_level must lie in [0, 1] and context_contrast in [0, 0.5]".into());
        }
        if self.context_period < 2 {
            return bad("context_period must be at least 2".into());
        }
        Ok(())
    }

    /// Paired categories share a glyph, so there are `C - pairs` glyphs.
    pub fn num_glyphs(&self) -> usize {
        self.num_classes - self.num_context_pairs
    }

    /// Whether a category belongs to a context pair.
    pub fn is_context_class(&self, category: usize) -> bool {
        category < 2 * self.num_context_pairs
    }

    pub fn glyph_of(&self, category: usize) -> usize {
        if self.is_context_class(category) {
            category / 2
        } else {
            category - self.num_context_pairs
        }
    }

    /// Category for a glyph under a scene context.
    pub fn category_of(&self, glyph: usize, context: usize) -> usize {
        if glyph < self.num_context_pairs {
            2 * glyph + context
        } else {
            glyph + self.num_context_pairs
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: Bbox,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    /// `H x W x 3`, values are multiples of `1/255` in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub instances: Vec<Instance>,
    pub image_level: Array1<f64>,
}

impl AnnotatedImage {
    /// Channel-first training sample.
    pub fn to_sample(&self) -> Sample {
        Sample {
            pixels: self.pixels.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned(),
            boxes: self.instances.iter().map(|i| i.bbox).collect(),
            labels: self.instances.iter().map(|i| i.category).collect(),
            image_labels: self.image_level.clone(),
        }
    }
}

/// Placement and categories of a scene, before any pixel is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    /// Texture orientation: `0` horizontal stripes, `1` vertical stripes.
    pub context: usize,
    pub instances: Vec<Instance>,
    noise_seed_path: String,
}

type GlyphFn = fn(f64, f64) -> bool;

/// Shapes on the unit square, each touching all four sides.
const GLYPHS: [GlyphFn; 10] = [
    |u, v| (0.09..=0.25).contains(&((u - 0.5).powi(2) + (v - 0.5).powi(2))),
    |u, v| (u - 0.5).abs() < 0.17 || (v - 0.5).abs() < 0.17,
    |u, v| (u - 0.5).abs() <= 0.5 * v + 0.04,
    |u, v| (u - v).abs() < 0.2 || (u + v - 1.0).abs() < 0.2,
    |u, v| (u - 0.5).abs() + (v - 0.5).abs() <= 0.52,
    |u, v| !(0.22..=0.78).contains(&u) || !(0.22..=0.78).contains(&v),
    |u, v| !(0.25..=0.75).contains(&u) || (v - 0.5).abs() < 0.15,
    |u, v| v < 0.25 || (u - 0.5).abs() < 0.15,
    |u, v| u < 0.3 || v > 0.7,
    |u, v| (u * 4.0).floor() as i64 % 2 == (v * 4.0).floor() as i64 % 2,
];

const PALETTE: [[f64; 3]; 10] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.10, 0.10, 0.10],
    [0.98, 0.98, 0.98],
    [0.55, 0.30, 0.10],
];

const BACKGROUND: f64 = 0.5;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Noise-free rendering of a glyph filling a `height x width` box.
pub fn glyph_crop(config: &SceneConfig, category: usize, height: usize, width: usize) -> Array3<f64> {
    let g = config.glyph_of(category);
    Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        if GLYPHS[g](u, v) {
            PALETTE[g][c]
        } else {
            BACKGROUND
        }
    })
}

/// Sampled categories and non-overlapping boxes on the integer grid.
pub fn scene_layout(config: &SceneConfig, index: u64) -> Result<SceneLayout> {
    config.validate()?;
    let mut rng = module_rng(config.seed, &format!("synth.layout.{index}"));
    let (h, w) = config.image_size;
    let context = rng.random_range(0..2usize);
    let n = rng.random_range(config.objects_per_image.0..=config.objects_per_image.1);
    let mut instances: Vec<Instance> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..100 {
            let bw = rng.random_range(config.glyph_size.0..=config.glyph_size.1);
            let bh = rng.random_range(config.glyph_size.0..=config.glyph_size.1);
            let x1 = rng.random_range(0..=w - bw) as f64;
            let y1 = rng.random_range(0..=h - bh) as f64;
            let b = Bbox::new(x1, y1, x1 + bw as f64, y1 + bh as f64)?;
            let gap = 2.0;
            let clear = instances
                .iter()
                .all(|o| b.x2 + gap <= o.bbox.x1 || o.bbox.x2 + gap <= b.x1 || b.y2 + gap <= o.bbox.y1 || o.bbox.y2 + gap <= b.y1);
            if clear {
                let glyph = rng.random_range(0..config.num_glyphs());
                instances.push(Instance {
                    bbox: b,
                    category: config.category_of(glyph, context),
                });
                break;
            }
        }
    }
    Ok(SceneLayout {
        context,
        instances,
        noise_seed_path: format!("synth.noise.{index}"),
    })
}

/// Draws a layout. Pixels inside a box depend only on the glyph, the box
/// geometry and the noise stream, never on the context.
pub fn render(config: &SceneConfig, layout: &SceneLayout) -> Array3<f64> {
    let (h, w) = config.image_size;
    let m = config.context_margin as f64;
    let near_box = |x: usize, y: usize| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        layout
            .instances
            .iter()
            .any(|i| px > i.bbox.x1 - m && px < i.bbox.x2 + m && py > i.bbox.y1 - m && py < i.bbox.y2 + m)
    };
    let p = config.context_period;
    let mut img = Array3::from_elem((h, w, 3), BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            if near_box(x, y) {
                continue;
            }
            let phase = if layout.context == 0 { y } else { x };
            let s = if (phase % p) < p / 2 { 1.0 } else { -1.0 };
            for c in 0..3 {
                img[[y, x, c]] += config.context_contrast * s;
            }
        }
    }
    for inst in &layout.instances {
        let b = inst.bbox;
        let (x0, y0) = (b.x1 as usize, b.y1 as usize);
        let crop = glyph_crop(config, inst.category, b.height() as usize, b.width() as usize);
        img.slice_mut(ndarray::s![y0..y0 + crop.dim().0, x0..x0 + crop.dim().1, ..]).assign(&crop);
    }
    if config.noise_level > 0.0 {
        let mut rng = module_rng(config.seed, &layout.noise_seed_path);
        let normal = Normal::new(0.0, config.noise_level).expect("finite std");
        img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    img.mapv_inplace(quantize);
    img
}

/// Binary presence vector; duplicates collapse.
pub fn image_level_targets(categories: &[usize], num_classes: usize) -> Result<Array1<f64>> {
    let mut y = Array1::zeros(num_classes);
    for &c in categories {
        if c >= num_classes {
            return Err(HceError::CategoryOutOfRange { category: c, num_classes });
        }
        y[c] = 1.0;
    }
    Ok(y)
}

pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<AnnotatedImage> {
    let layout = scene_layout(config, index)?;
    let pixels = render(config, &layout);
    let cats: Vec<usize> = layout.instances.iter().map(|i| i.category).collect();
    Ok(AnnotatedImage {
        pixels,
        image_level: image_level_targets(&cats, config.num_classes)?,
        instances: layout.instances,
    })
}

// COCO layout

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HceError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| HceError::io(path, e))
    }

    /// Instances of one image in annotation order.
    pub fn instances_of(&self, image_id: u64) -> Result<Vec<Instance>> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| {
                Ok(Instance {
                    bbox: Bbox::from_xywh(a.bbox)?,
                    category: a.category_id,
                })
            })
            .collect()
    }
}

pub fn category_name(config: &SceneConfig, category: usize) -> String {
    if config.is_context_class(category) {
        format!("pair{}_{}", category / 2, ["h", "v"][category % 2])
    } else {
        format!("glyph{}", config.glyph_of(category))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub n_images: usize,
    pub seed: u64,
    pub first_index: u64,
    pub config_hash: String,
    pub config: SceneConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteStatus {
    Written,
    UpToDate,
}

/// Scene index of the first image of a split, so splits never share scenes.
pub fn split_offset(split: &str) -> u64 {
    match split {
        "train" => 0,
        "val" => 1 << 32,
        "test" => 2 << 32,
        other => {
            let h = config_hash(&other);
            (u64::from_str_radix(&h[..8], 16).expect("hex") | 4) << 32
        }
    }
}

pub fn split_dir(out_dir: &Path, split: &str) -> PathBuf {
    out_dir.join(split)
}

fn image_file(i: usize) -> String {
    format!("images/{i:06}.png")
}

/// Writes `n_images` scenes as PNG files plus `annotations.json` and
/// `manifest.json` under `out_dir/split`. An existing split with the same
/// hash is left alone; a different hash is an error.
pub fn write_dataset(config: &SceneConfig, n_images: usize, split: &str, out_dir: &Path, exec: Exec) -> Result<(Manifest, WriteStatus)> {
    config.validate()?;
    if n_images == 0 {
        return Err(HceError::Dataset("n_images must be at least 1".into()));
    }
    let dir = split_dir(out_dir, split);
    let first_index = split_offset(split);
    let manifest = Manifest {
        split: split.to_string(),
        n_images,
        seed: config.seed,
        first_index,
        config_hash: config_hash(&(config, n_images, split)),
        config: config.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let existing: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(|e| HceError::io(&manifest_path, e))?)?;
        if existing.config_hash != manifest.config_hash {
            return Err(HceError::HashCollision {
                split: split.to_string(),
                dir: dir.clone(),
                existing: existing.config_hash,
                requested: manifest.config_hash,
            });
        }
        let complete = dir.join("annotations.json").exists() && (0..n_images).all(|i| dir.join(image_file(i)).exists());
        if complete {
            return Ok((existing, WriteStatus::UpToDate));
        }
    }
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| HceError::io(&images_dir, e))?;

    let scenes = exec.map_range(0..n_images, |i| -> Result<AnnotatedImage> {
        let scene = generate_scene(config, first_index + i as u64)?;
        save_png(&scene.pixels, &dir.join(image_file(i)))?;
        Ok(scene)
    });
    let (h, w) = config.image_size;
    let mut coco = CocoDataset {
        categories: (0..config.num_classes)
            .map(|c| CocoCategory {
                id: c,
                name: category_name(config, c),
            })
            .collect(),
        ..Default::default()
    };
    for (i, scene) in scenes.into_iter().enumerate() {
        let scene = scene?;
        coco.images.push(CocoImage {
            id: i as u64,
            file_name: image_file(i),
            width: w,
            height: h,
        });
        for inst in &scene.instances {
            coco.annotations.push(CocoAnnotation {
                id: coco.annotations.len() as u64,
                image_id: i as u64,
                category_id: inst.category,
                bbox: inst.bbox.to_xywh(),
                area: inst.bbox.area(),
                iscrowd: 0,
            });
        }
    }
    coco.write(&dir.join("annotations.json"))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| HceError::io(&manifest_path, e))?;
    Ok((manifest, WriteStatus::Written))
}

fn save_png(pixels: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let raw: Vec<u8> = pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

/// A split read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub coco: CocoDataset,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn load(out_dir: &Path, split: &str, exec: Exec) -> Result<Self> {
        let dir = split_dir(out_dir, split);
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(|e| HceError::io(&manifest_path, e))?)?;
        let coco = CocoDataset::read(&dir.join("annotations.json"))?;
        let c = manifest.config.num_classes;
        let images = exec
            .map(&coco.images, |im| -> Result<AnnotatedImage> {
                let pixels = load_png(&dir.join(&im.file_name))?;
                let instances = coco.instances_of(im.id)?;
                let cats: Vec<usize> = instances.iter().map(|i| i.category).collect();
                Ok(AnnotatedImage {
                    pixels,
                    image_level: image_level_targets(&cats, c)?,
                    instances,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, coco, images })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.manifest.config
    }

    /// Scenes generated in memory, no files involved.
    pub fn in_memory(config: &SceneConfig, n_images: usize, split: &str, exec: Exec) -> Result<Self> {
        config.validate()?;
        let first_index = split_offset(split);
        let images = exec
            .map_range(0..n_images, |i| generate_scene(config, first_index + i as u64))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = config.image_size;
        let mut coco = CocoDataset {
            categories: (0..config.num_classes)
                .map(|c| CocoCategory {
                    id: c,
                    name: category_name(config, c),
                })
                .collect(),
            ..Default::default()
        };
        for (i, scene) in images.iter().enumerate() {
            coco.images.push(CocoImage {
                id: i as u64,
                file_name: image_file(i),
                width: w,
                height: h,
            });
            for inst in &scene.instances {
                coco.annotations.push(CocoAnnotation {
                    id: coco.annotations.len() as u64,
                    image_id: i as u64,
                    category_id: inst.category,
                    bbox: inst.bbox.to_xywh(),
                    area: inst.bbox.area(),
                    iscrowd: 0,
                });
            }
        }
        Ok(Dataset {
            manifest: Manifest {
                split: split.to_string(),
                n_images,
                seed: config.seed,
                first_index,
                config_hash: config_hash(&(config, n_images, split)),
                config: config.clone(),
            },
            coco,
            images,
        })
    }
}
