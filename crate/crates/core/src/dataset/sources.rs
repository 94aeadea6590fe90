//! Source images for synthesis, and a generator of synthetic "shapes"
//! sources whose appearance encodes their category path: the top level sets
//! the colour, the second level the silhouette, deeper levels a stripe
//! texture.

use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, DatasetError, Split};
use crate::distortion::{PartPoint, Rect, RegionAnnotation};
use crate::hierarchy::{Hierarchy, LabelPath, NodeId};
use crate::image::Image;

#[derive(Debug, Clone)]
pub struct SourceItem {
    pub source_id: String,
    pub image: Image,
    /// Full-depth path.
    pub path: LabelPath,
    pub region: RegionAnnotation,
    pub split: Split,
}

pub const SOURCES_FILE: &str = "sources.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct SourceLine {
    source_id: String,
    image: String,
    category_path: Vec<String>,
    bbox: Rect,
    #[serde(default)]
    parts: Vec<PartPoint>,
    split: Split,
}

/// Writes `images/<id>.png` and `sources.jsonl` under `dir`.
pub fn write_sources(dir: &Path, items: &[SourceItem], h: &Hierarchy) -> Result<(), DatasetError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut text = String::new();
    for item in items {
        let rel = format!("images/{}.png", item.source_id);
        item.image.save_png(&dir.join(&rel))?;
        let line = SourceLine {
            source_id: item.source_id.clone(),
            image: rel,
            category_path: h.path_names(&item.path),
            bbox: item.region.bbox,
            parts: item.region.parts.clone(),
            split: item.split,
        };
        text.push_str(&serde_json::to_string(&line).expect("source lines serialize"));
        text.push('\n');
    }
    let path = dir.join(SOURCES_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

/// Reads a directory written by [`write_sources`] (or laid out the same way
/// by hand).
pub fn read_sources(dir: &Path, h: &Hierarchy) -> Result<Vec<SourceItem>, DatasetError> {
    let path = dir.join(SOURCES_FILE);
    let file = File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SourceLine = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let image = Image::load_png(&dir.join(&parsed.image))?;
        let region = RegionAnnotation {
            bbox: parsed.bbox,
            parts: parsed.parts,
        };
        region.validate(&image)?;
        out.push(SourceItem {
            source_id: parsed.source_id,
            image,
            path: h.path_from_names(&parsed.category_path)?,
            region,
            split: parsed.split,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSourceConfig {
    pub count: usize,
    pub image_size: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSourceConfig {
    fn default() -> Self {
        Self {
            count: 500,
            image_size: 64,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// `count` images cycling through the full-depth leaves in canonical order.
pub fn generate_sources(h: &Hierarchy, cfg: &SynthSourceConfig) -> Result<Vec<SourceItem>, DatasetError> {
    if cfg.image_size < 16 {
        return Err(DatasetError::Config(format!("image size {} is below 16", cfg.image_size)));
    }
    if !(0.0..=1.0).contains(&cfg.test_fraction) {
        return Err(DatasetError::Config(format!("test fraction {} outside [0, 1]", cfg.test_fraction)));
    }
    let leaves = h.leaf_paths();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count)
        .map(|i| {
            let path = leaves[i % leaves.len()].clone();
            let (image, region) = render(h, &path, cfg.image_size, &mut rng);
            let split = if rng.random_bool(cfg.test_fraction) {
                Split::Test
            } else {
                Split::Train
            };
            SourceItem {
                source_id: format!("src{i:05}"),
                image,
                path,
                region,
                split,
            }
        })
        .collect())
}

fn sibling_position(h: &Hierarchy, id: NodeId) -> usize {
    let siblings = match h.parent(id) {
        Some(p) if h.level_of(id) > 0 => h.children(p),
        _ => h.top_level(),
    };
    siblings.iter().position(|&s| s == id).unwrap_or(0)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Unit-radius silhouette membership.
fn inside(shape: usize, dx: f64, dy: f64) -> bool {
    match shape % 8 {
        0 => dx * dx + dy * dy <= 1.0,
        1 => dx.abs().max(dy.abs()) <= 0.85,
        2 => (-0.9..=0.8).contains(&dy) && dx.abs() <= (dy + 0.9) * 0.55,
        3 => dx.abs() + dy.abs() <= 1.0,
        4 => (0.3..=1.0).contains(&(dx * dx + dy * dy)),
        5 => (dx.abs() <= 0.35 && dy.abs() <= 1.0) || (dy.abs() <= 0.35 && dx.abs() <= 1.0),
        6 => dx * dx + (dy / 0.55) * (dy / 0.55) <= 1.0,
        _ => (dx / 0.55) * (dx / 0.55) + dy * dy <= 1.0,
    }
}

fn render(h: &Hierarchy, path: &LabelPath, size: usize, rng: &mut ChaCha8Rng) -> (Image, RegionAnnotation) {
    let ids = path.ids();
    let n_top = h.top_level().len().max(1);
    let colour = hsv(h.index_within_level(ids[0]) as f64 / n_top as f64, 0.85, 0.9);
    let shape = ids.get(1).map_or(0, |&id| sibling_position(h, id));
    // (angle index, period) per level from the third down
    let stripes: Vec<(usize, usize)> = ids
        .iter()
        .skip(2)
        .map(|&id| {
            let p = sibling_position(h, id);
            (p % 4, 3 + p / 4)
        })
        .collect();

    let s = size as f64;
    let r = s * rng.random_range(0.3..0.36);
    let cx = s / 2.0 + s * rng.random_range(-0.08..0.08);
    let cy = s / 2.0 + s * rng.random_range(-0.08..0.08);
    let bg = rng.random_range(0.4..0.6);
    let mut noise = Vec::with_capacity(size * size);
    for _ in 0..size * size {
        noise.push(rng.random_range(-0.03..0.03));
    }

    let image = Image::from_fn(size, size, |y, x, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = ((px - cx) / r, (py - cy) / r);
        let base = if inside(shape, dx, dy) {
            let mut v = colour[c];
            for (level, &(angle, period)) in stripes.iter().enumerate() {
                let t = match (angle + level) % 4 {
                    0 => px,
                    1 => py,
                    2 => px + py,
                    _ => px - py + s,
                };
                if (t / period as f64).floor() as i64 % 2 == 0 {
                    v *= 0.55;
                }
            }
            v
        } else {
            bg
        };
        (base + noise[y * size + x]).clamp(0.0, 1.0)
    });

    let x0 = (cx - r).max(0.0);
    let y0 = (cy - r).max(0.0);
    let bbox = Rect {
        x: x0,
        y: y0,
        w: (cx + r).min(s) - x0,
        h: (cy + r).min(s) - y0,
    };
    let part = |name: &str, x: f64, y: f64| PartPoint {
        name: name.to_string(),
        x,
        y,
    };
    let parts = vec![
        part("center", cx, cy),
        part("top", cx, cy - 0.7 * r),
        part("bottom", cx, cy + 0.7 * r),
        part("left", cx - 0.7 * r, cy),
        part("right", cx + 0.7 * r, cy),
    ];
    (image, RegionAnnotation { bbox, parts })
}
