//! Synthetic dataset: coloured shapes on textured backgrounds.
//!
//! Class is carried redundantly by shape colour + outline (image), the caption,
//! and the coordinate quadrant, so every alignment objective has signal.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, SampleRecord, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// `(colour, shape)` per class; class index is the position.
pub const SYNTH_CLASSES: [(&str, &str); 4] = [
    ("red", "circle"),
    ("green", "square"),
    ("blue", "triangle"),
    ("yellow", "cross"),
];

const COLOURS: [[f64; 3]; 4] = [[220.0, 40.0, 40.0], [40.0, 200.0, 60.0], [50.0, 80.0, 230.0], [235.0, 220.0, 40.0]];

const BACKGROUNDS: [&str; 4] = ["sand", "forest", "water", "urban blocks"];

const TEMPLATES: [&str; 4] = [
    "a {c} {s} on {b}",
    "a satellite photo of a {c} {s} over {b}.",
    "aerial view showing a {c} {s} surrounded by {b}",
    "a {c} {s} seen from above, next to {b}.",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub samples: usize,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            image_size: 32,
            seed: 0,
        }
    }
}

/// Class names as used for labels and zero-shot prompts, e.g. `"red circle"`.
pub fn class_names() -> Vec<String> {
    SYNTH_CLASSES.iter().map(|(c, s)| format!("{c} {s}")).collect()
}

/// Latitude/longitude signs of each class's quadrant.
pub fn quadrant_signs(class: usize) -> (f64, f64) {
    [(1.0, -1.0), (1.0, 1.0), (-1.0, -1.0), (-1.0, 1.0)][class % 4]
}

/// Quadrant index (same numbering as classes) of a coordinate.
pub fn quadrant_of(lat: f64, lon: f64) -> usize {
    match (lat >= 0.0, lon >= 0.0) {
        (true, false) => 0,
        (true, true) => 1,
        (false, false) => 2,
        (false, true) => 3,
    }
}

fn background(kind: usize, x: usize, y: usize, r: &mut Rng) -> [f64; 3] {
    let n = r.random_range(-12.0..12.0);
    match kind {
        0 => [194.0 + n, 170.0 + n, 120.0 + n],
        1 => {
            let speck = if (x * 7 + y * 13).is_multiple_of(5) { -20.0 } else { 0.0 };
            [40.0 + n + speck, 85.0 + n + speck, 45.0 + n + speck]
        }
        2 => {
            let wave = 12.0 * ((x as f64 * 0.6 + y as f64 * 0.3).sin());
            [30.0 + n, 70.0 + n + wave, 90.0 + n + wave]
        }
        _ => {
            let street = x.is_multiple_of(8) || y.is_multiple_of(8);
            let v = if street { 60.0 } else { 135.0 };
            [v + n, v + n, v + 5.0 + n]
        }
    }
}

fn inside(class: usize, dx: f64, dy: f64, radius: f64) -> bool {
    match class {
        0 => dx * dx + dy * dy <= radius * radius,
        1 => dx.abs() <= 0.8 * radius && dy.abs() <= 0.8 * radius,
        2 => {
            if dy < -radius || dy > 0.8 * radius {
                return false;
            }
            dx.abs() <= (dy + radius) / 1.8
        }
        _ => {
            let arm = 0.3 * radius;
            (dx.abs() <= arm && dy.abs() <= radius) || (dy.abs() <= arm && dx.abs() <= radius)
        }
    }
}

/// Renders one sample: RGB pixels and a binary mask (1 = shape).
pub fn render(class: usize, background_kind: usize, size: u32, r: &mut Rng) -> (image::RgbImage, image::GrayImage) {
    let s = size as f64;
    let radius = r.random_range(0.2 * s..0.32 * s);
    let cx = r.random_range(radius..s - radius);
    let cy = r.random_range(radius..s - radius);
    let base = COLOURS[class];
    let tint: Vec<f64> = (0..3).map(|_| r.random_range(-20.0..20.0)).collect();
    let mut rgb = image::RgbImage::new(size, size);
    let mut mask = image::GrayImage::new(size, size);
    for y in 0..size as usize {
        for x in 0..size as usize {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let px = if inside(class, dx, dy, radius) {
                mask.put_pixel(x as u32, y as u32, image::Luma([1]));
                let n = r.random_range(-10.0..10.0);
                [base[0] + tint[0] + n, base[1] + tint[1] + n, base[2] + tint[2] + n]
            } else {
                background(background_kind, x, y, r)
            };
            let px = px.map(|v| v.clamp(0.0, 255.0).round() as u8);
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    (rgb, mask)
}

/// Writes a synthetic dataset into `dir` and returns it loaded.
pub fn generate_synthetic(dir: &Path, config: &SynthConfig) -> Result<Dataset> {
    if config.samples == 0 || config.image_size < 8 {
        return Err(Error::InvalidArgument("need at least one sample and images of at least 8px".into()));
    }
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let names = class_names();
    let mut records = Vec::with_capacity(config.samples);
    for i in 0..config.samples {
        let mut r = rng::derived(config.seed, "synth", i as u64);
        let class = i % SYNTH_CLASSES.len();
        let bg = r.random_range(0..BACKGROUNDS.len());
        let (rgb, mask) = render(class, bg, config.image_size, &mut r);
        let id = format!("s{i:05}");
        let image_path = format!("images/{id}.png");
        let mask_path = format!("masks/{id}.png");
        rgb.save(dir.join(&image_path))?;
        mask.save(dir.join(&mask_path))?;
        let (colour, shape) = SYNTH_CLASSES[class];
        let caption = TEMPLATES[r.random_range(0..TEMPLATES.len())]
            .replace("{c}", colour)
            .replace("{s}", shape)
            .replace("{b}", BACKGROUNDS[bg]);
        let (slat, slon) = quadrant_signs(class);
        records.push(SampleRecord {
            id,
            caption,
            lat: slat * r.random_range(5.0..85.0),
            lon: slon * r.random_range(5.0..175.0),
            score: Some(r.random_range(0.15..0.35)),
            image_path,
            grounded: None,
            label: Some(names[class].clone()),
            mask_path: Some(mask_path),
        });
    }
    let mut ds = Dataset {
        root: dir.to_path_buf(),
        manifest: DatasetManifest {
            schema_version: SCHEMA_VERSION,
            image_height: config.image_size,
            image_width: config.image_size,
            channels: 3,
            record_count: records.len(),
            record_files: vec![],
            tokenizer_fingerprint: None,
            mask_classes: vec!["background".into(), "shape".into()],
        },
        records,
    };
    ds.save()?;
    Ok(ds)
}
