//! Dataset records, manifests, score filtering, reproducible splits, tokenization,
//! and the caption-grounding pipeline.
//!
//! On disk a dataset is a directory holding `manifest.json`, one or more JSON-lines
//! record files, and one PNG per image (plus optional PNG label masks).

pub mod client;
pub mod grounding;
pub mod synth;
pub mod vocab;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoders::{GeoCoordinate, ImageArray};
use crate::error::{Error, Result};
use crate::rng;

pub use grounding::{GroundedCaption, Grounding, GroundingError};
pub use vocab::{build_vocab, tokenize, Vocabulary};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One line of a record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub caption: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub score: Option<f64>,
    /// Relative to the dataset directory.
    pub image_path: String,
    #[serde(default)]
    pub grounded: Option<GroundedCaption>,
    /// Class name for evaluation datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Per-pixel class-index PNG for segmentation datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

impl SampleRecord {
    pub fn coordinate(&self) -> Result<GeoCoordinate> {
        GeoCoordinate::new(self.lat, self.lon)
            .map_err(|e| Error::Dataset(format!("record {}: {e}", self.id)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub image_height: u32,
    pub image_width: u32,
    pub channels: u32,
    pub record_count: usize,
    /// Record files relative to the dataset directory.
    pub record_files: Vec<String>,
    #[serde(default)]
    pub tokenizer_fingerprint: Option<String>,
    /// Segmentation class names, index = mask value.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mask_classes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<SampleRecord>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Writes via a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

impl Dataset {
    /// Accepts either the dataset directory or its manifest path.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let manifest: DatasetManifest = read_json(&manifest_path)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let mut records = Vec::with_capacity(manifest.record_count);
        for file in &manifest.record_files {
            let p = root.join(file);
            let f = fs::File::open(&p).map_err(|e| Error::io(format!("opening {}", p.display()), e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SampleRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::Dataset(format!("{}:{}: {e}", p.display(), n + 1)))?;
                records.push(rec);
            }
        }
        if records.len() != manifest.record_count {
            return Err(Error::Dataset(format!(
                "manifest declares {} records, record files hold {}",
                manifest.record_count,
                records.len()
            )));
        }
        check_unique_ids(records.iter().map(|r| r.id.as_str()))?;
        Ok(Self { root, manifest, records })
    }

    /// Writes `manifest.json` and a single `records.jsonl` into `self.root`.
    pub fn save(&mut self) -> Result<()> {
        check_unique_ids(self.records.iter().map(|r| r.id.as_str()))?;
        let mut lines = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut lines, r)?;
            lines.write_all(b"\n").map_err(|e| Error::io("buffering records", e))?;
        }
        self.manifest.record_count = self.records.len();
        self.manifest.record_files = vec!["records.jsonl".into()];
        write_atomic(&self.root.join("records.jsonl"), &lines)?;
        let mut m = serde_json::to_vec_pretty(&self.manifest)?;
        m.push(b'\n');
        write_atomic(&self.root.join(MANIFEST_FILE), &m)
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records in the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Vec<SampleRecord>> {
        let by_id: std::collections::HashMap<&str, &SampleRecord> =
            self.records.iter().map(|r| (r.id.as_str(), r)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Split(format!("id {id} is not in the dataset")))
            })
            .collect()
    }

    pub fn load_rgb(&self, record: &SampleRecord) -> Result<image::RgbImage> {
        let path = self.root.join(&record.image_path);
        let img = image::open(&path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
            .to_rgb8();
        if img.width() != self.manifest.image_width || img.height() != self.manifest.image_height {
            return Err(Error::Dataset(format!(
                "image {} is {}x{}, manifest declares {}x{}",
                record.image_path,
                img.width(),
                img.height(),
                self.manifest.image_width,
                self.manifest.image_height
            )));
        }
        Ok(img)
    }

    /// Image scaled to `[0, 1]`.
    pub fn load_image(&self, record: &SampleRecord) -> Result<ImageArray<f32>> {
        Ok(rgb_to_array(&self.load_rgb(record)?))
    }

    /// Row-major class indices of the record's label mask.
    pub fn load_mask(&self, record: &SampleRecord) -> Result<Vec<usize>> {
        let rel = record
            .mask_path
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("record {} has no mask", record.id)))?;
        let path = self.root.join(rel);
        let img = image::open(&path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
            .to_luma8();
        if img.width() != self.manifest.image_width || img.height() != self.manifest.image_height {
            return Err(Error::Dataset(format!("mask {rel} does not match the image size")));
        }
        Ok(img.pixels().map(|p| p.0[0] as usize).collect())
    }
}

pub fn rgb_to_array(img: &image::RgbImage) -> ImageArray<f32> {
    ImageArray {
        height: img.height() as usize,
        width: img.width() as usize,
        channels: 3,
        data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    }
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Dataset(format!("duplicate record id {id}")));
        }
    }
    Ok(())
}

/// `x` snapped to the nearest integer when within 1e-9, so that e.g. `0.7 · 10` counts as 7.
fn snap(x: f64) -> f64 {
    if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x
    }
}

/// Keeps the `ceil(fraction · N)` highest-scoring records, ties broken by ascending id.
/// Survivors keep their input order.
pub fn filter_top_fraction(records: &[SampleRecord], fraction: f64) -> Result<Vec<SampleRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut ranked = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        match r.score {
            Some(s) if s.is_finite() => ranked.push((s, r.id.as_str(), i)),
            _ => return Err(Error::Dataset(format!("record {} has no usable score", r.id))),
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let n = records.len();
    let keep = if n == 0 { 0 } else { (snap(fraction * n as f64).ceil() as usize).clamp(1, n) };
    let mut chosen: Vec<usize> = ranked[..keep].iter().map(|t| t.2).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| records[i].clone()).collect())
}

/// Train/val/test membership published alongside a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    /// `[train, val, test]`.
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: SplitSpec = read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec_pretty(self)?;
        b.push(b'\n');
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// sha256 of the serialized spec.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn validate(&self) -> Result<()> {
        check_fractions(&self.fractions)?;
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Split(format!("id {id} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn ids(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions {f:?} must lie in [0, 1] and sum to 1")));
    }
    Ok(())
}

/// Sorts the ids, Fisher–Yates shuffles them with ChaCha8 seeded by `seed`, and cuts at
/// `floor(f · N)` for val and test; the remainder goes to train.
pub fn generate_splits(ids: &[String], seed: u64, fractions: [f64; 3]) -> Result<SplitSpec> {
    check_fractions(&fractions)?;
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    if let Some(w) = order.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Split(format!("duplicate id {}", w[0])));
    }
    let mut r = rng::seeded(seed);
    for i in (1..order.len()).rev() {
        let j = ((r.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        order.swap(i, j);
    }
    let n = order.len();
    let n_val = snap(fractions[1] * n as f64).floor() as usize;
    let n_test = snap(fractions[2] * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(SplitSpec {
        seed,
        fractions,
        train: order,
        val,
        test,
    })
}
