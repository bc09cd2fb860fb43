//! Checkpoint directories: a versioned text manifest plus one little-endian `f32` blob.
//!
//! ```text
//! flavars-checkpoint 1
//! step 20
//! config_fingerprint <sha256>
//! ...
//! tensor param/vision.cls 1 64 0
//! checksum <sha256 of every line above>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::model::{FlavarsModel, ModelConfig};
use super::optim::AdamW;
use super::{TrainConfig, Trainer};
use crate::datapipe::{write_atomic, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::PatchCodebook;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FORMAT: &str = "flavars-checkpoint";
pub const VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.json";

/// Everything needed to evaluate a model or continue its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub model: FlavarsModel,
    pub optimizer: AdamW,
    pub rng: Rng,
    pub vocab: Vocabulary,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    /// Continues training under `config` (which may differ from the saved one in
    /// non-architectural settings such as the step budget).
    pub fn into_trainer(self, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        Ok(Trainer {
            model: self.model,
            optimizer: AdamW {
                config: config.adamw.clone(),
                ..self.optimizer
            },
            config,
            step: self.step,
            rng: self.rng,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(dir: &Path, trainer: &Trainer, vocab: &Vocabulary) -> Result<()> {
    let model = &trainer.model;
    let mut blob: Vec<u8> = Vec::with_capacity(model.store.numel() * 12 * 4);
    let mut tensors = String::new();
    let mut push = |name: &str, t: &Tensor<f32>| {
        let _ = writeln!(tensors, "tensor {name} {} {} {}", t.rows(), t.cols(), blob.len());
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (i, e) in model.store.entries().iter().enumerate() {
        push(&format!("param/{}", e.name), &e.value);
        push(&format!("adam_m/{}", e.name), &trainer.optimizer.m[i]);
        push(&format!("adam_v/{}", e.name), &trainer.optimizer.v[i]);
    }
    if let Some(cb) = &model.codebook {
        push("codebook", cb.centroids());
    }
    let vocab_json = serde_json::to_vec(vocab)?;
    let rng = &trainer.rng;
    let mut m = String::new();
    let _ = writeln!(m, "{FORMAT} {VERSION}");
    let _ = writeln!(m, "step {}", trainer.step);
    let _ = writeln!(m, "config_fingerprint {}", model.config.fingerprint());
    let _ = writeln!(m, "vocab {VOCAB_FILE} {}", sha256_hex(&vocab_json));
    let _ = writeln!(
        m,
        "rng {} {} {}",
        hex::encode(rng.get_seed()),
        rng.get_stream(),
        rng.get_word_pos()
    );
    let _ = writeln!(m, "adam_t {}", trainer.optimizer.t);
    let _ = writeln!(m, "blob {BLOB_FILE} {} {}", blob.len(), sha256_hex(&blob));
    let _ = writeln!(m, "model_config {}", serde_json::to_string(&model.config)?);
    let _ = writeln!(m, "train_config {}", serde_json::to_string(&trainer.config)?);
    m.push_str(&tensors);
    let digest = sha256_hex(m.as_bytes());
    let _ = writeln!(m, "checksum {digest}");
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(VOCAB_FILE), &vocab_json)?;
    write_atomic(&dir.join(MANIFEST_FILE), m.as_bytes())
}

fn read(dir: &Path, file: &str) -> Result<Vec<u8>> {
    let p = dir.join(file);
    fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

fn parse_num<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad {what} field")))
}

/// Loads and verifies a checkpoint. With `expected`, the architecture fingerprint
/// must match unless `force` is set.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>, force: bool) -> Result<Checkpoint> {
    let manifest_bytes = read(dir, MANIFEST_FILE)?;
    let manifest = String::from_utf8(manifest_bytes).map_err(|_| bad("manifest is not UTF-8"))?;
    let checksum_at = manifest
        .rfind("checksum ")
        .ok_or_else(|| Error::Checksum { path: dir.join(MANIFEST_FILE).display().to_string() })?;
    let (body, tail) = manifest.split_at(checksum_at);
    if tail.trim_end().strip_prefix("checksum ") != Some(&sha256_hex(body.as_bytes())) {
        return Err(Error::Checksum {
            path: dir.join(MANIFEST_FILE).display().to_string(),
        });
    }
    let mut lines = body.lines();
    let header = lines.next().unwrap_or_default();
    let (format, version) = header.split_once(' ').unwrap_or((header, ""));
    if format != FORMAT || version != VERSION {
        return Err(Error::Version {
            found: header.to_string(),
            expected: format!("{FORMAT} {VERSION}"),
        });
    }
    let mut step = None;
    let mut fingerprint = None;
    let mut vocab_sum = None;
    let mut rng_state = None;
    let mut adam_t = None;
    let mut blob_info = None;
    let mut model_config = None;
    let mut train_config = None;
    let mut tensors = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let mut f = rest.split(' ');
        match key {
            "step" => step = Some(parse_num::<u64>(f.next(), "step")?),
            "config_fingerprint" => fingerprint = Some(rest.to_string()),
            "vocab" => vocab_sum = f.nth(1).map(str::to_string),
            "rng" => {
                let seed = hex::decode(f.next().unwrap_or_default()).map_err(|_| bad("bad rng seed"))?;
                let seed: [u8; 32] = seed.try_into().map_err(|_| bad("bad rng seed length"))?;
                let stream: u64 = parse_num(f.next(), "rng stream")?;
                let pos: u128 = parse_num(f.next(), "rng position")?;
                rng_state = Some((seed, stream, pos));
            }
            "adam_t" => adam_t = Some(parse_num::<u64>(f.next(), "adam_t")?),
            "blob" => {
                let _name = f.next();
                let len: usize = parse_num(f.next(), "blob length")?;
                let sum = f.next().unwrap_or_default().to_string();
                blob_info = Some((len, sum));
            }
            "model_config" => model_config = Some(serde_json::from_str::<ModelConfig>(rest).map_err(|e| bad(e.to_string()))?),
            "train_config" => train_config = serde_json::from_str::<TrainConfig>(rest).ok(),
            "tensor" => tensors.push(TensorEntry {
                name: f.next().unwrap_or_default().to_string(),
                rows: parse_num(f.next(), "tensor rows")?,
                cols: parse_num(f.next(), "tensor cols")?,
                offset: parse_num(f.next(), "tensor offset")?,
            }),
            other => return Err(bad(format!("unknown manifest key {other:?}"))),
        }
    }
    let step = step.ok_or_else(|| bad("missing step"))?;
    let model_config = model_config.ok_or_else(|| bad("missing model_config"))?;
    let fingerprint = fingerprint.ok_or_else(|| bad("missing config_fingerprint"))?;
    if fingerprint != model_config.fingerprint() {
        return Err(bad("model_config does not match its fingerprint"));
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != fingerprint && !force {
            return Err(Error::Fingerprint {
                checkpoint: fingerprint,
                config: exp.fingerprint(),
            });
        }
    }
    let (blob_len, blob_sum) = blob_info.ok_or_else(|| bad("missing blob line"))?;
    let blob = read(dir, BLOB_FILE)?;
    if blob.len() != blob_len || sha256_hex(&blob) != blob_sum {
        return Err(Error::Checksum {
            path: dir.join(BLOB_FILE).display().to_string(),
        });
    }
    let vocab_bytes = read(dir, VOCAB_FILE)?;
    if vocab_sum.as_deref() != Some(&sha256_hex(&vocab_bytes)) {
        return Err(Error::Checksum {
            path: dir.join(VOCAB_FILE).display().to_string(),
        });
    }
    let vocab: Vocabulary = serde_json::from_slice(&vocab_bytes)?;

    let tensor_at = |e: &TensorEntry| -> Result<Tensor<f32>> {
        let n = e.rows * e.cols;
        let end = e.offset + 4 * n;
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| bad(format!("tensor {} lies outside the blob", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(e.rows, e.cols, data)
    };
    let find = |name: &str| tensors.iter().find(|t| t.name == name);

    let mut model = FlavarsModel::new(&model_config, 0)?;
    let mut optimizer = AdamW::new(Default::default(), &model.store);
    optimizer.t = adam_t.ok_or_else(|| bad("missing adam_t"))?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        let shape = model.store.get(id).shape();
        for (prefix, slot) in [("param", 0), ("adam_m", 1), ("adam_v", 2)] {
            let e = find(&format!("{prefix}/{name}")).ok_or_else(|| bad(format!("missing tensor {prefix}/{name}")))?;
            let t = tensor_at(e)?;
            if t.shape() != shape {
                return Err(bad(format!("tensor {prefix}/{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            match slot {
                0 => *model.store.get_mut(id) = t,
                1 => optimizer.m[id.0] = t,
                _ => optimizer.v[id.0] = t,
            }
        }
    }
    if let Some(e) = find("codebook") {
        model.codebook = Some(PatchCodebook::from_centroids(tensor_at(e)?)?);
    }
    let (seed, stream, pos) = rng_state.ok_or_else(|| bad("missing rng state"))?;
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    if let Some(tc) = &train_config {
        optimizer.config = tc.adamw.clone();
    }
    Ok(Checkpoint {
        step,
        model,
        optimizer,
        rng,
        vocab,
        train_config,
    })
}

/// Reads the `latest` pointer written by `fit`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<std::path::PathBuf> {
    let text = fs::read_to_string(out_dir.join(super::CHECKPOINT_DIR).join("latest")).ok()?;
    Some(std::path::PathBuf::from(text.trim()))
}
