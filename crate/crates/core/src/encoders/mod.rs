//! Vision, text, fusion and location encoders.
//!
//! Every encoder produces per-token states plus a pooled embedding: the
//! classification-token state projected into the shared space and
//! L2-normalised.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub mod fusion;
pub mod harmonics;
pub mod location;
pub mod text;
pub mod vision;

pub use fusion::{FusedOutput, FusionEncoder};
pub use harmonics::spherical_harmonic_features;
pub use location::LocationEncoder;
pub use text::TextEncoder;
pub use vision::VisionEncoder;

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub proj_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            width: 64,
            depth: 2,
            heads: 4,
            proj_dim: 32,
            mlp_ratio: default_mlp_ratio(),
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        positive(&[
            ("vision.image_size", self.image_size),
            ("vision.patch_size", self.patch_size),
            ("vision.channels", self.channels),
            ("vision.width", self.width),
            ("vision.depth", self.depth),
            ("vision.heads", self.heads),
            ("vision.proj_dim", self.proj_dim),
            ("vision.mlp_ratio", self.mlp_ratio),
        ])?;
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "vision.image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        divisible("vision", self.width, self.heads)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Filled from the vocabulary when left at 0.
    #[serde(default)]
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub proj_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            max_len: 16,
            width: 64,
            depth: 2,
            heads: 4,
            proj_dim: 32,
            mlp_ratio: default_mlp_ratio(),
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::datapipe::vocab::NUM_SPECIAL {
            return Err(Error::Config(format!(
                "text.vocab_size {} cannot hold the special tokens",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("text.max_len must be at least 2".into()));
        }
        positive(&[
            ("text.width", self.width),
            ("text.depth", self.depth),
            ("text.heads", self.heads),
            ("text.proj_dim", self.proj_dim),
            ("text.mlp_ratio", self.mlp_ratio),
        ])?;
        divisible("text", self.width, self.heads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 1,
            heads: 4,
            mlp_ratio: default_mlp_ratio(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        positive(&[
            ("fusion.width", self.width),
            ("fusion.depth", self.depth),
            ("fusion.heads", self.heads),
            ("fusion.mlp_ratio", self.mlp_ratio),
        ])?;
        divisible("fusion", self.width, self.heads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocationConfig {
    pub max_degree: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub proj_dim: usize,
}

impl Default for LocationConfig {
    fn default() -> Self {
        Self {
            max_degree: 3,
            hidden_width: 64,
            hidden_depth: 2,
            proj_dim: 32,
        }
    }
}

impl LocationConfig {
    pub fn validate(&self) -> Result<()> {
        positive(&[
            ("location.hidden_width", self.hidden_width),
            ("location.proj_dim", self.proj_dim),
        ])
    }

    pub fn num_features(&self) -> usize {
        harmonics::basis_len(self.max_degree)
    }
}

fn positive(fields: &[(&str, usize)]) -> Result<()> {
    for (name, v) in fields {
        if *v == 0 {
            return Err(Error::Config(format!("{name} must be positive")));
        }
    }
    Ok(())
}

fn divisible(prefix: &str, width: usize, heads: usize) -> Result<()> {
    if !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{prefix}.width {width} is not divisible by heads {heads}"
        )));
    }
    Ok(())
}

/// Latitude/longitude in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GeoCoordinate {
    lat: f64,
    lon: f64,
}

impl GeoCoordinate {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidArgument(format!(
                "coordinate ({lat}, {lon}) outside [-90, 90] x [-180, 180]"
            )));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Token ids with a padding mask; padded positions form a suffix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
    pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, pad_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != pad_mask.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids but {} mask entries",
                ids.len(),
                pad_mask.len()
            )));
        }
        if let Some(first_pad) = pad_mask.iter().position(|&p| p) {
            if pad_mask[first_pad..].iter().any(|&p| !p) {
                return Err(Error::InvalidArgument(
                    "padding must be a suffix of the sequence".into(),
                ));
            }
        }
        Ok(Self { ids, pad_mask })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Count of non-pad positions.
    pub fn content_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    /// Same mask, different ids (used for corruption).
    pub fn with_ids(&self, ids: Vec<u32>) -> Result<Self> {
        Self::new(ids, self.pad_mask.clone())
    }
}

/// An `H × W × C` image with channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageArray<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ImageArray<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ImageArray<U> {
        ImageArray {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Splits a square image into row-major, flattened `(y, x, c)` patches.
pub fn patchify<T: Scalar>(image: &ImageArray<T>, patch_size: usize) -> Result<Tensor<T>> {
    if image.height != image.width {
        return Err(Error::Config(format!(
            "image must be square, got {}x{}",
            image.height, image.width
        )));
    }
    if patch_size == 0 || !image.height.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "image size {} is not divisible by patch size {patch_size}",
            image.height
        )));
    }
    let grid = image.height / patch_size;
    let c = image.channels;
    let pd = patch_size * patch_size * c;
    let mut out = Tensor::zeros(grid * grid, pd);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            for py in 0..patch_size {
                let y = gy * patch_size + py;
                let src = (y * image.width + gx * patch_size) * c;
                row[py * patch_size * c..(py + 1) * patch_size * c]
                    .copy_from_slice(&image.data[src..src + patch_size * c]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    image_size: usize,
    channels: usize,
    patch_size: usize,
) -> Result<ImageArray<T>> {
    if patch_size == 0 || !image_size.is_multiple_of(patch_size) {
        return Err(Error::Config("image size not divisible by patch size".into()));
    }
    let grid = image_size / patch_size;
    if patches.shape() != (grid * grid, patch_size * patch_size * channels) {
        return Err(Error::Shape(format!(
            "patch tensor {:?} does not tile a {image_size}px image",
            patches.shape()
        )));
    }
    let c = channels;
    let mut data = vec![T::zero(); image_size * image_size * c];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = patches.row(gy * grid + gx);
            for py in 0..patch_size {
                let y = gy * patch_size + py;
                let dst = (y * image_size + gx * patch_size) * c;
                data[dst..dst + patch_size * c]
                    .copy_from_slice(&row[py * patch_size * c..(py + 1) * patch_size * c]);
            }
        }
    }
    ImageArray::new(image_size, image_size, channels, data)
}

/// Token states and pooled embedding for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    pub token_states: Tensor<T>,
    pub pooled: Vec<T>,
}

/// Splits batched encoder output into per-sample [`EmbeddingSet`]s.
pub(crate) fn split_embeddings<T: Scalar>(
    states: &Tensor<T>,
    pooled: &Tensor<T>,
    seq_len: usize,
) -> Vec<EmbeddingSet<T>> {
    (0..pooled.rows())
        .map(|b| EmbeddingSet {
            token_states: states.slice_rows(b * seq_len, seq_len),
            pooled: pooled.row(b).to_vec(),
        })
        .collect()
}
