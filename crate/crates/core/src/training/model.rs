//! The full pretraining model: four encoders, three prediction heads and the shared temperature.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{
    FusionConfig, FusionEncoder, GeoCoordinate, ImageArray, LocationConfig, LocationEncoder, TextConfig, TextEncoder,
    TokenSequence, VisionConfig, VisionEncoder,
};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::objectives::{PatchCodebook, TemperatureConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Scalar;

/// What masked image modelling predicts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimTarget {
    /// Cross-entropy over k-means patch codes.
    #[default]
    Codebook,
    /// Mean squared error on raw patch pixels.
    Pixels,
}

/// Architecture only; its fingerprint guards checkpoint compatibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub vision: VisionConfig,
    #[serde(default)]
    pub text: TextConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub location: LocationConfig,
    #[serde(default)]
    pub temperature: TemperatureConfig,
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
    #[serde(default)]
    pub mim_target: MimTarget,
}

fn default_codebook_size() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            text: TextConfig::default(),
            fusion: FusionConfig::default(),
            location: LocationConfig::default(),
            temperature: TemperatureConfig::default(),
            codebook_size: default_codebook_size(),
            mim_target: MimTarget::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        self.fusion.validate()?;
        self.location.validate()?;
        self.temperature.validate()?;
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook_size must be at least 1".into()));
        }
        if self.vision.proj_dim != self.text.proj_dim || self.vision.proj_dim != self.location.proj_dim {
            return Err(Error::Config(format!(
                "projection dims must agree: vision {}, text {}, location {}",
                self.vision.proj_dim, self.text.proj_dim, self.location.proj_dim
            )));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Parameter handles for every module. Independent of the scalar type, so the
/// same handles address an `f32` training store and an `f64` checking store.
#[derive(Clone, Debug)]
pub struct Modules {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub fusion: FusionEncoder,
    pub location: LocationEncoder,
    pub mim_head: Linear,
    pub mlm_head: Linear,
    pub itm_head: Linear,
    pub log_tau: ParamId,
}

impl Modules {
    pub fn new<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let vision = VisionEncoder::new(&config.vision, store, rng)?;
        let text = TextEncoder::new(&config.text, store, rng)?;
        let fusion = FusionEncoder::new(&config.fusion, config.vision.width, config.text.width, store, rng)?;
        let location = LocationEncoder::new(&config.location, store, rng)?;
        let mim_out = match config.mim_target {
            MimTarget::Codebook => config.codebook_size,
            MimTarget::Pixels => config.vision.patch_dim(),
        };
        let mim_head = Linear::new(store, "head.mim", config.vision.width, mim_out, true, rng);
        let mlm_head = Linear::new(store, "head.mlm", config.text.width, config.text.vocab_size, true, rng);
        let itm_head = Linear::new(store, "head.itm", config.fusion.width, 2, true, rng);
        let log_tau = store.add(
            "temperature.log_tau",
            crate::Tensor::scalar(T::of(config.temperature.init.ln())),
            false,
        );
        Ok(Self {
            vision,
            text,
            fusion,
            location,
            mim_head,
            mlm_head,
            itm_head,
            log_tau,
        })
    }
}

/// Trained (or freshly initialised) model with its `f32` parameters.
#[derive(Clone, Debug)]
pub struct FlavarsModel {
    pub config: ModelConfig,
    pub modules: Modules,
    pub store: ParamStore<f32>,
    pub codebook: Option<PatchCodebook>,
}

impl FlavarsModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::derived(seed, "init", 0);
        let modules = Modules::new(config, &mut store, &mut r)?;
        Ok(Self {
            config: config.clone(),
            modules,
            store,
            codebook: None,
        })
    }

    pub fn tau(&self) -> f64 {
        let t = &self.config.temperature;
        (self.store.get(self.modules.log_tau).item() as f64).exp().clamp(t.tau_min, t.tau_max)
    }

    /// Pooled unit-norm image embeddings, one per image.
    pub fn encode_images(&self, images: &[ImageArray<f32>]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .modules
            .vision
            .encode(&self.store, images)?
            .into_iter()
            .map(|e| e.pooled)
            .collect())
    }

    pub fn encode_texts(&self, tokens: &[TokenSequence]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .modules
            .text
            .encode(&self.store, tokens)?
            .into_iter()
            .map(|e| e.pooled)
            .collect())
    }

    pub fn encode_locations(&self, coords: &[GeoCoordinate]) -> Vec<Vec<f32>> {
        self.modules.location.encode(&self.store, coords)
    }

    /// Checksum over the vision encoder's parameters only.
    pub fn vision_checksum(&self) -> String {
        self.store.checksum_where(|n| n.starts_with("vision."))
    }
}
