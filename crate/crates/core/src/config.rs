//! Run configuration files (TOML). Unknown keys are rejected and relative paths
//! are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{generate_splits, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::training::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory or its manifest.
    pub dataset: PathBuf,
    /// Published split file; generated from `seed` and `fractions` when absent.
    #[serde(default)]
    pub splits: Option<PathBuf>,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds training, split generation and probe training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses, resolves paths, applies the seed, validates, and checks that
    /// every input path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        cfg.check_inputs()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.dataset);
        if let Some(s) = self.data.splits.as_mut() {
            fix(s);
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.eval.seg.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        // Vocabulary size is filled in from the data, so check everything else.
        let mut m = self.model.clone();
        if m.text.vocab_size == 0 {
            m.text.vocab_size = crate::datapipe::vocab::NUM_SPECIAL + 1;
        }
        m.validate()?;
        if self.eval.knn.k == 0 {
            return Err(Error::Config("eval.knn.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn check_inputs(&self) -> Result<()> {
        if !self.data.dataset.exists() {
            return Err(Error::Config(format!("dataset {} does not exist", self.data.dataset.display())));
        }
        if let Some(s) = &self.data.splits {
            if !s.exists() {
                return Err(Error::Config(format!("split file {} does not exist", s.display())));
            }
        }
        Ok(())
    }

    /// The published split if configured, otherwise one generated from the seed.
    pub fn splits(&self, dataset: &Dataset) -> Result<SplitSpec> {
        match &self.data.splits {
            Some(p) => SplitSpec::load(p),
            None => {
                let ids: Vec<String> = dataset.records.iter().map(|r| r.id.clone()).collect();
                generate_splits(&ids, self.seed, self.data.fractions)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("[data]\ndataset = \"d\"\n[train]\nbatch_sise = 4\n").unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        let err = RunConfig::parse("bogus = 1\n[data]\ndataset = \"d\"\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn partial_tables_take_defaults() {
        let c = RunConfig::parse("seed = 3\n[data]\ndataset = \"d\"\n[model.vision]\npatch_size = 4\n").unwrap();
        assert_eq!(c.model.vision.patch_size, 4);
        assert_eq!(c.model.vision.image_size, 32);
        assert_eq!(c.train.batch_size, 32);
        c.validate().unwrap();
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let mut c = RunConfig::parse("[data]\ndataset = \"d\"\n").unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.data.dataset, PathBuf::from("/cfg/d"));
        assert_eq!(c.out_dir, PathBuf::from("/cfg/runs/default"));
    }
}
