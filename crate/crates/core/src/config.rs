//! Run configuration: one TOML file with a section per component.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::logs::LogConfig;
use crate::pipeline::PipelineConfig;
use crate::prompt::PromptConfig;
use crate::reward::RewardConfig;
use crate::serving::DEFAULT_EPSILON;
use crate::world::WorldConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "RUN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServingConfig {
    pub epsilon: f64,
    /// Total simulated impressions, split evenly over (item, group) cells.
    pub impressions: u64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, impressions: 100_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub logs: LogConfig,
    pub reward: RewardConfig,
    pub prompt: PromptConfig,
    pub diffusion: DiffusionConfig,
    pub pipeline: PipelineConfig,
    pub serving: ServingConfig,
}

impl Default for RunConfig {
    /// Desk-scale run: minibatches far below the production sizes so that a
    /// few hundred creatives still yield several optimizer steps per epoch.
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            world: WorldConfig::default(),
            logs: LogConfig::default(),
            reward: RewardConfig { batch_size: 50, epochs: 100, ..RewardConfig::default() },
            prompt: PromptConfig { batch_size: 64, ..PromptConfig::default() },
            diffusion: DiffusionConfig::default(),
            pipeline: PipelineConfig::default(),
            serving: ServingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies the `RUN_SEED` override if set.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.world.validate()?;
        self.pipeline.validate(self.world.vocab_size)?;
        if !(0.0..=1.0).contains(&self.serving.epsilon) {
            return Err(Error::Config("serving.epsilon outside [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap(), RunConfig::from_toml(&text).unwrap().hash().unwrap());
    }

    #[test]
    fn unknown_keys_and_bad_versions_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[world]\nlatent_dims = 3").is_err());
        assert!(RunConfig::from_toml("schema_version = 9").is_err());
        let partial = RunConfig::from_toml("seed = 5\n[pipeline]\nrounds = 2").unwrap();
        assert_eq!((partial.seed, partial.pipeline.rounds), (5, 2));
    }

    #[test]
    fn invalid_sections_rejected() {
        assert!(RunConfig::from_toml("[pipeline]\nkeep = 10\nper_cell = 10").is_err());
        assert!(RunConfig::from_toml("[world]\nvocab_size = 6").is_err());
    }
}
