//! TOML run configuration with `[train]`, `[pretrain]`, `[split]`, `[toy]`
//! and `[gmad]` sections. Missing keys take their defaults; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::PretrainConfig;
use crate::data::ToyCorpusSpec;
use crate::error::{Error, Result};
use crate::gmad::DEFAULT_EPSILON_FRACTION;
use crate::pipeline::{ModelShape, SplitSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmadConfig {
    pub levels: usize,
    pub epsilon_fraction: f64,
    pub n_patches: usize,
}

impl Default for GmadConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            epsilon_fraction: DEFAULT_EPSILON_FRACTION,
            n_patches: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub split: SplitSpec,
    pub toy: ToyCorpusSpec,
    pub gmad: GmadConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.validate()?;
        if self.gmad.levels == 0 || !(self.gmad.epsilon_fraction > 0.0) || self.gmad.n_patches == 0 {
            return Err(Error::Config(
                "gmad needs levels, epsilon_fraction and n_patches > 0".into(),
            ));
        }
        Ok(())
    }

    /// Desk-scale settings for the generated toy corpus: 64×64 patches, a
    /// narrow network and a faster schedule.
    pub fn toy() -> Self {
        Self {
            train: TrainConfig {
                initial_lr: 2e-3,
                lr_decay_factor: 1.05,
                batch_size: 32,
                epochs: 40,
                patch_size: 64,
                patches_per_image: 8,
                test_patches: 8,
                model: ModelShape {
                    channels: [8, 16, 32, 32],
                    depths: [1, 1, 1, 1],
                    mlp_ratio: 2,
                    hfen_channels: 8,
                    head_hidden: 32,
                    reduction: 4,
                },
                ..Default::default()
            },
            toy: ToyCorpusSpec {
                n_refs: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_files() {
        let c = RunConfig::toy();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let p = RunConfig::from_toml("[train]\nepochs = 2\nno_dan = true\n").unwrap();
        assert_eq!(p.train.epochs, 2);
        assert!(p.train.no_dan);
        assert_eq!(p.train.initial_lr, 2e-5);
        assert_eq!(p.split.n_repeats, 10);
    }

    #[test]
    fn shipped_toy_config_matches() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::toy());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::from_toml("[train]\nepoch = 2\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[train]\npatch_size = 100\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[split]\ntrain_fraction = 1.0\n"),
            Err(Error::Config(_))
        ));
    }
}
