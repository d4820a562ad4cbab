//! Experiment configuration, read from sectioned TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::InferenceConfig;
use crate::losses::LossWeights;
use crate::matching::PseudoConfig;
use crate::sim::{derive_seed, Ablation, TrainConfig, WorldConfig};

const FRAME_TAG: u64 = 7;

/// The defaults file shipped with the repository.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../configs/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    /// Number of frame vectors; half score the known subspace.
    pub k: usize,
    /// Feature dimension of the head.
    pub d: usize,
    /// Explicit frame seed; derived from the master seed when absent.
    pub seed: Option<u64>,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            k: 128,
            d: 256,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub frame: FrameConfig,
    pub losses: LossWeights,
    pub pseudo: PseudoConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub inference: InferenceConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.losses.validate()?;
        self.pseudo.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        let f = &self.frame;
        if f.k < 2 || !f.k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "frame k must be even and at least 2, got {}",
                f.k
            )));
        }
        if f.d < f.k {
            return Err(Error::Config(format!(
                "frame d = {} is smaller than k = {}",
                f.d, f.k
            )));
        }
        Ok(())
    }

    /// World settings with the master seed applied.
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            ..self.world.clone()
        }
    }

    pub fn frame_seed(&self) -> u64 {
        self.frame
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, FRAME_TAG))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config always serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_match_code_defaults() {
        let cfg = ExperimentConfig::from_toml_str(DEFAULT_CONFIG_TOML).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn reference_hyperparameters() {
        let cfg = ExperimentConfig::default();
        assert_eq!((cfg.frame.k, cfg.frame.d), (128, 256));
        assert_eq!(cfg.pseudo.tau, 20);
        assert_eq!(cfg.inference.score_threshold, 0.10);
        assert_eq!(cfg.inference.nms_iou, 0.6);
        assert_eq!(cfg.losses.margin, 0.5);
    }

    #[test]
    fn partial_files_fill_defaults_and_typos_fail() {
        let cfg =
            ExperimentConfig::from_toml_str("seed = 9\n[ablation]\nekd_enabled = false\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(cfg.ablation.eus_enabled && !cfg.ablation.ekd_enabled);
        assert_eq!(cfg.world_config().seed, 9);
        assert!(matches!(
            ExperimentConfig::from_toml_str("[losses]\nmargn = 1.0\n"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml_str("[frame]\nk = 7\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[frame]\nk = 64\nd = 32\n").is_err());
    }

    #[test]
    fn digest_and_frame_seed_follow_the_config() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.frame_seed(), b.frame_seed());
        let pinned = ExperimentConfig {
            frame: FrameConfig {
                seed: Some(3),
                ..a.frame
            },
            ..a
        };
        assert_eq!(pinned.frame_seed(), 3);
        let round = ExperimentConfig::from_toml_str(&pinned.to_toml()).unwrap();
        assert_eq!(round, pinned);
    }
}
