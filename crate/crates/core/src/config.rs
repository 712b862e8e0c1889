//! Model configuration file (TOML).
//!
//! ```toml
//! [quantization]
//! delta_s = 0.25
//! delta_t = 0.1
//! n_scans = 3
//!
//! [network]
//! motion_channels = [8, 16, 16]
//! # ...every NetworkConfig field
//!
//! [decode]
//! score_threshold = 0.3
//! top_k = 32
//!
//! [loss]
//! reduction = "mean"
//! focal = { sigma = 2.0, gamma = 4.0 }
//!
//! [refinement]
//! alpha0 = 0.6
//! # ...
//!
//! [training]
//! steps = 300
//! learning_rate = 0.001
//! ```
//!
//! Missing sections take their defaults. Only `quantization` and `network`
//! enter the checkpoint hash since they alone determine parameter shapes
//! and the meaning of the weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::QuantizationConfig;
use crate::network::{DecodeConfig, LossConfig, NetworkConfig};
use crate::refinement::RefinementConfig;

/// Adam settings and schedule of the toy training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seed of the frame sampling order.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub quantization: QuantizationConfig,
    pub network: NetworkConfig,
    pub decode: DecodeConfig,
    pub loss: LossConfig,
    pub refinement: RefinementConfig,
    pub training: TrainingConfig,
}

#[derive(Serialize)]
struct HashedPart<'a> {
    quantization: &'a QuantizationConfig,
    network: &'a NetworkConfig,
}

impl ModelConfig {
    /// Desk-scale setup used by the synthetic scenes and the tests.
    pub fn toy() -> Self {
        Self {
            quantization: QuantizationConfig {
                delta_s: 0.25,
                delta_t: 0.1,
                n_scans: 3,
            },
            network: NetworkConfig::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.quantization.validate()?;
        self.network.validate()?;
        self.loss.focal.validate()?;
        self.refinement.validate()?;
        self.training.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML of the shape-determining sections.
    pub fn hash(&self) -> [u8; 32] {
        let part = HashedPart {
            quantization: &self.quantization,
            network: &self.network,
        };
        let text = toml::to_string(&part).expect("config is always representable as TOML");
        Sha256::digest(text.as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig::toy();
        let back = ModelConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = ModelConfig::from_toml_str("[refinement]\nalpha0 = 0.7\n").unwrap();
        assert_eq!(c.refinement.alpha0, 0.7);
        assert_eq!(c.refinement.theta0, 5);
        assert_eq!(c.network, NetworkConfig::default());
    }

    #[test]
    fn hash_ignores_refinement_but_not_network() {
        let a = ModelConfig::toy();
        let mut b = a.clone();
        b.refinement.alpha0 = 0.9;
        assert_eq!(a.hash(), b.hash());
        b.network.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ModelConfig::from_toml_str("[refinement]\nalpha9 = 1\n").is_err());
    }
}
