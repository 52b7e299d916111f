//! Conditional 2-D Gaussian mixture: one mode per condition label.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            modes: 8,
            radius: 1.0,
            std: 0.1,
        }
    }
}

/// Modes equally spaced on a circle; condition `c` selects mode `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    cfg: MixtureConfig,
}

impl GaussianMixture {
    pub fn new(cfg: MixtureConfig) -> Result<Self> {
        if cfg.modes == 0 || !(cfg.std > 0.0) || !(cfg.radius >= 0.0) {
            return Err(Error::Config(
                "mixture needs modes > 0, std > 0, radius >= 0".into(),
            ));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &MixtureConfig {
        &self.cfg
    }

    pub fn modes(&self) -> usize {
        self.cfg.modes
    }

    pub fn std(&self) -> f64 {
        self.cfg.std
    }

    pub fn mode_mean(&self, c: usize) -> [f64; 2] {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / self.cfg.modes as f64;
        [self.cfg.radius * angle.cos(), self.cfg.radius * angle.sin()]
    }

    pub fn sample<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Vec<f64> {
        let m = self.mode_mean(c);
        m.iter()
            .map(|&mu| mu + self.cfg.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}
