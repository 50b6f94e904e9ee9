//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{NoiseConfig, NX};
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::ukf::{AngleMode, P0_DIAG};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Sigma-point spread of the adaptive filter.
    pub gamma: f64,
    pub p0_diag: [f64; NX],
    pub angles: AngleMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            p0_diag: P0_DIAG,
            angles: AngleMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Episodes per regime.
    pub episodes: usize,
    pub tune_trials: usize,
    pub tune_episodes: usize,
    /// Episodes used for the per-step timing column.
    pub timing_episodes: usize,
    /// Policy checkpoint for the adaptive filter.
    pub checkpoint: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            tune_trials: 100,
            tune_episodes: 500,
            timing_episodes: 20,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dt: f64,
    /// Steps per benchmark episode.
    pub steps: usize,
    pub noise: NoiseConfig,
    pub filter: FilterConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            dt: 0.1,
            steps: 60,
            noise: NoiseConfig::default(),
            filter: FilterConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dt > 0.0) || self.steps == 0 {
            return bad(format!("dt = {} and steps = {} must be positive", self.dt, self.steps));
        }
        let n = &self.noise;
        if [n.sigma_r, n.sigma_b, n.sigma_a, n.sigma_omega].iter().any(|v| !(*v >= 0.0)) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&n.glint_prob) || !(n.glint_scale_train >= 1.0) || !(n.glint_scale_eval >= 1.0) {
            return bad("glint_prob must lie in [0, 1] and glint scales must be ≥ 1".into());
        }
        if !(self.filter.gamma > 0.0) || self.filter.p0_diag.iter().any(|v| !(*v > 0.0)) {
            return bad("filter.gamma and filter.p0_diag entries must be positive".into());
        }
        let b = &self.bench;
        if b.episodes == 0 || b.tune_trials == 0 || b.tune_episodes == 0 {
            return bad("bench episode and trial counts must be positive".into());
        }
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let c = Config::default();
        let back = Config::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = Config::parse("seed = 7\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::parse("sed = 7"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("dt = -1.0"), Err(Error::Config(_))));
    }
}
