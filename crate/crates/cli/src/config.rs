//! JSON run configuration.
//!
//! ```json
//! {
//!   "model": { "num_layers": 2, "d_model": 32, "num_heads": 2, "d_ff": 64, "max_seq_len": 32 },
//!   "pretrain": { "steps": 2000, "learning_rate": 0.001 },
//!   "train": { "n_vertices": 6, "prefix_len": 4, "epochs": 50, "patience": 10 },
//!   "learning_rates": [0.0001, 0.0002, 0.0005],
//!   "base_checkpoint": "base.ckpt",
//!   "metric": null,
//!   "seed": 0,
//!   "workers": 1
//! }
//! ```
//!
//! Every field is optional. `base_checkpoint` is resolved against the
//! directory of the config file. `PREFIXSUB_SEED` replaces both `seed` and
//! `train.seed`.

use std::fs;
use std::path::{Path, PathBuf};

use prefixsub_core::eval::MetricKind;
use prefixsub_core::model::{ModelConfig, PretrainConfig};
use prefixsub_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

pub const SEED_ENV: &str = "PREFIXSUB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base encoder architecture; `prefix_len` and `task_head` are set per run.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub learning_rates: Vec<f64>,
    pub base_checkpoint: Option<PathBuf>,
    /// Overrides the metric implied by the data schema.
    pub metric: Option<MetricKind>,
    /// Seed of base initialization and pretraining.
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            learning_rates: vec![1e-4, 2e-4, 5e-4],
            base_checkpoint: None,
            metric: None,
            seed: 0,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if let Some(p) = &cfg.base_checkpoint {
            if p.is_relative() {
                let dir = path.parent().unwrap_or(Path::new(""));
                cfg.base_checkpoint = Some(dir.join(p));
            }
        }
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::Input(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.learning_rates.is_empty() {
            return Err(CliError::Input("learning_rates must not be empty".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(CliError::Input("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn base_checkpoint(&self) -> Result<&Path> {
        self.base_checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Input("config has no base_checkpoint".into()))
    }

    /// SHA-256 of the canonical JSON form, ignoring `workers`.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            workers: 0,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_override_sets_both_seeds() {
        let mut c = RunConfig::default();
        c.apply_seed_override(Some(" 42 ")).unwrap();
        assert_eq!((c.seed, c.train.seed), (42, 42));
        c.apply_seed_override(None).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("-1")).is_err());
    }

    #[test]
    fn hash_ignores_workers_only() {
        let a = RunConfig::default();
        let b = RunConfig { workers: 8, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.seed = 1;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_fields_and_empty_grid_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"lr": 1}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"learning_rates": []}"#).unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
    }
}
