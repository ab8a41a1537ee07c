//! Sweep configuration: the JSON schema is exactly these fields;
//! unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mf,
    Opmf,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Mf => "mf",
            ModelKind::Opmf => "opmf",
        }
    }
}

/// What an experiment trains against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Factor a seeded random matrix with entries U(0, 1).
    Matrix {
        rows: usize,
        cols: usize,
        /// Only "uniform01" is defined.
        dist: String,
        seed: u64,
    },
    /// Pre-train a small dense net, freeze it, and fine-tune adapters
    /// on a shifted task.
    ToyFinetune(ToyFinetuneSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyFinetuneSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    /// Rank of the planted first-layer shift in the teacher.
    pub shift_rank: usize,
    pub shift_scale: f64,
    pub seed: u64,
}

impl Default for ToyFinetuneSpec {
    fn default() -> Self {
        ToyFinetuneSpec {
            in_dim: 16,
            hidden_dim: 24,
            out_dim: 6,
            train_samples: 256,
            eval_samples: 128,
            pretrain_steps: 400,
            pretrain_lr: 1e-2,
            shift_rank: 2,
            shift_scale: 0.8,
            seed: 17,
        }
    }
}

/// Declarative grid over learning rates, optimizers, seeds, model
/// kinds, and MLP widths. The cross-product of the axes defines the
/// run set; every run is uniquely fingerprinted by its cell + seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub experiment: String,
    pub target: TargetSpec,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_model_kinds")]
    pub model_kinds: Vec<ModelKind>,
    #[serde(default = "default_optimizers")]
    pub optimizers: Vec<OptimizerKind>,
    #[serde(default = "default_lr_grid")]
    pub lrs: Vec<f64>,
    #[serde(default = "default_hidden_widths")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_latent")]
    pub latent: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub out_dir: PathBuf,
}

fn default_rank() -> usize {
    8
}

fn default_model_kinds() -> Vec<ModelKind> {
    vec![ModelKind::Mf, ModelKind::Opmf]
}

fn default_optimizers() -> Vec<OptimizerKind> {
    vec![OptimizerKind::Sgd]
}

/// 8 log-spaced values per decade across [1e-4, 1e0], endpoints
/// inclusive: lr_i = 10^(-4 + i/8), i = 0..=32.
pub fn default_lr_grid() -> Vec<f64> {
    (0..=32).map(|i| 10f64.powf(-4.0 + i as f64 / 8.0)).collect()
}

fn default_hidden_widths() -> Vec<usize> {
    vec![32]
}

fn default_latent() -> usize {
    128
}

fn default_steps() -> u64 {
    1000
}

fn default_warmup() -> u64 {
    50
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_workers() -> usize {
    1
}

impl SweepConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::Config("experiment name is empty".into()));
        }
        if let TargetSpec::Matrix { rows, cols, dist, .. } = &self.target {
            if *rows == 0 || *cols == 0 {
                return Err(Error::Config("target dims must be positive".into()));
            }
            if dist != "uniform01" {
                return Err(Error::Config(format!(
                    "unknown target distribution '{dist}' (only uniform01)"
                )));
            }
            if self.rank == 0 || self.rank > *rows.min(cols) {
                return Err(Error::Config(format!(
                    "rank {} out of range for {rows}x{cols} target",
                    self.rank
                )));
            }
        }
        if self.lrs.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("lr grid and seeds must be non-empty".into()));
        }
        if self.lrs.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.model_kinds.is_empty() || self.optimizers.is_empty() {
            return Err(Error::Config(
                "model_kinds and optimizers must be non-empty".into(),
            ));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden_widths must be positive".into()));
        }
        if self.latent == 0 {
            return Err(Error::Config("latent must be positive".into()));
        }
        if self.warmup > self.steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds steps {}",
                self.warmup, self.steps
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "experiment": "t",
            "target": {"kind": "matrix", "rows": 10, "cols": 10, "dist": "uniform01", "seed": 5},
            "out_dir": "out"
        }"#
        .to_string()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = SweepConfig::from_json(&minimal_json()).unwrap();
        assert_eq!(cfg.rank, 8);
        assert_eq!(cfg.steps, 1000);
        assert_eq!(cfg.warmup, 50);
        assert_eq!(cfg.latent, 128);
        assert_eq!(cfg.hidden_widths, vec![32]);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.lrs.len(), 33);
        assert!((cfg.lrs[0] - 1e-4).abs() < 1e-18);
        assert!((cfg.lrs[32] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = minimal_json().replace("\"out_dir\": \"out\"", "\"out_dir\": \"out\", \"bogus\": 1");
        assert!(SweepConfig::from_json(&json).is_err());
    }

    #[test]
    fn rank_bounds_checked() {
        let json = minimal_json().replace("\"out_dir\"", "\"rank\": 11, \"out_dir\"");
        assert!(SweepConfig::from_json(&json).is_err());
    }

    #[test]
    fn lr_grid_is_log_spaced_per_decade() {
        let grid = default_lr_grid();
        // Eight steps per decade: every 8th entry is a power of ten.
        assert!((grid[8] - 1e-3).abs() < 1e-15);
        assert!((grid[16] - 1e-2).abs() < 1e-14);
        let ratio = grid[1] / grid[0];
        for w in grid.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_finetune_target_parses() {
        let json = r#"{
            "experiment": "toy",
            "target": {"kind": "toy_finetune", "in_dim": 8, "hidden_dim": 16, "out_dim": 4,
                       "train_samples": 64, "eval_samples": 32, "pretrain_steps": 50,
                       "pretrain_lr": 0.01, "shift_rank": 2, "shift_scale": 0.5, "seed": 3},
            "out_dir": "out"
        }"#;
        let cfg = SweepConfig::from_json(json).unwrap();
        assert!(matches!(cfg.target, TargetSpec::ToyFinetune(_)));
    }
}
