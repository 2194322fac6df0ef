//! Run configuration: one JSON document drives every subcommand.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::genotype::{ArchKind, MergeVariant, OpSetName, SearchMode, Skeleton};

pub const CONFIG_SCHEMA: &str = "fornas/config/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonConfig {
    /// Normal cells per resolution stage.
    pub n: usize,
    /// Initial filter / width count.
    pub f: usize,
    pub stages: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticSpirals,
    SyntheticParity,
    TinyImageFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Input features (spirals: coordinate count, parity: bit count).
    #[serde(default = "default_features")]
    pub features: usize,
    /// Path for `tiny-image-file`.
    #[serde(default)]
    pub path: Option<String>,
}

fn default_size() -> usize {
    2500
}
fn default_noise() -> f64 {
    0.15
}
fn default_classes() -> usize {
    2
}
fn default_features() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub mode: SearchMode,
    pub opset: OpSetName,
    #[serde(default = "default_i_max")]
    pub i_max: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_merge")]
    pub merge_variant: MergeVariant,
    /// Isolated shields the parent model from candidates via sg/sf; the
    /// Joint ablation drops both shields and gates the candidate directly.
    #[serde(default = "default_true")]
    pub isolated: bool,
    pub skeleton: SkeletonConfig,
    #[serde(default = "default_seed_epochs")]
    pub seed_epochs: usize,
    #[serde(default = "default_phase_epochs")]
    pub weak_epochs: usize,
    #[serde(default = "default_phase_epochs")]
    pub train_epochs: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_growth_iterations")]
    pub growth_iterations: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Multiply-add budget K for final-model filtering.
    #[serde(default = "default_cost_budget")]
    pub cost_budget: u64,
    /// Reported amortization bound: weak-learn compute over child-training
    /// compute per iteration.
    #[serde(default = "default_amortization")]
    pub amortization_factor: f64,
    /// Optional wall-clock budget for the search loop, in seconds.
    #[serde(default)]
    pub wall_clock_limit_s: Option<u64>,
}

fn default_schema() -> String {
    CONFIG_SCHEMA.to_string()
}
fn default_i_max() -> usize {
    3
}
fn default_lambda() -> f64 {
    0.001
}
fn default_merge() -> MergeVariant {
    MergeVariant::CpEach
}
fn default_true() -> bool {
    true
}
fn default_seed_epochs() -> usize {
    30
}
fn default_phase_epochs() -> usize {
    20
}
fn default_lr0() -> f64 {
    0.025
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_growth_iterations() -> usize {
    8
}
fn default_workers() -> usize {
    1
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_cost_budget() -> u64 {
    60_000_000
}
fn default_amortization() -> f64 {
    16.0
}

impl RunConfig {
    pub fn arch(&self) -> ArchKind {
        match self.opset {
            OpSetName::Toy => ArchKind::Toy,
            OpSetName::Image => ArchKind::Image,
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton {
            normal_per_stage: self.skeleton.n,
            stages: self.skeleton.stages,
            filters: self.skeleton.f,
            arch: self.arch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.schema != CONFIG_SCHEMA {
            return fail(format!("schema must be {CONFIG_SCHEMA}, got {}", self.schema));
        }
        if self.i_max < 1 {
            return fail("i_max must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and >= 0".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be finite and > 0".into());
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be >= 0".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.workers < 1 {
            return fail("workers must be >= 1".into());
        }
        if self.skeleton.n < 1 || self.skeleton.f < 1 || self.skeleton.stages < 1 {
            return fail("skeleton n, f and stages must all be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)".into());
        }
        if self.cost_budget == 0 {
            return fail("cost_budget must be positive".into());
        }
        if self.amortization_factor <= 0.0 {
            return fail("amortization_factor must be positive".into());
        }
        if self.dataset.size < 10 {
            return fail("dataset.size must be >= 10".into());
        }
        if self.dataset.classes < 2 {
            return fail("dataset.classes must be >= 2".into());
        }
        if self.dataset.noise < 0.0 {
            return fail("dataset.noise must be >= 0".into());
        }
        if self.dataset.features < 1 {
            return fail("dataset.features must be >= 1".into());
        }
        if self.dataset.kind == DatasetKind::TinyImageFile && self.dataset.path.is_none() {
            return fail("tiny-image-file dataset needs a path".into());
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// A small toy-mode configuration suitable for desk-scale runs.
    pub fn toy_default() -> Self {
        RunConfig {
            schema: CONFIG_SCHEMA.to_string(),
            mode: SearchMode::Macro,
            opset: OpSetName::Toy,
            i_max: default_i_max(),
            lambda: default_lambda(),
            merge_variant: default_merge(),
            isolated: true,
            skeleton: SkeletonConfig {
                n: 1,
                f: 12,
                stages: 1,
            },
            seed_epochs: default_seed_epochs(),
            weak_epochs: default_phase_epochs(),
            train_epochs: default_phase_epochs(),
            lr0: default_lr0(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            growth_iterations: default_growth_iterations(),
            workers: 1,
            seed: 0,
            dataset: DatasetSpec {
                kind: DatasetKind::SyntheticSpirals,
                size: default_size(),
                noise: default_noise(),
                classes: default_classes(),
                seed: 0,
                features: 2,
                path: None,
            },
            val_fraction: default_val_fraction(),
            cost_budget: default_cost_budget(),
            amortization_factor: default_amortization(),
            wall_clock_limit_s: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::toy_default();
        let s = cfg.to_json_string().unwrap();
        let cfg2 = RunConfig::from_json_str(&s).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(s, cfg2.to_json_string().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::toy_default().to_json_string().unwrap()).unwrap();
        v["mystery_knob"] = serde_json::json!(1);
        assert!(RunConfig::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn defaults_match_contract() {
        let cfg = RunConfig::toy_default();
        assert_eq!(cfg.i_max, 3);
        assert_eq!(cfg.lambda, 0.001);
        assert_eq!(cfg.merge_variant, MergeVariant::CpEach);
        assert!(cfg.isolated);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::toy_default();
        cfg.i_max = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy_default();
        cfg.val_fraction = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy_default();
        cfg.dataset.classes = 1;
        assert!(cfg.validate().is_err());
    }
}
