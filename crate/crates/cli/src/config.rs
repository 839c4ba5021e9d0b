//! Experiment configuration: JSON-backed, schema-validated before any work
//! starts. Unknown keys are rejected to catch typos early.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mxlab_core::attacks::{AttackScope, NormKind, TargetMode};
use mxlab_core::error::{Error, Result};
use mxlab_core::policy::StopCriterion;
use mxlab_core::training::AdvRegime;

use crate::models::ModelPreset;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub classes: usize,
    pub samples: usize,
    /// `[channels, height, width]`.
    pub shape: Vec<usize>,
    pub difficulty: f64,
    pub seed: u64,
    #[serde(default)]
    pub template_family: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Generate a synthetic dataset in-process ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSpec>,
    /// ... or load an MXDS file. Exactly one of the two must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_holdout_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: ModelPreset,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_loss_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrainSection {
    pub regime: AdvRegime,
    pub epsilon: f64,
    #[serde(default = "default_attack_iterations")]
    pub attack_iterations: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub freeze_trunk: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_attack_iterations() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub criterion: StopCriterion,
    /// Relative-accuracy-drop budgets; one policy is calibrated per entry.
    pub rad_budgets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Deepsloth,
    Pgd,
    PgdAvg,
    PgdMax,
    UapPgd,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Deepsloth => "deepsloth",
            AttackKind::Pgd => "pgd",
            AttackKind::PgdAvg => "pgd-avg",
            AttackKind::PgdMax => "pgd-max",
            AttackKind::UapPgd => "uap-pgd",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackBlock {
    /// Report tag; must be unique across blocks.
    pub name: String,
    pub kind: AttackKind,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    pub epsilon: f64,
    #[serde(default = "default_scope")]
    pub scope: AttackScope,
    #[serde(default = "default_target_mode")]
    pub target_mode: TargetMode,
    /// Overrides the attack's conventional iteration count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Overrides the attack's conventional step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
}

fn default_norm() -> NormKind {
    NormKind::Linf
}

fn default_scope() -> AttackScope {
    AttackScope::PerSample
}

fn default_target_mode() -> TargetMode {
    TargetMode::Uniform
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub split_exit: usize,
    #[serde(default)]
    pub edge_latency_ms: f64,
    pub remote_latency_ms: f64,
    pub adversary_craft_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_train: Option<AdvTrainSection>,
    pub policy: PolicySection,
    #[serde(default)]
    pub attacks: Vec<AttackBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSection>,
    /// Universal attacks draw at most this many training samples (the full
    /// training split when it is smaller).
    #[serde(default = "default_universal_cap")]
    pub universal_sample_cap: usize,
}

fn default_universal_cap() -> usize {
    250
}

/// The built-in desk benchmark: 8 classes, 4000 samples of 1x16x16, the
/// four-exit convolutional model, both RAD settings, the full attack table,
/// and the partition scenario.
pub fn default_benchmark() -> ExperimentConfig {
    let eps = 0.12;
    ExperimentConfig {
        seed: 7,
        dataset: DatasetConfig {
            generate: Some(GenerateSpec {
                classes: 8,
                samples: 4000,
                shape: vec![1, 16, 16],
                difficulty: 0.5,
                seed: 11,
                template_family: 0,
            }),
            path: None,
            train_fraction: 0.8,
            holdout_fraction: 0.1,
        },
        model: ModelConfig {
            preset: ModelPreset::Conv4,
            init_seed: 13,
        },
        train: TrainSection {
            epochs: 20,
            learning_rate: 0.08,
            batch_size: 32,
            exit_loss_weights: None,
            seed: 3,
        },
        adv_train: None,
        policy: PolicySection {
            criterion: StopCriterion::Confidence,
            rad_budgets: vec![0.05, 0.15],
        },
        attacks: vec![
            AttackBlock {
                name: "deepsloth".into(),
                kind: AttackKind::Deepsloth,
                norm: NormKind::Linf,
                epsilon: eps,
                scope: AttackScope::PerSample,
                target_mode: TargetMode::Uniform,
                iterations: None,
                step_size: None,
            },
            AttackBlock {
                name: "deepsloth-universal".into(),
                kind: AttackKind::Deepsloth,
                norm: NormKind::Linf,
                epsilon: eps,
                scope: AttackScope::Universal,
                target_mode: TargetMode::Uniform,
                iterations: None,
                step_size: None,
            },
            AttackBlock {
                name: "deepsloth-class-universal".into(),
                kind: AttackKind::Deepsloth,
                norm: NormKind::Linf,
                epsilon: eps,
                scope: AttackScope::ClassUniversal(0),
                target_mode: TargetMode::Uniform,
                iterations: None,
                step_size: None,
            },
            AttackBlock {
                name: "pgd".into(),
                kind: AttackKind::Pgd,
                norm: NormKind::Linf,
                epsilon: eps,
                scope: AttackScope::PerSample,
                target_mode: TargetMode::Uniform,
                iterations: Some(20),
                step_size: None,
            },
            AttackBlock {
                name: "pgd-avg".into(),
                kind: AttackKind::PgdAvg,
                norm: NormKind::Linf,
                epsilon: eps,
                scope: AttackScope::PerSample,
                target_mode: TargetMode::Uniform,
                iterations: Some(20),
                step_size: None,
            },
            AttackBlock {
                name: "pgd-max".into(),
                kind: AttackKind::PgdMax,
                norm: NormKind::Linf,
                epsilon: eps,
                scope: AttackScope::PerSample,
                target_mode: TargetMode::Uniform,
                iterations: Some(20),
                step_size: None,
            },
            AttackBlock {
                name: "uap-pgd".into(),
                kind: AttackKind::UapPgd,
                norm: NormKind::Linf,
                epsilon: eps,
                scope: AttackScope::Universal,
                target_mode: TargetMode::Uniform,
                iterations: Some(100),
                step_size: None,
            },
        ],
        partition: Some(PartitionSection {
            split_exit: 1,
            edge_latency_ms: 0.0,
            remote_latency_ms: 11.0,
            adversary_craft_ms: 2.0,
        }),
        universal_sample_cap: 250,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.generate, &self.dataset.path) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "dataset.generate and dataset.path are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "dataset needs either generate or path".into(),
                ))
            }
            _ => {}
        }
        if let Some(gen) = &self.dataset.generate {
            if gen.classes < 2 || gen.samples < 2 {
                return Err(Error::InvalidConfig(
                    "generate needs at least 2 classes and 2 samples".into(),
                ));
            }
            if gen.shape.len() != 3 {
                return Err(Error::InvalidConfig(
                    "generate.shape must be [channels, height, width]".into(),
                ));
            }
        }
        let tf = self.dataset.train_fraction;
        let hf = self.dataset.holdout_fraction;
        if !(0.0..=1.0).contains(&tf) || !(0.0..=1.0).contains(&hf) || tf + hf >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "split fractions train {tf} + holdout {hf} must leave room for a test split"
            )));
        }
        if self.train.epochs == 0 || self.train.learning_rate <= 0.0 || self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("bad training section".into()));
        }
        if self.policy.rad_budgets.is_empty() {
            return Err(Error::InvalidConfig("need at least one RAD budget".into()));
        }
        for &rad in &self.policy.rad_budgets {
            if !(rad > 0.0 && rad <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "RAD budget {rad} outside (0, 1]"
                )));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for block in &self.attacks {
            if block.epsilon <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "attack {}: epsilon must be positive",
                    block.name
                )));
            }
            if block.name.is_empty()
                || block
                    .name
                    .chars()
                    .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
            {
                return Err(Error::InvalidConfig(format!(
                    "attack name {:?} must be non-empty [a-zA-Z0-9_-]",
                    block.name
                )));
            }
            if !names.insert(block.name.clone()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate attack name {}",
                    block.name
                )));
            }
            match block.kind {
                AttackKind::Pgd | AttackKind::PgdAvg | AttackKind::PgdMax | AttackKind::UapPgd => {
                    if block.norm != NormKind::Linf {
                        return Err(Error::InvalidConfig(format!(
                            "attack {}: {} only supports the linf norm",
                            block.name,
                            block.kind.name()
                        )));
                    }
                }
                AttackKind::Deepsloth => {}
            }
            if block.kind == AttackKind::UapPgd && block.scope == AttackScope::PerSample {
                return Err(Error::InvalidConfig(format!(
                    "attack {}: uap-pgd is a universal attack",
                    block.name
                )));
            }
            if let TargetMode::PreserveAccuracy(d) | TargetMode::HurtAccuracy(d) = block.target_mode
            {
                if !(0.0..1.0).contains(&d) {
                    return Err(Error::InvalidConfig(format!(
                        "attack {}: mix weight {d} outside [0, 1)",
                        block.name
                    )));
                }
            }
        }
        if let Some(p) = &self.partition {
            if p.remote_latency_ms < 0.0 || p.edge_latency_ms < 0.0 || p.adversary_craft_ms <= 0.0 {
                return Err(Error::InvalidConfig("bad partition section".into()));
            }
        }
        if let Some(adv) = &self.adv_train {
            if adv.epsilon <= 0.0 || adv.learning_rate <= 0.0 || adv.batch_size == 0 {
                return Err(Error::InvalidConfig("bad adv_train section".into()));
            }
        }
        if self.universal_sample_cap == 0 {
            return Err(Error::InvalidConfig(
                "universal_sample_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which part of a transfer study the surrogate differs in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferScenario {
    /// Same data, different architecture.
    CrossArchitecture,
    /// Same architecture, a random fraction of the victim's training set.
    LimitedData(f64),
    /// Same architecture, a disjoint synthetic domain.
    CrossDomain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub victim: ExperimentConfig,
    pub scenario: TransferScenario,
    /// Surrogate architecture for the cross-architecture scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_preset: Option<ModelPreset>,
    #[serde(default = "default_surrogate_seed")]
    pub surrogate_seed: u64,
    /// linf budget of the transferred slowdown attack.
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

fn default_surrogate_seed() -> u64 {
    1010
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        self.victim.validate()?;
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        match self.scenario {
            TransferScenario::LimitedData(f) => {
                if !(0.0 < f && f <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "limited_data fraction {f} outside (0, 1]"
                    )));
                }
            }
            TransferScenario::CrossArchitecture => {
                let surrogate = self.surrogate_preset.ok_or_else(|| {
                    Error::InvalidConfig(
                        "cross_architecture needs surrogate_preset".into(),
                    )
                })?;
                if surrogate == self.victim.model.preset {
                    return Err(Error::InvalidConfig(
                        "cross_architecture surrogate must differ from the victim preset".into(),
                    ));
                }
            }
            TransferScenario::CrossDomain => {}
        }
        Ok(())
    }
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_benchmark_validates() {
        let cfg = default_benchmark();
        cfg.validate().unwrap();
        // Round-trips through JSON.
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.attacks.len(), cfg.attacks.len());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(default_benchmark()).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("typo_key".into(), serde_json::json!(1));
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_value(value);
        assert!(parsed.is_err());
    }

    #[test]
    fn mutually_exclusive_dataset_sources() {
        let mut cfg = default_benchmark();
        cfg.dataset.path = Some("data.mxds".into());
        assert!(cfg.validate().is_err());
        cfg.dataset.generate = None;
        assert!(cfg.validate().is_ok());
        cfg.dataset.path = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn duplicate_attack_names_are_rejected() {
        let mut cfg = default_benchmark();
        let clone = cfg.attacks[0].clone();
        cfg.attacks.push(clone);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scope_and_target_serialization_forms() {
        let json = serde_json::json!({
            "name": "class-hit",
            "kind": "deepsloth",
            "epsilon": 0.05,
            "scope": {"class_universal": 3},
            "target_mode": {"preserve_accuracy": 0.2}
        });
        let block: AttackBlock = serde_json::from_value(json).unwrap();
        assert_eq!(block.scope, AttackScope::ClassUniversal(3));
        assert_eq!(block.target_mode, TargetMode::PreserveAccuracy(0.2));
    }

    #[test]
    fn transfer_config_validation() {
        let victim = default_benchmark();
        let mut cfg = TransferConfig {
            victim,
            scenario: TransferScenario::CrossArchitecture,
            surrogate_preset: None,
            surrogate_seed: 5,
            epsilon: 0.1,
            iterations: None,
        };
        assert!(cfg.validate().is_err(), "missing surrogate preset");
        cfg.surrogate_preset = Some(ModelPreset::Conv4);
        assert!(cfg.validate().is_err(), "same preset as victim");
        cfg.surrogate_preset = Some(ModelPreset::Mlp4);
        cfg.validate().unwrap();
        cfg.scenario = TransferScenario::LimitedData(0.0);
        assert!(cfg.validate().is_err());
    }
}
