//! Black-box transferability harness: train a surrogate under one of three
//! knowledge constraints, craft slowdown perturbations on it, and measure
//! the damage on the victim.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mxlab_core::attacks::{
    apply_perturbation, deepsloth_linf, AttackConfig, PerturbationBudget, TargetDistribution,
};
use mxlab_core::dataset::{Dataset, SampleSet, Split};
use mxlab_core::error::{Error, Result};
use mxlab_core::metrics::{evaluate, EvalReport};
use mxlab_core::multiexit::MultiExitNetwork;
use mxlab_core::tensor::Tensor;
use mxlab_core::training::{train, TrainConfig};

use crate::config::{TransferConfig, TransferScenario};
use crate::pipeline::{build_dataset, calibrate_policies, train_model};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub scenario: String,
    pub clean: Efficacy,
    pub transferred: Efficacy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Efficacy {
    pub efficacy: f64,
    pub accuracy: f64,
}

impl From<&EvalReport> for Efficacy {
    fn from(r: &EvalReport) -> Self {
        Efficacy {
            efficacy: r.efficacy,
            accuracy: r.accuracy,
        }
    }
}

fn scenario_name(s: &TransferScenario) -> String {
    match s {
        TransferScenario::CrossArchitecture => "cross_architecture".into(),
        TransferScenario::LimitedData(f) => format!("limited_data_{f}"),
        TransferScenario::CrossDomain => "cross_domain".into(),
    }
}

/// Trains the surrogate model the scenario allows.
fn train_surrogate(
    cfg: &TransferConfig,
    victim_data: &Dataset,
) -> Result<MultiExitNetwork> {
    let train_cfg = TrainConfig {
        epochs: cfg.victim.train.epochs,
        learning_rate: cfg.victim.train.learning_rate,
        exit_loss_weights: cfg.victim.train.exit_loss_weights.clone(),
        batch_size: cfg.victim.train.batch_size,
        seed: cfg.surrogate_seed,
    };
    match cfg.scenario {
        TransferScenario::CrossArchitecture => {
            let preset = cfg
                .surrogate_preset
                .ok_or_else(|| Error::InvalidConfig("surrogate_preset required".into()))?;
            let mut net = preset.build(
                victim_data.sample_shape(),
                victim_data.num_classes(),
                cfg.surrogate_seed,
            )?;
            train(&mut net, &victim_data.split(Split::Train), &train_cfg)?;
            Ok(net)
        }
        TransferScenario::LimitedData(fraction) => {
            let full = victim_data.split(Split::Train);
            let keep = ((full.len() as f64) * fraction).ceil().max(1.0) as usize;
            let mut idx: Vec<usize> = (0..full.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.surrogate_seed);
            idx.shuffle(&mut rng);
            idx.truncate(keep.min(full.len()));
            idx.sort_unstable();
            let samples: Vec<Tensor> = idx.iter().map(|&i| full.samples()[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| full.labels()[i]).collect();
            let subset = SampleSet::new(&samples, &labels)?;
            let mut net = cfg.victim.model.preset.build(
                victim_data.sample_shape(),
                victim_data.num_classes(),
                cfg.surrogate_seed,
            )?;
            train(&mut net, &subset, &train_cfg)?;
            Ok(net)
        }
        TransferScenario::CrossDomain => {
            // A disjoint synthetic domain: same geometry and label space,
            // different template family.
            let mut domain_cfg = cfg.victim.clone();
            let gen = domain_cfg.dataset.generate.as_mut().ok_or_else(|| {
                Error::InvalidConfig("cross_domain requires a generated victim dataset".into())
            })?;
            gen.template_family += 7;
            gen.seed ^= 0x5f5f_5f5f;
            let surrogate_data = build_dataset(&domain_cfg)?;
            let mut net = cfg.victim.model.preset.build(
                surrogate_data.sample_shape(),
                surrogate_data.num_classes(),
                cfg.surrogate_seed,
            )?;
            train(&mut net, &surrogate_data.split(Split::Train), &train_cfg)?;
            Ok(net)
        }
    }
}

/// Runs one transfer scenario: white-box slowdown crafting on the surrogate,
/// evaluation on the victim under its first configured RAD policy.
pub fn run_transfer(cfg: &TransferConfig, out_dir: &Path) -> Result<TransferReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;

    let victim_data = build_dataset(&cfg.victim)?;
    let (victim, _) = train_model(&cfg.victim, &victim_data)?;
    let policies = calibrate_policies(&cfg.victim, &victim, &victim_data)?;
    let (_, calibration) = policies
        .first()
        .ok_or_else(|| Error::InvalidConfig("no RAD budget configured".into()))?;

    let surrogate = train_surrogate(cfg, &victim_data)?;
    if surrogate.input_shape() != victim.input_shape() {
        return Err(Error::ShapeMismatch {
            context: "surrogate vs victim input",
            expected: victim.input_shape().to_vec(),
            found: surrogate.input_shape().to_vec(),
        });
    }

    // Craft per-sample slowdown perturbations on the surrogate, against the
    // victim's test-time inputs.
    let test = victim_data.split(Split::Test);
    let budget = PerturbationBudget::linf(cfg.epsilon);
    let mut attack_cfg = AttackConfig::deepsloth_linf_standard(cfg.epsilon);
    if let Some(iters) = cfg.iterations {
        attack_cfg.iterations = iters;
    }
    let uniform = TargetDistribution::uniform(victim_data.num_classes());
    let perturbed: Vec<Tensor> = test
        .samples()
        .par_iter()
        .map(|x| {
            let targets = std::slice::from_ref(&uniform);
            let v = deepsloth_linf(
                &surrogate,
                std::slice::from_ref(x),
                targets,
                &budget,
                &attack_cfg,
            )?;
            apply_perturbation(x, &v)
        })
        .collect::<Result<_>>()?;

    let clean_report = evaluate(&victim, &calibration.policy, &test)?;
    let transferred_set = SampleSet::new(&perturbed, test.labels())?;
    let transferred_report = evaluate(&victim, &calibration.policy, &transferred_set)?;

    let report = TransferReport {
        scenario: scenario_name(&cfg.scenario),
        clean: Efficacy::from(&clean_report),
        transferred: Efficacy::from(&transferred_report),
    };

    let csv = format!(
        "scenario,clean_efficacy,clean_accuracy,transferred_efficacy,transferred_accuracy\n{},{},{},{},{}\n",
        report.scenario,
        report.clean.efficacy,
        report.clean.accuracy,
        report.transferred.efficacy,
        report.transferred.accuracy,
    );
    fs::write(
        out_dir.join(format!("transfer_{}.csv", report.scenario)),
        csv,
    )?;
    fs::write(
        out_dir.join(format!("transfer_{}.json", report.scenario)),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
