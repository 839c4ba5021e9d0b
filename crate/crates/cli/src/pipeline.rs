//! The experiment pipeline: data, training, calibration, attacks,
//! evaluation, partition simulation, and report files.
//!
//! Everything a run writes is deterministic for a fixed config and seed,
//! with one exception: `timing.csv` records wall-clock crafting time and is
//! machine-dependent by nature.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mxlab_core::attacks::{
    apply_perturbation, deepsloth_l1, deepsloth_l2, deepsloth_linf, make_targets, pgd, pgd_avg,
    pgd_max, uap, AttackConfig, AttackScope, NormKind, PerturbationBudget, TargetMode,
};
use mxlab_core::dataset::{gen_synthetic, load_dataset, save_dataset, Dataset, SampleSet, Split, Splits, SyntheticSpec};
use mxlab_core::error::{Error, Result};
use mxlab_core::metrics::{
    build_eec, evaluate_records, report_from_records, write_report_csv, EvalReport,
    DEFAULT_GRID_SIZE,
};
use mxlab_core::multiexit::{save_model, MultiExitNetwork};
use mxlab_core::partition::{amplification, simulate, traffic_csv_header, PartitionScenario, TrafficReport};
use mxlab_core::policy::{calibrate, default_grid, CalibrationResult, ExitPolicy};
use mxlab_core::tensor::Tensor;
use mxlab_core::training::{adversarial_train, train, AdvTrainConfig, TrainConfig};

use crate::config::{AttackBlock, AttackKind, ExperimentConfig};

/// In-memory results of a full run, mirroring what lands in the out dir.
#[derive(Debug)]
pub struct RunSummary {
    /// `(tag, report)` rows exactly as written to `summary.csv`.
    pub rows: Vec<(String, EvalReport)>,
    pub policies: BTreeMap<String, CalibrationResult>,
    pub train_history: Vec<f64>,
    pub partition_rows: Vec<(String, TrafficReport)>,
}

impl RunSummary {
    pub fn report(&self, tag: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|(t, _)| t == tag).map(|(_, r)| r)
    }
}

/// Builds or loads the dataset named by the config.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match (&cfg.dataset.generate, &cfg.dataset.path) {
        (Some(gen), None) => gen_synthetic(&SyntheticSpec {
            num_classes: gen.classes,
            num_samples: gen.samples,
            shape: gen.shape.clone(),
            difficulty: gen.difficulty,
            train_fraction: cfg.dataset.train_fraction,
            holdout_fraction: cfg.dataset.holdout_fraction,
            seed: gen.seed,
            template_family: gen.template_family,
        }),
        (None, Some(path)) => load_dataset(
            path,
            cfg.dataset.train_fraction,
            cfg.dataset.holdout_fraction,
        ),
        _ => Err(Error::InvalidConfig(
            "dataset needs exactly one of generate/path".into(),
        )),
    }
}

/// Trains the configured model (standard or adversarial regime).
pub fn train_model(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
) -> Result<(MultiExitNetwork, Vec<f64>)> {
    let mut net = cfg.model.preset.build(
        dataset.sample_shape(),
        dataset.num_classes(),
        cfg.model.init_seed,
    )?;
    let train_set = dataset.split(Split::Train);
    let history = match &cfg.adv_train {
        None => train(
            &mut net,
            &train_set,
            &TrainConfig {
                epochs: cfg.train.epochs,
                learning_rate: cfg.train.learning_rate,
                exit_loss_weights: cfg.train.exit_loss_weights.clone(),
                batch_size: cfg.train.batch_size,
                seed: cfg.train.seed,
            },
        )?,
        Some(adv) => {
            let mut adv_cfg =
                AdvTrainConfig::new(adv.regime, PerturbationBudget::linf(adv.epsilon));
            adv_cfg.attack_iterations = adv.attack_iterations;
            adv_cfg.phase1_epochs = adv.phase1_epochs;
            adv_cfg.phase2_epochs = adv.phase2_epochs;
            adv_cfg.learning_rate = adv.learning_rate;
            adv_cfg.batch_size = adv.batch_size;
            adv_cfg.freeze_trunk = adv.freeze_trunk;
            adv_cfg.seed = adv.seed;
            adversarial_train(&mut net, &train_set, &adv_cfg)?
        }
    };
    Ok((net, history))
}

/// "rad5" for 0.05, "rad15" for 0.15, "rad7p5" for 0.075.
pub fn rad_tag(rad_budget: f64) -> String {
    let pct = rad_budget * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("rad{}", pct.round() as i64)
    } else {
        format!("rad{}", format!("{pct}").replace('.', "p"))
    }
}

/// One calibrated policy per configured RAD budget, keyed by [`rad_tag`].
pub fn calibrate_policies(
    cfg: &ExperimentConfig,
    net: &MultiExitNetwork,
    dataset: &Dataset,
) -> Result<Vec<(String, CalibrationResult)>> {
    let holdout = dataset.split(Split::Holdout);
    let grid = default_grid(cfg.policy.criterion, dataset.num_classes());
    cfg.policy
        .rad_budgets
        .iter()
        .map(|&rad| {
            let result = calibrate(net, &holdout, cfg.policy.criterion, rad, &grid)?;
            Ok((rad_tag(rad), result))
        })
        .collect()
}

/// Seeded draw of up to `cap` scope samples for a universal attack. The
/// block name salts the stream so different blocks draw different batches.
fn universal_scope(
    dataset: &Dataset,
    class: Option<usize>,
    cap: usize,
    seed: u64,
    name: &str,
) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let (mut samples, mut labels) = match class {
        Some(c) => {
            if c >= dataset.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    num_classes: dataset.num_classes(),
                });
            }
            dataset.class_members(Split::Train, c)
        }
        None => {
            let set = dataset.split(Split::Train);
            (set.samples().to_vec(), set.labels().to_vec())
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyScope);
    }
    if samples.len() > cap {
        let salt = name
            .bytes()
            .fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        idx.sort_unstable();
        samples = idx.iter().map(|&i| samples[i].clone()).collect();
        labels = idx.iter().map(|&i| labels[i]).collect();
    }
    Ok((samples, labels))
}

fn attack_config_for(block: &AttackBlock, scope: AttackScope) -> AttackConfig {
    let mut cfg = match (block.kind, block.norm) {
        (AttackKind::Deepsloth, NormKind::Linf) => match scope {
            AttackScope::PerSample => match block.target_mode {
                TargetMode::Uniform => AttackConfig::deepsloth_linf_standard(block.epsilon),
                mode => AttackConfig::deepsloth_linf_accuracy_variant(block.epsilon, mode),
            },
            other => AttackConfig::deepsloth_linf_universal(block.epsilon, other),
        },
        (AttackKind::Deepsloth, NormKind::L2) => AttackConfig {
            scope,
            target_mode: block.target_mode,
            ..AttackConfig::deepsloth_l2_standard()
        },
        (AttackKind::Deepsloth, NormKind::L1) => match scope {
            AttackScope::PerSample => AttackConfig {
                target_mode: block.target_mode,
                ..AttackConfig::deepsloth_l1_standard()
            },
            other => AttackConfig::deepsloth_l1_universal(other),
        },
        (_, _) => AttackConfig {
            scope,
            ..AttackConfig::pgd(block.epsilon, block.iterations.unwrap_or(20))
        },
    };
    if let Some(iters) = block.iterations {
        cfg.iterations = iters;
        if block.kind != AttackKind::Deepsloth && block.step_size.is_none() {
            cfg.step_size = 2.5 * block.epsilon / iters.max(1) as f64;
        }
    }
    if let Some(step) = block.step_size {
        cfg.step_size = step;
    }
    cfg
}

/// Crafts one attack block against the test split and returns the perturbed
/// test samples plus crafting wall-clock seconds.
pub fn craft_block(
    block: &AttackBlock,
    net: &MultiExitNetwork,
    dataset: &Dataset,
    policy: Option<&ExitPolicy>,
    universal_cap: usize,
    seed: u64,
) -> Result<(Vec<Tensor>, f64)> {
    let test = dataset.split(Split::Test);
    let budget = PerturbationBudget {
        norm: block.norm,
        epsilon: block.epsilon,
    };
    let started = Instant::now();

    let perturbed: Vec<Tensor> = match block.scope {
        AttackScope::PerSample => {
            let cfg = attack_config_for(block, AttackScope::PerSample);
            test.samples()
                .par_iter()
                .zip(test.labels().par_iter())
                .map(|(x, &y)| {
                    let v = match block.kind {
                        AttackKind::Pgd => pgd(net, x, y, &budget, &cfg)?,
                        AttackKind::PgdAvg => pgd_avg(net, x, y, &budget, &cfg)?,
                        AttackKind::PgdMax => pgd_max(net, x, y, &budget, &cfg)?,
                        AttackKind::UapPgd => unreachable!("validated as universal"),
                        AttackKind::Deepsloth => {
                            let scope = std::slice::from_ref(x);
                            let targets = make_targets(net, scope, &[y], cfg.target_mode)?;
                            match block.norm {
                                NormKind::Linf => {
                                    deepsloth_linf(net, scope, &targets, &budget, &cfg)?
                                }
                                NormKind::L1 => deepsloth_l1(net, scope, &targets, &budget, &cfg)?,
                                NormKind::L2 => {
                                    deepsloth_l2(net, scope, &targets, &budget, &cfg, policy)?
                                }
                            }
                        }
                    };
                    apply_perturbation(x, &v)
                })
                .collect::<Result<_>>()?
        }
        AttackScope::Universal | AttackScope::ClassUniversal(_) => {
            let class = match block.scope {
                AttackScope::ClassUniversal(c) => Some(c),
                _ => None,
            };
            let (scope_samples, scope_labels) =
                universal_scope(dataset, class, universal_cap, seed, &block.name)?;
            let cfg = attack_config_for(block, block.scope);
            let v = match block.kind {
                AttackKind::UapPgd => uap(net, &scope_samples, &scope_labels, &budget, &cfg)?,
                AttackKind::Deepsloth => {
                    let targets =
                        make_targets(net, &scope_samples, &scope_labels, cfg.target_mode)?;
                    match block.norm {
                        NormKind::Linf => {
                            deepsloth_linf(net, &scope_samples, &targets, &budget, &cfg)?
                        }
                        NormKind::L1 => deepsloth_l1(net, &scope_samples, &targets, &budget, &cfg)?,
                        NormKind::L2 => {
                            deepsloth_l2(net, &scope_samples, &targets, &budget, &cfg, policy)?
                        }
                    }
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "attack {} ({}) does not support universal scope",
                        block.name,
                        other.name()
                    )))
                }
            };
            test.samples()
                .iter()
                .map(|x| apply_perturbation(x, &v))
                .collect::<Result<_>>()?
        }
    };
    Ok((perturbed, started.elapsed().as_secs_f64()))
}

/// Evaluation subset for a block: class-universal attacks are scored on
/// their target class, everything else on the full test split.
fn eval_indices(block: Option<&AttackBlock>, test: &SampleSet) -> Vec<usize> {
    match block.map(|b| b.scope) {
        Some(AttackScope::ClassUniversal(c)) => test
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == c)
            .map(|(i, _)| i)
            .collect(),
        _ => (0..test.len()).collect(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Runs the full pipeline and writes all report files under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::create_dir_all(out_dir.join("attacks"))?;
    fs::create_dir_all(out_dir.join("eec"))?;
    write_atomic(
        &out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?.as_bytes(),
    )?;

    // Stage: dataset.
    let dataset = build_dataset(cfg).map_err(|e| stage(e, "dataset"))?;
    save_dataset(&dataset, &out_dir.join("dataset.mxds")).map_err(|e| stage(e, "dataset"))?;

    // Stage: training.
    let (net, history) = train_model(cfg, &dataset).map_err(|e| stage(e, "train"))?;
    save_model(&net, &out_dir.join("model.mxnn")).map_err(|e| stage(e, "train"))?;
    {
        let mut csv = String::from("epoch,loss\n");
        for (i, loss) in history.iter().enumerate() {
            csv.push_str(&format!("{i},{loss}\n"));
        }
        write_atomic(&out_dir.join("train_loss.csv"), csv.as_bytes())?;
    }

    // Stage: calibration.
    let policies = calibrate_policies(cfg, &net, &dataset).map_err(|e| stage(e, "calibrate"))?;
    for (tag, result) in &policies {
        write_atomic(
            &out_dir.join(format!("policy_{tag}.json")),
            serde_json::to_string_pretty(result)?.as_bytes(),
        )?;
    }

    let test = dataset.split(Split::Test);
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    let mut partition_rows: Vec<(String, TrafficReport)> = Vec::new();
    let mut timing: Vec<(String, f64)> = Vec::new();

    let scenario = cfg.partition.as_ref().map(|p| PartitionScenario {
        split_exit: p.split_exit,
        edge_latency_ms: p.edge_latency_ms,
        remote_latency_ms: p.remote_latency_ms,
        adversary_craft_ms: p.adversary_craft_ms,
    });

    // Baseline rows per policy.
    let mut clean_traffic: BTreeMap<String, TrafficReport> = BTreeMap::new();
    for (tag, result) in &policies {
        let records =
            evaluate_records(&net, &result.policy, &test).map_err(|e| stage(e, "eval"))?;
        let report = report_from_records(&records, test.labels(), net.num_exits(), DEFAULT_GRID_SIZE)
            .map_err(|e| stage(e, "eval"))?;
        let curve = build_eec(&records, DEFAULT_GRID_SIZE).map_err(|e| stage(e, "eval"))?;
        write_curve(out_dir, tag, "baseline", &curve)?;
        rows.push((format!("{tag}/baseline"), report));

        if let Some(sc) = &scenario {
            let traffic = simulate(&net, &result.policy, &test, sc).map_err(|e| stage(e, "partition"))?;
            partition_rows.push((format!("{tag}/baseline"), traffic.clone()));
            clean_traffic.insert(tag.clone(), traffic);
        }
    }

    // Attack rows. Crafting happens once per block, except for l2 slowdown
    // attacks whose success test needs each policy.
    for block in &cfg.attacks {
        let needs_policy = block.kind == AttackKind::Deepsloth && block.norm == NormKind::L2;
        let craft_plan: Vec<(Option<usize>, String)> = if needs_policy {
            (0..policies.len())
                .map(|i| (Some(i), format!("{}/{}", policies[i].0, block.name)))
                .collect()
        } else {
            vec![(None, block.name.clone())]
        };

        for (policy_idx, craft_tag) in craft_plan {
            let policy_ref = policy_idx.map(|i| &policies[i].1.policy);
            let (perturbed, seconds) = craft_block(
                block,
                &net,
                &dataset,
                policy_ref,
                cfg.universal_sample_cap,
                cfg.seed,
            )
            .map_err(|e| stage(e, "attack"))?;
            timing.push((craft_tag.clone(), seconds));

            // Replayable artifact: the perturbed test split as a dataset.
            let perturbed_ds = Dataset::new(
                dataset.sample_shape().to_vec(),
                dataset.num_classes(),
                perturbed.clone(),
                test.labels().to_vec(),
                Splits::contiguous(perturbed.len(), 0.0, 0.0)?,
            )?;
            save_dataset(
                &perturbed_ds,
                &out_dir.join(format!("attacks/{}.mxds", craft_tag.replace('/', "_"))),
            )?;

            let eval_policies: Vec<usize> = match policy_idx {
                Some(i) => vec![i],
                None => (0..policies.len()).collect(),
            };
            for i in eval_policies {
                let (tag, result) = &policies[i];
                let idx = eval_indices(Some(block), &test);
                let samples: Vec<Tensor> = idx.iter().map(|&j| perturbed[j].clone()).collect();
                let labels: Vec<usize> = idx.iter().map(|&j| test.labels()[j]).collect();
                let subset = SampleSet::new(&samples, &labels)?;
                let records = evaluate_records(&net, &result.policy, &subset)
                    .map_err(|e| stage(e, "eval"))?;
                let mut report =
                    report_from_records(&records, &labels, net.num_exits(), DEFAULT_GRID_SIZE)
                        .map_err(|e| stage(e, "eval"))?;
                report.crafting_seconds = Some(seconds);
                let curve = build_eec(&records, DEFAULT_GRID_SIZE).map_err(|e| stage(e, "eval"))?;
                write_curve(out_dir, tag, &block.name, &curve)?;
                rows.push((format!("{tag}/{}", block.name), report));

                if let Some(sc) = &scenario {
                    let full = SampleSet::new(&perturbed, test.labels())?;
                    let mut traffic =
                        simulate(&net, &result.policy, &full, sc).map_err(|e| stage(e, "partition"))?;
                    if let Some(clean) = clean_traffic.get(tag) {
                        traffic.amplification = Some(amplification(clean, &traffic, sc)?);
                    }
                    partition_rows.push((format!("{tag}/{}", block.name), traffic));
                }
            }
        }
    }

    // Report files.
    let mut summary = Vec::new();
    write_report_csv(&rows, &mut summary)?;
    write_atomic(&out_dir.join("summary.csv"), &summary)?;

    if !partition_rows.is_empty() {
        let mut buf = Vec::new();
        traffic_csv_header(&mut buf)?;
        for (tag, traffic) in &partition_rows {
            traffic.write_csv_row(tag, &mut buf)?;
        }
        write_atomic(&out_dir.join("partition.csv"), &buf)?;
    }

    // Wall-clock crafting times; the one machine-dependent artifact.
    {
        let mut buf = String::from("tag,seconds\n");
        for (tag, seconds) in &timing {
            buf.push_str(&format!("{tag},{seconds}\n"));
        }
        write_atomic(&out_dir.join("timing.csv"), buf.as_bytes())?;
    }

    Ok(RunSummary {
        rows,
        policies: policies.into_iter().collect(),
        train_history: history,
        partition_rows,
    })
}

fn write_curve(out_dir: &Path, rad: &str, name: &str, curve: &mxlab_core::metrics::EecCurve) -> Result<()> {
    let mut buf = Vec::new();
    curve.write_csv(&mut buf)?;
    write_atomic(&out_dir.join(format!("eec/{rad}_{name}.csv")), &buf)
}

fn stage(err: Error, stage: &str) -> Error {
    Error::InvalidConfig(format!("stage {stage} failed: {err}"))
}

/// Paths of every deterministic report file a run produces (everything but
/// `timing.csv`).
pub fn deterministic_outputs(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![out_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "timing.csv") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}
