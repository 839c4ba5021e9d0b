//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 for runtime
//! failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mxlab_cli::config::{self, default_benchmark, ExperimentConfig, TransferConfig};
use mxlab_cli::pipeline::{self, rad_tag};
use mxlab_cli::report::render_run_dir;
use mxlab_cli::transfer::run_transfer;
use mxlab_core::dataset::{load_dataset, save_dataset, Dataset};
use mxlab_core::metrics::{build_eec, evaluate_records, report_from_records, write_report_csv, DEFAULT_GRID_SIZE};
use mxlab_core::multiexit::{load_model, save_model, MultiExitNetwork};
use mxlab_core::partition::{simulate, traffic_csv_header, PartitionScenario};
use mxlab_core::policy::CalibrationResult;

#[derive(Parser)]
#[command(
    name = "mxlab",
    about = "Desk-scale laboratory for slowdown attacks on multi-exit networks",
    version
)]
struct Cli {
    /// Experiment config JSON; the built-in benchmark when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write dataset.mxds.
    GenData,
    /// Train the configured model; writes model.mxnn and train_loss.csv.
    Train {
        /// Load the dataset from an MXDS file instead of the config source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adversarially train the configured model (needs an adv_train section).
    Advtrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Calibrate exit policies for a saved model; writes policy_<rad>.json.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Craft every configured attack block against a saved model.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Policy file for attacks whose success test needs one (l2).
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Evaluate a saved model + policy on a dataset (clean or perturbed).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Row tag, e.g. rad5/replayed-deepsloth.
        #[arg(long)]
        tag: String,
    },
    /// Simulate the edge-cloud partition for a saved model + policy.
    Partition {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Run a transferability scenario (config must be a transfer config).
    Transfer,
    /// Pretty-print the tables of a finished run directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Execute the full pipeline: train, calibrate, attack, evaluate,
    /// simulate, and emit all reports.
    Run,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_experiment_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => config::load_config::<ExperimentConfig>(path).map_err(config_err)?,
        None => default_benchmark(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn dataset_for(
    cfg: &ExperimentConfig,
    data: &Option<PathBuf>,
) -> Result<Dataset, CliError> {
    match data {
        Some(path) => load_dataset(
            path,
            cfg.dataset.train_fraction,
            cfg.dataset.holdout_fraction,
        )
        .map_err(runtime_err),
        None => pipeline::build_dataset(cfg).map_err(runtime_err),
    }
}

fn load_policy(path: &Path, net: &MultiExitNetwork) -> Result<CalibrationResult, CliError> {
    let text = fs::read_to_string(path).map_err(runtime_err)?;
    let result: CalibrationResult = serde_json::from_str(&text).map_err(config_err)?;
    result
        .policy
        .validate(net.num_exits())
        .map_err(config_err)?;
    Ok(result)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData => {
            let cfg = load_experiment_config(cli)?;
            let dataset = pipeline::build_dataset(&cfg).map_err(runtime_err)?;
            fs::create_dir_all(&cli.out).map_err(runtime_err)?;
            let path = cli.out.join("dataset.mxds");
            save_dataset(&dataset, &path).map_err(runtime_err)?;
            println!("wrote {} ({} samples)", path.display(), dataset.len());
            Ok(())
        }
        Command::Train { data } | Command::Advtrain { data } => {
            let mut cfg = load_experiment_config(cli)?;
            if matches!(cli.command, Command::Advtrain { .. }) {
                if cfg.adv_train.is_none() {
                    return Err(CliError::Config(
                        "advtrain requires an adv_train config section".into(),
                    ));
                }
            } else {
                cfg.adv_train = None;
            }
            let dataset = dataset_for(&cfg, data)?;
            let (net, history) = pipeline::train_model(&cfg, &dataset).map_err(runtime_err)?;
            fs::create_dir_all(&cli.out).map_err(runtime_err)?;
            save_model(&net, &cli.out.join("model.mxnn")).map_err(runtime_err)?;
            let mut csv = String::from("epoch,loss\n");
            for (i, loss) in history.iter().enumerate() {
                csv.push_str(&format!("{i},{loss}\n"));
            }
            fs::write(cli.out.join("train_loss.csv"), csv).map_err(runtime_err)?;
            println!(
                "trained {} epochs, final loss {:.4}; wrote {}",
                history.len(),
                history.last().unwrap_or(&f64::NAN),
                cli.out.join("model.mxnn").display()
            );
            Ok(())
        }
        Command::Calibrate { model, data } => {
            let cfg = load_experiment_config(cli)?;
            let net = load_model(model).map_err(runtime_err)?;
            let dataset = dataset_for(&cfg, data)?;
            let policies =
                pipeline::calibrate_policies(&cfg, &net, &dataset).map_err(runtime_err)?;
            fs::create_dir_all(&cli.out).map_err(runtime_err)?;
            for (tag, result) in &policies {
                let path = cli.out.join(format!("policy_{tag}.json"));
                fs::write(
                    &path,
                    serde_json::to_string_pretty(result).map_err(runtime_err)?,
                )
                .map_err(runtime_err)?;
                println!(
                    "{tag}: efficacy {:.2}, accuracy {:.0}% (feasible: {}) -> {}",
                    result.holdout_efficacy,
                    result.holdout_accuracy * 100.0,
                    result.feasible,
                    path.display()
                );
            }
            Ok(())
        }
        Command::Attack {
            model,
            data,
            policy,
        } => {
            let cfg = load_experiment_config(cli)?;
            if cfg.attacks.is_empty() {
                return Err(CliError::Config("no attack blocks configured".into()));
            }
            let net = load_model(model).map_err(runtime_err)?;
            let dataset = dataset_for(&cfg, data)?;
            let loaded_policy = match policy {
                Some(p) => Some(load_policy(p, &net)?),
                None => None,
            };
            fs::create_dir_all(cli.out.join("attacks")).map_err(runtime_err)?;
            let mut timing = String::from("tag,seconds\n");
            for block in &cfg.attacks {
                let (perturbed, seconds) = pipeline::craft_block(
                    block,
                    &net,
                    &dataset,
                    loaded_policy.as_ref().map(|c| &c.policy),
                    cfg.universal_sample_cap,
                    cfg.seed,
                )
                .map_err(runtime_err)?;
                let test = dataset.split(mxlab_core::dataset::Split::Test);
                let out = Dataset::new(
                    dataset.sample_shape().to_vec(),
                    dataset.num_classes(),
                    perturbed,
                    test.labels().to_vec(),
                    mxlab_core::dataset::Splits::contiguous(test.len(), 0.0, 0.0)
                        .map_err(runtime_err)?,
                )
                .map_err(runtime_err)?;
                let path = cli.out.join(format!("attacks/{}.mxds", block.name));
                save_dataset(&out, &path).map_err(runtime_err)?;
                timing.push_str(&format!("{},{}\n", block.name, seconds));
                println!("crafted {} in {seconds:.2} s -> {}", block.name, path.display());
            }
            fs::write(cli.out.join("timing.csv"), timing).map_err(runtime_err)?;
            Ok(())
        }
        Command::Eval {
            model,
            data,
            policy,
            tag,
        } => {
            let cfg = load_experiment_config(cli)?;
            let net = load_model(model).map_err(runtime_err)?;
            let dataset = load_dataset(data, 0.0, 0.0).map_err(runtime_err)?;
            let calibration = load_policy(policy, &net)?;
            let set = dataset.split(mxlab_core::dataset::Split::Test);
            let records =
                evaluate_records(&net, &calibration.policy, &set).map_err(runtime_err)?;
            let report =
                report_from_records(&records, set.labels(), net.num_exits(), DEFAULT_GRID_SIZE)
                    .map_err(runtime_err)?;
            fs::create_dir_all(&cli.out).map_err(runtime_err)?;
            let mut buf = Vec::new();
            write_report_csv(&[(tag.clone(), report.clone())], &mut buf).map_err(runtime_err)?;
            let safe = tag.replace('/', "_");
            fs::write(cli.out.join(format!("eval_{safe}.csv")), &buf).map_err(runtime_err)?;
            let curve = build_eec(&records, DEFAULT_GRID_SIZE).map_err(runtime_err)?;
            let mut eec = Vec::new();
            curve.write_csv(&mut eec).map_err(runtime_err)?;
            fs::write(cli.out.join(format!("eec_{safe}.csv")), &eec).map_err(runtime_err)?;
            println!(
                "{tag}: efficacy {:.2}, accuracy {:.0}%, mean cost {:.2} over {} samples",
                report.efficacy,
                report.accuracy * 100.0,
                report.mean_cost_fraction,
                report.num_samples()
            );
            let _ = cfg;
            Ok(())
        }
        Command::Partition {
            model,
            data,
            policy,
        } => {
            let cfg = load_experiment_config(cli)?;
            let section = cfg
                .partition
                .as_ref()
                .ok_or_else(|| CliError::Config("config lacks a partition section".into()))?;
            let net = load_model(model).map_err(runtime_err)?;
            let dataset = load_dataset(data, 0.0, 0.0).map_err(runtime_err)?;
            let calibration = load_policy(policy, &net)?;
            let scenario = PartitionScenario {
                split_exit: section.split_exit,
                edge_latency_ms: section.edge_latency_ms,
                remote_latency_ms: section.remote_latency_ms,
                adversary_craft_ms: section.adversary_craft_ms,
            };
            let set = dataset.split(mxlab_core::dataset::Split::Test);
            let traffic =
                simulate(&net, &calibration.policy, &set, &scenario).map_err(runtime_err)?;
            fs::create_dir_all(&cli.out).map_err(runtime_err)?;
            let mut buf = Vec::new();
            traffic_csv_header(&mut buf).map_err(runtime_err)?;
            traffic
                .write_csv_row("standalone", &mut buf)
                .map_err(runtime_err)?;
            fs::write(cli.out.join("partition.csv"), &buf).map_err(runtime_err)?;
            println!(
                "transmission {:.2}, avg latency {:.2} ms",
                traffic.transmission_fraction, traffic.avg_latency_ms
            );
            Ok(())
        }
        Command::Transfer => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| CliError::Config("transfer requires --config".into()))?;
            let cfg: TransferConfig = config::load_config(path).map_err(config_err)?;
            cfg.validate().map_err(config_err)?;
            let report = run_transfer(&cfg, &cli.out).map_err(runtime_err)?;
            println!(
                "{}: efficacy {:.2} -> {:.2}, accuracy {:.0}% -> {:.0}%",
                report.scenario,
                report.clean.efficacy,
                report.transferred.efficacy,
                report.clean.accuracy * 100.0,
                report.transferred.accuracy * 100.0
            );
            Ok(())
        }
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| cli.out.clone());
            let text = render_run_dir(&dir).map_err(runtime_err)?;
            print!("{text}");
            Ok(())
        }
        Command::Run => {
            let cfg = load_experiment_config(cli)?;
            let summary = pipeline::run_experiment(&cfg, &cli.out).map_err(runtime_err)?;
            println!(
                "run complete: {} report rows, {} policies -> {}",
                summary.rows.len(),
                summary.policies.len(),
                cli.out.display()
            );
            for rad in cfg.policy.rad_budgets.iter() {
                let tag = rad_tag(*rad);
                if let Some(baseline) = summary.report(&format!("{tag}/baseline")) {
                    println!(
                        "  {tag} baseline: efficacy {:.2}, accuracy {:.0}%",
                        baseline.efficacy,
                        baseline.accuracy * 100.0
                    );
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
