use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use occlab::config::ExperimentConfig;
use occlab::{dataset, detectcmd, suite, with_jobs, CliError};
use occlab_core::workload::ScenarioKind;

/// Simulated cache-occupancy website-fingerprinting laboratory.
#[derive(Parser)]
#[command(name = "occlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Preset name (desk-small, desk-tor, paper-6mb) or config file path.
    #[arg(long, default_value = "desk-small")]
    config: String,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Outputs are identical at any setting.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::resolve(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory of memorygrams and network traces.
    GenDataset {
        #[command(flatten)]
        common: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Scenario to generate (defaults to the config's scenario).
        #[arg(long)]
        scenario: Option<String>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate classifiers over generated scenario datasets.
    RunSuite {
        #[command(flatten)]
        common: ConfigArgs,
        /// Root directory holding one dataset directory per scenario.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.csv and heatmaps.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated scenario list (default: all six).
        #[arg(long)]
        scenarios: Option<String>,
        /// Evaluation rounds (folds) for within-scenario rows.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train the CNN on one dataset and save the model.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Feature source: cache or network.
        #[arg(long, default_value = "cache")]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model over a dataset.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cache")]
        source: String,
    },
    /// Build the detector calibration corpus and threshold tree.
    DetectCalibrate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Simulated hosts per cache configuration.
        #[arg(long, default_value_t = 300)]
        samples: usize,
    },
    /// Detect the cache configuration of freshly simulated hosts.
    DetectRun {
        #[command(flatten)]
        common: ConfigArgs,
        /// Thresholds file from detect-calibrate.
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long, default_value_t = 15)]
        hosts: usize,
    },
    /// Pretty-print a metrics CSV produced by run-suite.
    Report {
        /// Path to metrics.csv.
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn parse_scenarios(arg: Option<&str>) -> Result<Vec<ScenarioKind>, CliError> {
    match arg {
        None => Ok(ScenarioKind::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|s| {
                ScenarioKind::parse(s.trim())
                    .ok_or_else(|| CliError::Config(format!("unknown scenario {s:?}")))
            })
            .collect(),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenDataset { common, out, scenario, force } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = scenario {
                cfg.scenario = ScenarioKind::parse(&s)
                    .ok_or_else(|| CliError::Config(format!("unknown scenario {s:?}")))?;
            }
            let summary = with_jobs(common.jobs, || dataset::gen_dataset(&cfg, &out, force))?;
            println!(
                "wrote {} traces ({} scenario) to {}",
                summary.traces,
                cfg.scenario.name(),
                summary.dir.display()
            );
            Ok(())
        }
        Command::RunSuite { common, data, out, scenarios, folds } => {
            let mut cfg = common.resolve()?;
            if let Some(f) = folds {
                cfg.rounds = f;
            }
            let kinds = parse_scenarios(scenarios.as_deref())?;
            let output = with_jobs(common.jobs, || suite::run_suite(&cfg, &kinds, &data, &out))?;
            for row in &output.rows {
                println!("{}", row.to_csv_line());
            }
            println!("metrics written to {}", output.metrics_path.display());
            Ok(())
        }
        Command::Train { common, data, source, out } => {
            let cfg = common.resolve()?;
            let msg = with_jobs(common.jobs, || occlab::train_command(&cfg, &data, &source, &out))?;
            println!("{msg}");
            Ok(())
        }
        Command::Eval { common, model, data, source } => {
            let _ = common.resolve()?;
            let msg = with_jobs(common.jobs, || occlab::eval_command(&model, &data, &source))?;
            println!("{msg}");
            Ok(())
        }
        Command::DetectCalibrate { common, out, samples } => {
            let cfg = common.resolve()?;
            let result = with_jobs(common.jobs, || {
                detectcmd::detect_calibrate(&out, samples, cfg.master_seed)
            })?;
            println!(
                "calibrated on {} samples/config: 5-fold accuracy {:.4}, {} written to {}",
                samples,
                result.cv_accuracy,
                detectcmd::THRESHOLDS_NAME,
                out.display()
            );
            Ok(())
        }
        Command::DetectRun { common, thresholds, hosts } => {
            let cfg = common.resolve()?;
            let results = detectcmd::detect_run(&thresholds, hosts, cfg.master_seed)?;
            let mut correct = 0;
            for (i, r) in results.iter().enumerate() {
                let ok = r.truth == r.detected;
                correct += usize::from(ok);
                println!("host {i:02}: true {} detected {} {}", r.truth, r.detected, if ok { "ok" } else { "WRONG" });
            }
            println!("{correct}/{} correct", results.len());
            Ok(())
        }
        Command::Report { metrics } => {
            print!("{}", suite::report(&metrics)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
