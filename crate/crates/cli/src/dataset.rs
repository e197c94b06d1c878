//! Dataset generation and loading.
//!
//! A dataset directory holds one binary memorygram plus one network-trace
//! CSV per trace, and a manifest (the full config as key=value text plus
//! every derived seed). File contents depend only on seeds, so regeneration
//! is byte-identical at any parallelism level.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use occlab_core::engine::{run_trace, MaskerConfig, RunOutput};
use occlab_core::learn::{standardize, Dataset};
use occlab_core::probe::{Memorygram, ProbeMode};
use occlab_core::workload::{generate_script, instantiate, NetTrace, ScenarioKind, SiteScript};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.txt";

fn trace_stem(class: u32, trace: u32) -> String {
    format!("c{class:04}_t{trace:04}")
}

fn ns_stem(extra: u32) -> String {
    format!("ns{extra:05}")
}

/// All (class, trace, seed) triples of a config, sensitive classes first,
/// then the single-trace open-world extras (class ids past `classes`).
fn trace_jobs(cfg: &ExperimentConfig) -> Vec<(u32, u32, u64)> {
    let mut jobs = Vec::new();
    for class in 0..cfg.classes {
        for trace in 0..cfg.traces_per_class {
            jobs.push((class, trace, cfg.trace_seed(class, trace)));
        }
    }
    for extra in 0..cfg.open_world_extras {
        let class = cfg.classes + extra;
        jobs.push((class, 0, cfg.trace_seed(class, 0)));
    }
    jobs
}

fn script_for(cfg: &ExperimentConfig, class: u32) -> SiteScript {
    generate_script(class, cfg.script_seed(), &cfg.script)
}

/// Simulates one trace end to end.
pub fn simulate_trace(cfg: &ExperimentConfig, class: u32, trace_seed: u64) -> Result<RunOutput, CliError> {
    let script = script_for(cfg, class);
    let spec = cfg.scenario_spec();
    let (accesses, net) = instantiate(&script, &spec, trace_seed, &cfg.script)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let masker = (cfg.scenario == ScenarioKind::Masked)
        .then_some(MaskerConfig { period_ns: cfg.masker_period_us * 1_000 });
    run_trace(&cfg.probe_config()?, &accesses, net, masker, &cfg.cost_model(), &cfg.timer())
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub struct GenSummary {
    pub traces: u64,
    pub dir: PathBuf,
}

/// Generates the dataset directory. Refuses to touch a non-empty directory
/// unless `force` is set. Rerunning with the same config reproduces every
/// file byte for byte.
pub fn gen_dataset(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<GenSummary, CliError> {
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(CliError::io("clearing output directory"))?;
    }
    fs::create_dir_all(out).map_err(CliError::io("creating output directory"))?;

    let jobs = trace_jobs(cfg);
    jobs.par_iter().try_for_each(|&(class, trace, seed)| -> Result<(), CliError> {
        let output = simulate_trace(cfg, class, seed)?;
        let stem = if class < cfg.classes { trace_stem(class, trace) } else { ns_stem(class - cfg.classes) };
        let gram_path = out.join(format!("{stem}.mgram"));
        output.memorygram.write(&gram_path).map_err(|e| CliError::Runtime(e.to_string()))?;
        let net_path = out.join(format!("{stem}.net.csv"));
        output.net.write_csv(&net_path).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(())
    })?;

    let mut manifest = cfg.to_text();
    manifest.push_str(&format!("seed.probe-order = {}\n", cfg.probe_config()?.order_seed));
    manifest.push_str(&format!("seed.scripts = {}\n", cfg.script_seed()));
    manifest.push_str(&format!("seed.drift-epoch = {}\n", cfg.scenario_spec().drift_seed));
    for (class, trace, seed) in &jobs {
        manifest.push_str(&format!("seed.trace.{class:04}.{trace:04} = {seed}\n"));
    }
    fs::write(out.join(MANIFEST_NAME), manifest).map_err(CliError::io("writing manifest"))?;

    Ok(GenSummary { traces: jobs.len() as u64, dir: out.to_path_buf() })
}

/// The manifest doubles as a config file; config keys parse, seed listings
/// are informational.
pub fn read_manifest(dir: &Path) -> Result<ExperimentConfig, CliError> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(CliError::MissingInput(format!(
            "no dataset manifest at {} (run gen-dataset first)",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(CliError::io("reading manifest"))?;
    let stripped: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("seed."))
        .map(|l| format!("{l}\n"))
        .collect();
    ExperimentConfig::from_text(&stripped)
}

/// Both classifier inputs of one dataset.
pub struct LoadedDataset {
    pub cfg: ExperimentConfig,
    pub cache: Dataset,
    pub net: Dataset,
}

/// Loads a dataset directory into standardized cache-side and network-side
/// feature sets. Sentinel handling applies to latency memorygrams, where
/// missed slots carry the sentinel value.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset, CliError> {
    let cfg = read_manifest(dir)?;
    let probe = cfg.probe_config()?;
    let trace_len = probe.trace_len();
    let bin_ms = probe.sample_ns() as f64 / 1e6;

    let jobs = trace_jobs(&cfg);
    let rows: Vec<(Vec<f32>, Vec<f32>, u32)> = jobs
        .par_iter()
        .map(|&(class, trace, _)| -> Result<_, CliError> {
            let stem = if class < cfg.classes { trace_stem(class, trace) } else { ns_stem(class - cfg.classes) };
            let gram_path = dir.join(format!("{stem}.mgram"));
            if !gram_path.exists() {
                return Err(CliError::MissingInput(format!("missing trace file {}", gram_path.display())));
            }
            let gram = Memorygram::read(&gram_path).map_err(|e| CliError::Runtime(e.to_string()))?;
            let net = NetTrace::read_csv(&dir.join(format!("{stem}.net.csv")))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let label = class.min(cfg.classes); // extras collapse to one label
            Ok((gram.entries, net.binned(trace_len, bin_ms), label))
        })
        .collect::<Result<_, _>>()?;

    let mut cache_features: Vec<Vec<f32>> = Vec::with_capacity(rows.len());
    let mut net_features: Vec<Vec<f32>> = Vec::with_capacity(rows.len());
    let mut labels: Vec<u32> = Vec::with_capacity(rows.len());
    for (gram, net, label) in rows {
        cache_features.push(gram);
        net_features.push(net);
        labels.push(label);
    }
    standardize(&mut cache_features, cfg.probe_mode == ProbeMode::JsLatency);
    standardize(&mut net_features, false);

    let classes = cfg.label_count();
    let nonsensitive = (cfg.open_world_extras > 0).then_some(cfg.classes);
    let mut cache = Dataset::new(
        cache_features.into_iter().zip(labels.iter().copied()).collect(),
        classes,
    );
    cache.nonsensitive = nonsensitive;
    let mut net = Dataset::new(
        net_features.into_iter().zip(labels.iter().copied()).collect(),
        classes,
    );
    net.nonsensitive = nonsensitive;

    Ok(LoadedDataset { cfg, cache, net })
}
