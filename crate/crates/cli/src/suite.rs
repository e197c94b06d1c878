//! Scenario suite runner and metrics report.
//!
//! One metrics row per (scenario, classifier, trace source). Scenarios are
//! evaluated the way the robustness protocol demands:
//!
//!   - baseline, response-cache, render-only, network-only: train and test
//!     within the scenario's own dataset (`eval.rounds` folds);
//!   - drift and masked: the model trained on the baseline round-0 split is
//!     tested on the scenario's counterpart of the round-0 test fold
//!     (classifiers never see protected or drifted traces in training).
//!
//! Row order, training seeds and fold assignments are fixed, so the metrics
//! CSV is byte-identical across reruns and `--jobs` settings.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use occlab_core::learn::{
    evaluate_scorer, fold_split, stratified_folds, Classifier, CnnClassifier, FoldOutcome,
    KnnClassifier, Metrics,
};
use occlab_core::workload::ScenarioKind;

use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, LoadedDataset};
use crate::svg::write_heatmap;
use crate::CliError;

pub const METRICS_SCHEMA: &str = "scenario,classifier,accuracy_mean,accuracy_std,top5,auc";

/// Scenarios whose models are trained on the baseline dataset.
fn cross_trained(kind: ScenarioKind) -> bool {
    matches!(kind, ScenarioKind::Drift | ScenarioKind::Masked)
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub scenario: String,
    pub classifier: String,
    pub metrics: Metrics,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let auc = self.metrics.auc_mean.map_or(String::new(), |a| format!("{a:.4}"));
        format!(
            "{},{},{:.4},{:.4},{:.4},{}",
            self.scenario,
            self.classifier,
            self.metrics.accuracy_mean,
            self.metrics.accuracy_std,
            self.metrics.top5_mean,
            auc
        )
    }
}

fn classifier_for(cfg: &ExperimentConfig, which: &str, input_len: usize, classes: usize) -> Box<dyn Classifier> {
    match which {
        "cnn" => Box::new(CnnClassifier { spec: cfg.cnn_spec(input_len, classes) }),
        _ => Box::new(KnnClassifier { k: cfg.knn_k }),
    }
}

fn dataset_dir(data_root: &Path, kind: ScenarioKind) -> PathBuf {
    data_root.join(kind.name())
}

fn require_dataset(data_root: &Path, kind: ScenarioKind) -> Result<LoadedDataset, CliError> {
    let dir = dataset_dir(data_root, kind);
    if !dir.join(crate::dataset::MANIFEST_NAME).exists() {
        return Err(CliError::MissingInput(format!(
            "missing dataset for scenario {:?}: expected {}",
            kind.name(),
            dir.display()
        )));
    }
    load_dataset(&dir)
}

/// Evaluates one scenario/source/classifier cell.
fn evaluate_cell(
    cfg: &ExperimentConfig,
    kind: ScenarioKind,
    source: &str,
    which: &str,
    scenario_ds: &LoadedDataset,
    baseline_ds: &LoadedDataset,
) -> Result<Metrics, CliError> {
    let pick = |ds: &LoadedDataset| if source == "cache" { ds.cache.clone() } else { ds.net.clone() };
    let seed_tag = format!("{source}-{which}");

    if cross_trained(kind) {
        // Fold structure comes from the baseline dataset; the scenario's
        // traces are index-aligned counterparts generated from the same
        // seeds, so testing on the baseline round-0 test fold's indices
        // keeps those trace seeds unseen during training.
        let base = pick(baseline_ds);
        let scen = pick(scenario_ds);
        let folds = stratified_folds(&base, cfg.folds, cfg.master_seed);
        let split = fold_split(&folds, 0, cfg.master_seed);
        let classifier = classifier_for(cfg, which, base.feature_len(), base.classes);
        let scorer = classifier
            .fit(&base, &split.train, &split.val, cfg.train_seed(&seed_tag, 0))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let outcome = evaluate_scorer(scorer.as_ref(), &scen, &split.test);
        Ok(Metrics::from_outcomes(vec![outcome]))
    } else {
        let ds = pick(scenario_ds);
        let folds = stratified_folds(&ds, cfg.folds, cfg.master_seed);
        let rounds = cfg.rounds.clamp(1, cfg.folds);
        let outcomes: Result<Vec<FoldOutcome>, CliError> = (0..rounds)
            .map(|round| {
                let split = fold_split(&folds, round, cfg.master_seed);
                let classifier = classifier_for(cfg, which, ds.feature_len(), ds.classes);
                let scorer = classifier
                    .fit(&ds, &split.train, &split.val, cfg.train_seed(&seed_tag, round))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                Ok(evaluate_scorer(scorer.as_ref(), &ds, &split.test))
            })
            .collect();
        Ok(Metrics::from_outcomes(outcomes?))
    }
}

pub struct SuiteOutput {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
}

/// Runs the metrics grid over the requested scenarios and writes
/// `metrics.csv` plus example heatmaps.
pub fn run_suite(
    cfg: &ExperimentConfig,
    scenarios: &[ScenarioKind],
    data_root: &Path,
    out_dir: &Path,
) -> Result<SuiteOutput, CliError> {
    fs::create_dir_all(out_dir).map_err(CliError::io("creating suite output directory"))?;

    let baseline = require_dataset(data_root, ScenarioKind::Baseline)?;
    let mut cells: Vec<(ScenarioKind, &'static str, &'static str)> = Vec::new();
    for &kind in scenarios {
        for source in ["cache", "network"] {
            for which in ["cnn", "knn"] {
                cells.push((kind, source, which));
            }
        }
    }

    // Load each requested dataset once.
    let mut loaded: Vec<(ScenarioKind, LoadedDataset)> = Vec::new();
    for &kind in scenarios {
        if kind == ScenarioKind::Baseline {
            continue;
        }
        loaded.push((kind, require_dataset(data_root, kind)?));
    }
    let scenario_ds = |kind: ScenarioKind| -> &LoadedDataset {
        if kind == ScenarioKind::Baseline {
            &baseline
        } else {
            &loaded.iter().find(|(k, _)| *k == kind).unwrap().1
        }
    };

    let mut rows: Vec<(usize, MetricsRow)> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(kind, source, which))| -> Result<(usize, MetricsRow), CliError> {
            let metrics = evaluate_cell(cfg, kind, source, which, scenario_ds(kind), &baseline)?;
            Ok((
                i,
                MetricsRow {
                    scenario: kind.name().to_string(),
                    classifier: format!("{source}-{which}"),
                    metrics,
                },
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by_key(|(i, _)| *i);
    let rows: Vec<MetricsRow> = rows.into_iter().map(|(_, r)| r).collect();

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = String::from(METRICS_SCHEMA);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv_line());
        csv.push('\n');
    }
    fs::write(&metrics_path, csv).map_err(CliError::io("writing metrics.csv"))?;

    // Example memorygram strips: first traces of the first classes.
    let heat_dir = out_dir.join("heatmaps");
    fs::create_dir_all(&heat_dir).map_err(CliError::io("creating heatmaps directory"))?;
    for &kind in scenarios {
        let ds = scenario_ds(kind);
        for class in 0..3u32.min(cfg.classes) {
            for trace in 0..2u32.min(cfg.traces_per_class) {
                let idx = (class * cfg.traces_per_class + trace) as usize;
                if idx >= ds.cache.len() {
                    continue;
                }
                let name = format!("{}_c{class:04}_t{trace:04}.svg", kind.name());
                write_heatmap(
                    &heat_dir.join(&name),
                    &ds.cache.examples[idx].0,
                    &format!("{} class {class} trace {trace}", kind.name()),
                )?;
            }
        }
    }

    Ok(SuiteOutput { rows, metrics_path })
}

/// Pretty-prints a metrics CSV, validating the schema version.
pub fn report(metrics_path: &Path) -> Result<String, CliError> {
    if !metrics_path.exists() {
        return Err(CliError::MissingInput(format!("no metrics file at {}", metrics_path.display())));
    }
    let text = fs::read_to_string(metrics_path).map_err(CliError::io("reading metrics"))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == METRICS_SCHEMA => {}
        other => {
            return Err(CliError::Config(format!(
                "unexpected metrics schema {:?}; this tool reads `{}`",
                other.unwrap_or(""),
                METRICS_SCHEMA
            )))
        }
    }
    let mut out = format!(
        "{:<16} {:<14} {:>9} {:>7} {:>7} {:>7}\n",
        "scenario", "classifier", "accuracy", "std", "top5", "auc"
    );
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(CliError::Config(format!("malformed metrics row {line:?}")));
        }
        out.push_str(&format!(
            "{:<16} {:<14} {:>9} {:>7} {:>7} {:>7}\n",
            cols[0],
            cols[1],
            cols[2],
            cols[3],
            cols[4],
            if cols[5].is_empty() { "-" } else { cols[5] }
        ));
    }
    Ok(out)
}
