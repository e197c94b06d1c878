//! Cache-configuration detector commands.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use occlab_core::detect::{
    calibrate, candidate_configs, candidate_label, classify_config, probe_patterns,
    write_corpus_csv, DetectParams, PatternFeatures, TreeThresholds,
};
use occlab_core::engine::CostModel;
use occlab_core::seed::derive_seed;

use crate::CliError;

pub const THRESHOLDS_NAME: &str = "thresholds.txt";
pub const CORPUS_NAME: &str = "corpus.csv";

/// Simulated corpus: `samples_per_config` hosts per candidate geometry.
pub fn build_corpus(samples_per_config: usize, seed: u64) -> Vec<(PatternFeatures, usize)> {
    let cost = CostModel::default();
    let params = DetectParams::default();
    let candidates = candidate_configs();
    let jobs: Vec<(usize, u64)> = (0..candidates.len())
        .flat_map(|label| {
            (0..samples_per_config)
                .map(move |s| (label, derive_seed(seed, "detect-sample", &[label as u64, s as u64])))
        })
        .collect();
    jobs.par_iter()
        .map(|&(label, sample_seed)| {
            (probe_patterns(&candidates[label], &cost, sample_seed, &params), label)
        })
        .collect()
}

/// Stratified k-fold accuracy of tree calibration on a corpus.
pub fn cross_validate(corpus: &[(PatternFeatures, usize)], folds: usize) -> Result<f64, CliError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for fold in 0..folds {
        let train: Vec<(PatternFeatures, usize)> = corpus
            .iter()
            .enumerate()
            .filter(|(i, _)| i % folds != fold)
            .map(|(_, s)| s.clone())
            .collect();
        let test: Vec<&(PatternFeatures, usize)> = corpus
            .iter()
            .enumerate()
            .filter(|(i, _)| i % folds == fold)
            .map(|(_, s)| s)
            .collect();
        let tree = calibrate(&train).map_err(|e| CliError::Runtime(e.to_string()))?;
        for (f, y) in test {
            if tree.classify(f) == *y {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

pub struct CalibrateOutput {
    pub cv_accuracy: f64,
    pub tree: TreeThresholds,
}

pub fn detect_calibrate(out_dir: &Path, samples_per_config: usize, seed: u64) -> Result<CalibrateOutput, CliError> {
    fs::create_dir_all(out_dir).map_err(CliError::io("creating detector output directory"))?;
    let corpus = build_corpus(samples_per_config, seed);
    write_corpus_csv(&out_dir.join(CORPUS_NAME), &corpus)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let cv_accuracy = cross_validate(&corpus, 5)?;
    let tree = calibrate(&corpus).map_err(|e| CliError::Runtime(e.to_string()))?;
    tree.write(&out_dir.join(THRESHOLDS_NAME)).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(CalibrateOutput { cv_accuracy, tree })
}

pub struct HostResult {
    pub truth: String,
    pub detected: String,
}

/// Classifies a mix of freshly simulated hosts (round-robin over the
/// candidates) with a previously calibrated tree.
pub fn detect_run(thresholds: &Path, hosts: usize, seed: u64) -> Result<Vec<HostResult>, CliError> {
    if !thresholds.exists() {
        return Err(CliError::MissingInput(format!(
            "no calibration file at {} (run detect-calibrate first)",
            thresholds.display()
        )));
    }
    let tree = TreeThresholds::read(thresholds).map_err(|e| CliError::Runtime(e.to_string()))?;
    let cost = CostModel::default();
    let params = DetectParams::default();
    let candidates = candidate_configs();
    (0..hosts)
        .map(|h| {
            let truth = &candidates[h % candidates.len()];
            let features =
                probe_patterns(truth, &cost, derive_seed(seed, "detect-host", &[h as u64]), &params);
            let detected = classify_config(&features, &tree);
            Ok(HostResult { truth: candidate_label(truth), detected: candidate_label(&detected) })
        })
        .collect()
}
