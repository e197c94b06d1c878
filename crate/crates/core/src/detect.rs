//! Cache-configuration detector.
//!
//! The attacker's probe buffer must match the target's LLC geometry, so the
//! detector first identifies it: a 20 MiB buffer is iterated in one stride
//! pattern per candidate geometry (all the ways of all the sets that
//! candidate would have), timing each pass. A pattern no larger than the
//! real cache settles into hits; a pattern that exceeds it keeps missing.
//! Per-candidate features are (min, max, mean, std) of the per-element
//! access time over the iterations, and a shallow threshold tree on the
//! minimum-time features picks the configuration.
//!
//! Four candidates cover the common parts: 4096 or 8192 sets crossed with
//! 12 or 16 ways (3, 4, 6 and 8 MiB at 64-byte lines).

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::engine::CostModel;
use crate::llc::{CacheConfig, CacheState, Owner};

pub const FEATURES_PER_PATTERN: usize = 4;
pub const STAT_MIN: usize = 0;
pub const STAT_MAX: usize = 1;
pub const STAT_MEAN: usize = 2;
pub const STAT_STD: usize = 3;

/// The candidate geometries, smallest capacity first.
pub fn candidate_configs() -> Vec<CacheConfig> {
    [(4096, 12), (4096, 16), (8192, 12), (8192, 16)]
        .into_iter()
        .map(|(sets, ways)| CacheConfig::new(sets, ways).unwrap())
        .collect()
}

pub fn candidate_label(cfg: &CacheConfig) -> String {
    format!("{}MB", cfg.capacity() / (1024 * 1024))
}

/// Measurement knobs for the simulated detector probe.
#[derive(Clone, Copy, Debug)]
pub struct DetectParams {
    /// Warm-up iterations before measuring.
    pub warmup: usize,
    /// Measured iterations per pattern.
    pub iterations: usize,
    /// Relative per-element latency noise, uniform in ±noise.
    pub noise: f64,
    pub buffer_bytes: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams { warmup: 1, iterations: 3, noise: 0.05, buffer_bytes: 20 * 1024 * 1024 }
    }
}

/// Per-candidate iteration statistics: flattened as
/// `candidate * 4 + {min,max,mean,std}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternFeatures {
    pub values: Vec<f64>,
}

impl PatternFeatures {
    pub fn min_of(&self, candidate: usize) -> f64 {
        self.values[candidate * FEATURES_PER_PATTERN + STAT_MIN]
    }
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("candidate {0} has no labeled samples")]
    MissingLabel(usize),
    #[error("candidate {0} has {1} samples, need at least 2")]
    TooFewSamples(usize, usize),
    #[error("labels {0} and {1} are inseparable on the given features")]
    Inseparable(usize, usize),
    #[error("thresholds file: {0}")]
    Io(#[from] io::Error),
    #[error("thresholds file: malformed line {0:?}")]
    Malformed(String),
}

/// Iterates the 20 MiB buffer in each candidate's pattern against a
/// simulated host cache of `true_config`, and extracts the per-pattern
/// timing features. Prefetchers are bypassed, matching the memorygrammer's
/// evasion techniques. Deterministic given the seed.
pub fn probe_patterns(
    true_config: &CacheConfig,
    cost: &CostModel,
    seed: u64,
    params: &DetectParams,
) -> PatternFeatures {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(candidate_configs().len() * FEATURES_PER_PATTERN);
    for candidate in candidate_configs() {
        let lines = candidate.total_lines();
        assert!(lines * true_config.line_size <= params.buffer_bytes, "pattern exceeds buffer");
        let mut cache = CacheState::new(*true_config).expect("valid config");

        let mut per_iter = Vec::with_capacity(params.iterations);
        for iter in 0..params.warmup + params.iterations {
            let mut total_ns = 0.0f64;
            for i in 0..lines as u64 {
                let hit = cache.access_quiet(i * true_config.line_size as u64, Owner::Attacker, false);
                let base = if hit { cost.t_hit_ns } else { cost.t_miss_ns } as f64;
                total_ns += base * (1.0 + rng.gen_range(-params.noise..=params.noise));
            }
            if iter >= params.warmup {
                per_iter.push(total_ns / lines as f64);
            }
        }
        let min = per_iter.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = per_iter.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = per_iter.iter().sum::<f64>() / per_iter.len() as f64;
        let var = per_iter.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per_iter.len() as f64;
        values.extend([min, max, mean, var.sqrt()]);
    }
    PatternFeatures { values }
}

/// One comparison of the threshold chain: `feature >= threshold` selects
/// `label` (ties deliberately fall towards the smaller capacity, which is
/// always the selected branch here).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeNode {
    pub feature: usize,
    pub threshold: f64,
    pub label: usize,
}

/// Ordered threshold comparisons ending in a fallback label.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeThresholds {
    pub nodes: Vec<TreeNode>,
    pub fallback: usize,
}

impl TreeThresholds {
    pub fn classify(&self, features: &PatternFeatures) -> usize {
        for node in &self.nodes {
            if features.values[node.feature] >= node.threshold {
                return node.label;
            }
        }
        self.fallback
    }

    pub fn write(&self, path: &Path) -> Result<(), DetectError> {
        let mut w = BufWriter::new(File::create(path)?);
        for n in &self.nodes {
            writeln!(w, "node={},{},{}", n.feature, n.threshold, n.label)?;
        }
        writeln!(w, "fallback={}", self.fallback)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DetectError> {
        let r = BufReader::new(File::open(path)?);
        let mut nodes = Vec::new();
        let mut fallback = None;
        for line in r.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("node=") {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != 3 {
                    return Err(DetectError::Malformed(line));
                }
                let (Ok(feature), Ok(threshold), Ok(label)) =
                    (parts[0].parse(), parts[1].parse(), parts[2].parse())
                else {
                    return Err(DetectError::Malformed(line));
                };
                nodes.push(TreeNode { feature, threshold, label });
            } else if let Some(rest) = line.strip_prefix("fallback=") {
                fallback = rest.parse().ok();
            } else {
                return Err(DetectError::Malformed(line));
            }
        }
        let fallback = fallback.ok_or_else(|| DetectError::Malformed("missing fallback".into()))?;
        Ok(TreeThresholds { nodes, fallback })
    }
}

fn split_errors(samples: &[(&PatternFeatures, usize)], feature: usize, threshold: f64, label: usize) -> usize {
    let mut errors = 0;
    for (f, y) in samples {
        let above = f.values[feature] >= threshold;
        if above != (*y == label) {
            errors += 1;
        }
    }
    errors
}

/// Greedy calibration: at each node, pick the (feature, threshold, label)
/// rule that isolates one remaining label with the fewest misclassified
/// samples, trying minimum-time features first. Reports inseparability when
/// no rule improves on guessing.
pub fn calibrate(samples: &[(PatternFeatures, usize)]) -> Result<TreeThresholds, DetectError> {
    let n_candidates = candidate_configs().len();
    for label in 0..n_candidates {
        let count = samples.iter().filter(|(_, y)| *y == label).count();
        if count == 0 {
            return Err(DetectError::MissingLabel(label));
        }
        if count < 2 {
            return Err(DetectError::TooFewSamples(label, count));
        }
    }

    let mut remaining: Vec<(&PatternFeatures, usize)> =
        samples.iter().map(|(f, y)| (f, *y)).collect();
    let mut remaining_labels: Vec<usize> = (0..n_candidates).collect();
    let mut nodes = Vec::new();

    while remaining_labels.len() > 1 {
        let min_features: Vec<usize> =
            (0..n_candidates).map(|c| c * FEATURES_PER_PATTERN + STAT_MIN).collect();
        let all_features: Vec<usize> = (0..n_candidates * FEATURES_PER_PATTERN).collect();

        let mut best: Option<(usize, TreeNode)> = None;
        for feature_set in [&min_features, &all_features] {
            for &feature in feature_set {
                for &label in &remaining_labels {
                    // Candidate thresholds: midpoints between adjacent sorted values.
                    let mut vals: Vec<f64> =
                        remaining.iter().map(|(f, _)| f.values[feature]).collect();
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    vals.dedup();
                    for pair in vals.windows(2) {
                        let threshold = (pair[0] + pair[1]) / 2.0;
                        let errors = split_errors(&remaining, feature, threshold, label);
                        let node = TreeNode { feature, threshold, label };
                        if best.as_ref().map_or(true, |(e, _)| errors < *e) {
                            best = Some((errors, node));
                        }
                    }
                }
            }
            if best.as_ref().is_some_and(|(e, _)| *e == 0) {
                break; // a clean min-time split needs no other features
            }
        }

        let Some((errors, node)) = best else {
            return Err(DetectError::Inseparable(remaining_labels[0], remaining_labels[1]));
        };
        // No split beats lumping everything into the majority label.
        let majority = remaining_labels
            .iter()
            .map(|&l| remaining.iter().filter(|(_, y)| *y != l).count())
            .min()
            .unwrap();
        if errors >= majority && remaining_labels.len() == 2 {
            return Err(DetectError::Inseparable(remaining_labels[0], remaining_labels[1]));
        }

        remaining.retain(|(f, _)| f.values[node.feature] < node.threshold);
        remaining_labels.retain(|&l| l != node.label);
        nodes.push(node);
    }

    Ok(TreeThresholds { nodes, fallback: remaining_labels[0] })
}

/// Deterministic tree traversal over the features of a fresh host.
pub fn classify_config(features: &PatternFeatures, tree: &TreeThresholds) -> CacheConfig {
    candidate_configs()[tree.classify(features)]
}

/// Calibration corpus CSV: `config_label,pattern_id,min,max,mean,std`, one
/// row per (sample, pattern), samples in generation order.
pub fn write_corpus_csv(path: &Path, samples: &[(PatternFeatures, usize)]) -> Result<(), DetectError> {
    let candidates = candidate_configs();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "config_label,pattern_id,min,max,mean,std")?;
    for (features, label) in samples {
        for (p, _) in candidates.iter().enumerate() {
            let v = &features.values[p * FEATURES_PER_PATTERN..(p + 1) * FEATURES_PER_PATTERN];
            writeln!(
                w,
                "{},{},{},{},{},{}",
                candidate_label(&candidates[*label]),
                candidate_label(&candidates[p]),
                v[STAT_MIN],
                v[STAT_MAX],
                v[STAT_MEAN],
                v[STAT_STD]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_params() -> DetectParams {
        // Small-cache stand-ins keep unit tests fast; the full-size corpus
        // lives in the acceptance suite.
        DetectParams { warmup: 1, iterations: 3, noise: 0.05, buffer_bytes: 20 * 1024 * 1024 }
    }

    #[test]
    fn matching_pattern_settles_to_hit_latency() {
        let cost = CostModel::default();
        let host = candidate_configs()[2]; // 6 MB
        let f = probe_patterns(&host, &cost, 3, &quick_params());
        // Patterns no larger than the host fit: min per-element time near
        // t_hit. The 8 MB pattern exceeds it: near t_miss.
        for candidate in 0..3 {
            assert!(
                f.min_of(candidate) < cost.t_hit_ns as f64 * 1.1,
                "candidate {candidate}: {}",
                f.min_of(candidate)
            );
        }
        assert!(f.min_of(3) > cost.t_miss_ns as f64 * 0.9, "oversized pattern must thrash");
    }

    #[test]
    fn features_are_deterministic_per_seed() {
        let cost = CostModel::default();
        let host = candidate_configs()[0];
        let a = probe_patterns(&host, &cost, 9, &quick_params());
        let b = probe_patterns(&host, &cost, 9, &quick_params());
        assert_eq!(a, b);
        let c = probe_patterns(&host, &cost, 10, &quick_params());
        assert_ne!(a, c);
    }

    #[test]
    fn feature_stats_are_ordered() {
        let cost = CostModel::default();
        let f = probe_patterns(&candidate_configs()[1], &cost, 5, &quick_params());
        for c in 0..4 {
            let base = c * FEATURES_PER_PATTERN;
            assert!(f.values[base + STAT_MIN] <= f.values[base + STAT_MEAN]);
            assert!(f.values[base + STAT_MEAN] <= f.values[base + STAT_MAX]);
            assert!(f.values[base + STAT_STD] >= 0.0);
        }
    }

    fn two_config_corpus() -> Vec<(PatternFeatures, usize)> {
        // Synthetic features: label 0 has high min on pattern 1, label 1 low.
        let mut samples = Vec::new();
        for i in 0..10 {
            let jitter = i as f64 * 0.01;
            let mut a = vec![10.0; 16];
            a[FEATURES_PER_PATTERN + STAT_MIN] = 100.0 + jitter;
            samples.push((PatternFeatures { values: a }, 0));
            let mut b = vec![10.0; 16];
            b[FEATURES_PER_PATTERN + STAT_MIN] = 12.0 + jitter;
            samples.push((PatternFeatures { values: b }, 1));
        }
        // Give the other labels token presence so calibration sees them.
        for label in 2..4 {
            for i in 0..2 {
                let mut v = vec![10.0; 16];
                v[label * FEATURES_PER_PATTERN + STAT_MIN] = 300.0 + label as f64 + i as f64;
                v[(label - 1) * FEATURES_PER_PATTERN + STAT_MIN] = 200.0 + label as f64;
                samples.push((PatternFeatures { values: v }, label));
            }
        }
        samples
    }

    #[test]
    fn calibrate_separates_clean_corpus() {
        let samples = two_config_corpus();
        let tree = calibrate(&samples).unwrap();
        let correct = samples
            .iter()
            .filter(|(f, y)| tree.classify(f) == *y)
            .count();
        assert_eq!(correct, samples.len());
    }

    #[test]
    fn calibrate_requires_every_label() {
        let mut samples = two_config_corpus();
        samples.retain(|(_, y)| *y != 3);
        assert!(matches!(calibrate(&samples), Err(DetectError::MissingLabel(3))));
    }

    #[test]
    fn identical_features_for_two_configs_are_inseparable() {
        let mut samples = Vec::new();
        for label in 0..4 {
            for i in 0..3 {
                let mut v = vec![10.0; 16];
                // Labels 2 and 3 get identical feature vectors.
                let eff = label.min(2);
                v[eff * FEATURES_PER_PATTERN] = 50.0 * (eff + 1) as f64 + i as f64 * 0.001;
                samples.push((PatternFeatures { values: v }, label));
            }
        }
        assert!(matches!(calibrate(&samples), Err(DetectError::Inseparable(..))));
    }

    #[test]
    fn exact_threshold_takes_the_branch() {
        let tree = TreeThresholds {
            nodes: vec![TreeNode { feature: 0, threshold: 5.0, label: 0 }],
            fallback: 3,
        };
        let mut values = vec![0.0; 16];
        values[0] = 5.0;
        // feature == threshold selects the node's (smaller-capacity) label.
        assert_eq!(tree.classify(&PatternFeatures { values }), 0);
    }

    #[test]
    fn thresholds_file_round_trip() {
        let tree = TreeThresholds {
            nodes: vec![
                TreeNode { feature: 4, threshold: 58.25, label: 0 },
                TreeNode { feature: 8, threshold: 60.5, label: 1 },
            ],
            fallback: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.txt");
        tree.write(&path).unwrap();
        assert_eq!(TreeThresholds::read(&path).unwrap(), tree);
    }

    #[test]
    fn end_to_end_detection_on_simulated_hosts() {
        let cost = CostModel::default();
        let params = quick_params();
        let mut corpus = Vec::new();
        for (label, host) in candidate_configs().iter().enumerate() {
            for s in 0..4 {
                corpus.push((probe_patterns(host, &cost, 100 + label as u64 * 10 + s, &params), label));
            }
        }
        let tree = calibrate(&corpus).unwrap();
        // Fresh simulated 6 MB host classifies as 6 MB.
        let six = probe_patterns(&candidate_configs()[2], &cost, 999, &params);
        assert_eq!(candidate_label(&classify_config(&six, &tree)), "6MB");
    }

    #[test]
    fn scaling_latencies_keeps_the_classification() {
        let cost = CostModel::default();
        let params = quick_params();
        let scale = 3.7;
        let mut corpus = Vec::new();
        let mut scaled_corpus = Vec::new();
        for (label, host) in candidate_configs().iter().enumerate() {
            for s in 0..4 {
                let f = probe_patterns(host, &cost, 500 + label as u64 * 10 + s, &params);
                let scaled = PatternFeatures { values: f.values.iter().map(|v| v * scale).collect() };
                corpus.push((f, label));
                scaled_corpus.push((scaled, label));
            }
        }
        let tree = calibrate(&corpus).unwrap();
        let scaled_tree = calibrate(&scaled_corpus).unwrap();
        for ((f, y), (fs, _)) in corpus.iter().zip(&scaled_corpus) {
            assert_eq!(tree.classify(f), *y);
            assert_eq!(scaled_tree.classify(fs), *y);
        }
    }
}
