//! Learning pipeline: datasets, fold protocol, classifiers, metrics.
//!
//! Evaluation follows the 10-fold protocol: the dataset is split into ten
//! equal stratified folds; each round takes one fold as the test set and
//! splits the remainder 90/10 into training (81% of the total) and
//! validation (9%). Metrics are accuracy mean ± std over rounds, top-k
//! accuracy, and — for open-world datasets — the AUC of the binary
//! sensitive/non-sensitive decision.

pub mod nn;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::probe::MISSED_SLOT;
use crate::seed::derive_seed;
pub use nn::{argmax_tie_low, grad_check, train, CnnSpec, ConvStage, Example, Model, TrainError, TrainLog};

/// Labeled feature vectors. In the open world, every background site
/// collapses into the single `nonsensitive` class.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: usize,
    pub nonsensitive: Option<u32>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, classes: usize) -> Self {
        Dataset { examples, classes, nonsensitive: None }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.examples.first().map_or(0, |(x, _)| x.len())
    }

    /// Accuracy of the trivial classifier: the largest class share.
    pub fn base_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        for (_, y) in &self.examples {
            counts[*y as usize] += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for (_, y) in &self.examples {
            counts[*y as usize] += 1;
        }
        counts
    }
}

/// Per-trace standardization to zero mean and unit variance. Entries equal
/// to the missed-slot sentinel are excluded from the statistics and pass
/// through as −1.
pub fn standardize(features: &mut [Vec<f32>], sentinel: bool) {
    for x in features.iter_mut() {
        let mut n = 0usize;
        let mut mean = 0.0f64;
        for &v in x.iter() {
            if sentinel && v == MISSED_SLOT {
                continue;
            }
            mean += v as f64;
            n += 1;
        }
        if n == 0 {
            continue;
        }
        mean /= n as f64;
        let mut var = 0.0f64;
        for &v in x.iter() {
            if sentinel && v == MISSED_SLOT {
                continue;
            }
            var += (v as f64 - mean).powi(2);
        }
        let std = (var / n as f64).sqrt().max(1e-6);
        for v in x.iter_mut() {
            if sentinel && *v == MISSED_SLOT {
                *v = -1.0;
            } else {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
    }
}

/// Stratified partition into `n_folds` disjoint covering folds.
pub fn stratified_folds(ds: &Dataset, n_folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, (_, y)) in ds.examples.iter().enumerate() {
        per_class[*y as usize].push(i);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "folds", &[]));
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); n_folds];
    let mut next = 0usize;
    for class in &mut per_class {
        class.shuffle(&mut rng);
        for &i in class.iter() {
            folds[next % n_folds].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Train/validation/test split for one evaluation round.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Builds the round's split: one fold tests, 10% of the rest validates,
/// the remaining 81% of the total trains.
pub fn fold_split(folds: &[Vec<usize>], round: usize, seed: u64) -> FoldSplit {
    let test = folds[round].clone();
    let mut rest: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != round)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "fold-split", &[round as u64]));
    rest.shuffle(&mut rng);
    let n_val = (rest.len() / 10).max(1);
    let val = rest[..n_val].to_vec();
    let train = rest[n_val..].to_vec();
    FoldSplit { train, val, test }
}

/// A trained model that scores feature vectors.
pub trait Scorer: Send + Sync {
    fn probabilities(&self, x: &[f32]) -> Vec<f64>;

    fn predict(&self, x: &[f32]) -> u32 {
        argmax_tie_low(&self.probabilities(x))
    }
}

/// A training recipe that produces a [`Scorer`] from a split.
pub trait Classifier: Sync {
    fn name(&self) -> &'static str;

    fn fit(
        &self,
        ds: &Dataset,
        train_idx: &[usize],
        val_idx: &[usize],
        seed: u64,
    ) -> Result<Box<dyn Scorer>, TrainError>;
}

/// The from-scratch CNN behind the [`Classifier`] interface.
pub struct CnnClassifier {
    pub spec: CnnSpec,
}

struct CnnScorer {
    model: Model,
}

impl Scorer for CnnScorer {
    fn probabilities(&self, x: &[f32]) -> Vec<f64> {
        self.model.forward_f32(x).expect("length checked at fit time")
    }
}

impl Classifier for CnnClassifier {
    fn name(&self) -> &'static str {
        "cnn"
    }

    fn fit(
        &self,
        ds: &Dataset,
        train_idx: &[usize],
        val_idx: &[usize],
        seed: u64,
    ) -> Result<Box<dyn Scorer>, TrainError> {
        let train_set: Vec<&Example> = train_idx.iter().map(|&i| &ds.examples[i]).collect();
        let val_set: Vec<&Example> = val_idx.iter().map(|&i| &ds.examples[i]).collect();
        let (model, _) = train(&train_set, &val_set, &self.spec, seed)?;
        Ok(Box::new(CnnScorer { model }))
    }
}

/// k-nearest-neighbors over traces mean-pooled to length 256: the classical
/// baseline. Majority vote; vote ties go to the class of the nearest single
/// neighbor among the tied classes.
pub struct KnnClassifier {
    pub k: usize,
}

pub const KNN_POOLED_LEN: usize = 256;

/// Mean-pools a trace onto at most `target` buckets.
pub fn mean_pool(x: &[f32], target: usize) -> Vec<f64> {
    if x.len() <= target {
        return x.iter().map(|&v| v as f64).collect();
    }
    let mut out = Vec::with_capacity(target);
    for i in 0..target {
        let lo = i * x.len() / target;
        let hi = ((i + 1) * x.len() / target).max(lo + 1);
        let sum: f64 = x[lo..hi].iter().map(|&v| v as f64).sum();
        out.push(sum / (hi - lo) as f64);
    }
    out
}

struct KnnScorer {
    k: usize,
    classes: usize,
    train: Vec<(Vec<f64>, u32)>,
}

impl KnnScorer {
    fn neighbors(&self, x: &[f32]) -> Vec<(f64, u32)> {
        let q = mean_pool(x, KNN_POOLED_LEN);
        let mut dists: Vec<(f64, u32)> = self
            .train
            .iter()
            .map(|(t, y)| {
                let d: f64 = t.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, *y)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        dists.truncate(self.k);
        dists
    }
}

impl Scorer for KnnScorer {
    fn probabilities(&self, x: &[f32]) -> Vec<f64> {
        let nn = self.neighbors(x);
        let mut votes = vec![0.0f64; self.classes];
        for (_, y) in &nn {
            votes[*y as usize] += 1.0;
        }
        let total: f64 = votes.iter().sum();
        if total > 0.0 {
            for v in &mut votes {
                *v /= total;
            }
        }
        votes
    }

    fn predict(&self, x: &[f32]) -> u32 {
        let nn = self.neighbors(x);
        let mut votes = vec![0usize; self.classes];
        for (_, y) in &nn {
            votes[*y as usize] += 1;
        }
        let best = *votes.iter().max().unwrap();
        let tied: Vec<u32> = (0..self.classes as u32).filter(|&c| votes[c as usize] == best).collect();
        if tied.len() == 1 {
            return tied[0];
        }
        // Tie: nearest single neighbor among the tied classes decides.
        nn.iter().find(|(_, y)| tied.contains(y)).map(|(_, y)| *y).unwrap_or(tied[0])
    }
}

impl Classifier for KnnClassifier {
    fn name(&self) -> &'static str {
        "knn"
    }

    fn fit(
        &self,
        ds: &Dataset,
        train_idx: &[usize],
        _val_idx: &[usize],
        _seed: u64,
    ) -> Result<Box<dyn Scorer>, TrainError> {
        if self.k == 0 {
            return Err(TrainError::BadSpec("k must be at least 1".into()));
        }
        let train: Vec<(Vec<f64>, u32)> = train_idx
            .iter()
            .map(|&i| {
                let (x, y) = &ds.examples[i];
                (mean_pool(x, KNN_POOLED_LEN), *y)
            })
            .collect();
        Ok(Box::new(KnnScorer { k: self.k, classes: ds.classes, train }))
    }
}

/// Test-set results of one evaluation round.
#[derive(Clone, Copy, Debug)]
pub struct FoldOutcome {
    pub accuracy: f64,
    pub top5: f64,
    pub auc: Option<f64>,
}

/// Aggregated metrics over evaluation rounds.
#[derive(Clone, Debug)]
pub struct Metrics {
    pub outcomes: Vec<FoldOutcome>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub top5_mean: f64,
    pub auc_mean: Option<f64>,
}

impl Metrics {
    pub fn from_outcomes(outcomes: Vec<FoldOutcome>) -> Self {
        let n = outcomes.len().max(1) as f64;
        let accuracy_mean = outcomes.iter().map(|o| o.accuracy).sum::<f64>() / n;
        let var = outcomes.iter().map(|o| (o.accuracy - accuracy_mean).powi(2)).sum::<f64>() / n;
        let top5_mean = outcomes.iter().map(|o| o.top5).sum::<f64>() / n;
        let aucs: Vec<f64> = outcomes.iter().filter_map(|o| o.auc).collect();
        let auc_mean = if aucs.is_empty() {
            None
        } else {
            Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
        };
        Metrics { outcomes, accuracy_mean, accuracy_std: var.sqrt(), top5_mean, auc_mean }
    }
}

/// True when the correct label ranks among the `k` most probable classes,
/// ties broken towards lower class ids.
pub fn top_k_hit(probs: &[f64], label: u32, k: usize) -> bool {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order.iter().take(k).any(|&c| c as u32 == label)
}

/// Area under the ROC curve by threshold sweep and trapezoidal integration.
/// `scores` pairs a score with whether the example is a true positive class
/// member; higher scores should indicate the positive class.
pub fn roc_auc(scores: &[(f64, bool)]) -> f64 {
    let pos = scores.iter().filter(|(_, p)| *p).count() as f64;
    let neg = scores.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 1.0;
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut auc = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        // Consume the whole tied-score group before emitting a ROC point.
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let tpr = tp / pos;
        let fpr = fp / neg;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    auc + (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2.0
}

/// Evaluates a trained scorer on test indices. For open-world datasets the
/// AUC of the binary sensitive/non-sensitive decision is computed by
/// sweeping a threshold on the non-sensitive probability.
pub fn evaluate_scorer(
    scorer: &dyn Scorer,
    ds: &Dataset,
    test_idx: &[usize],
) -> FoldOutcome {
    let mut correct = 0usize;
    let mut top5 = 0usize;
    let mut binary: Vec<(f64, bool)> = Vec::new();
    for &i in test_idx {
        let (x, y) = &ds.examples[i];
        let probs = scorer.probabilities(x);
        if scorer.predict(x) == *y {
            correct += 1;
        }
        if top_k_hit(&probs, *y, 5) {
            top5 += 1;
        }
        if let Some(ns) = ds.nonsensitive {
            // Score for "is non-sensitive": its own class probability.
            binary.push((probs[ns as usize], *y == ns));
        }
    }
    let n = test_idx.len().max(1) as f64;
    FoldOutcome {
        accuracy: correct as f64 / n,
        top5: top5 as f64 / n,
        auc: ds.nonsensitive.map(|_| roc_auc(&binary)),
    }
}

/// Full k-fold protocol: per round, train on the round's split and evaluate
/// on its test fold. Rounds run in parallel; the aggregation is ordered by
/// round, so results do not depend on scheduling.
pub fn kfold_eval(
    ds: &Dataset,
    classifier: &dyn Classifier,
    n_folds: usize,
    rounds: usize,
    seed: u64,
) -> Result<Metrics, TrainError> {
    for (class, count) in ds.class_counts().into_iter().enumerate() {
        if count < n_folds {
            return Err(TrainError::ClassTooSmall {
                class: class as u32,
                count,
                needed: n_folds,
            });
        }
    }
    let folds = stratified_folds(ds, n_folds, seed);
    let rounds = rounds.min(n_folds);
    let mut outcomes: Vec<(usize, FoldOutcome)> = (0..rounds)
        .into_par_iter()
        .map(|round| {
            let split = fold_split(&folds, round, seed);
            let scorer = classifier.fit(ds, &split.train, &split.val, derive_seed(seed, "round", &[round as u64]))?;
            Ok((round, evaluate_scorer(scorer.as_ref(), ds, &split.test)))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    outcomes.sort_by_key(|(round, _)| *round);
    Ok(Metrics::from_outcomes(outcomes.into_iter().map(|(_, o)| o).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Scorer that answers from the true labels; for metric plumbing tests.
    struct OracleScorer {
        labels: Vec<u32>,
        classes: usize,
        cursor: std::sync::atomic::AtomicUsize,
    }

    impl Scorer for OracleScorer {
        fn probabilities(&self, _x: &[f32]) -> Vec<f64> {
            let i = self.cursor.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let mut p = vec![0.0; self.classes];
            p[self.labels[i % self.labels.len()] as usize] = 1.0;
            p
        }
    }

    struct UniformRandomScorer {
        classes: usize,
        state: std::sync::atomic::AtomicU64,
    }

    impl Scorer for UniformRandomScorer {
        fn probabilities(&self, _x: &[f32]) -> Vec<f64> {
            use std::sync::atomic::Ordering;
            let s = self.state.fetch_add(1, Ordering::SeqCst);
            let mut rng = ChaCha12Rng::seed_from_u64(s);
            let mut p: Vec<f64> = (0..self.classes).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sum: f64 = p.iter().sum();
            for v in &mut p {
                *v /= sum;
            }
            p
        }
    }

    fn synthetic_dataset(classes: usize, per_class: usize, len: usize) -> Dataset {
        let mut examples = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for c in 0..classes {
            for _ in 0..per_class {
                let x: Vec<f32> = (0..len)
                    .map(|_| c as f32 + rng.gen_range(-0.1..0.1))
                    .collect();
                examples.push((x, c as u32));
            }
        }
        Dataset::new(examples, classes)
    }

    #[test]
    fn folds_partition_the_dataset() {
        let ds = synthetic_dataset(5, 20, 8);
        let folds = stratified_folds(&ds, 10, 3);
        assert_eq!(folds.len(), 10);
        let mut seen = vec![false; ds.len()];
        for f in &folds {
            assert_eq!(f.len(), ds.len() / 10);
            for &i in f {
                assert!(!seen[i], "index {i} in two folds");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));

        let split = fold_split(&folds, 0, 3);
        let total = split.train.len() + split.val.len() + split.test.len();
        assert_eq!(total, ds.len());
        assert_eq!(split.test.len(), 10);
        assert_eq!(split.val.len(), 9);
        assert_eq!(split.train.len(), 81);
    }

    #[test]
    fn perfect_scorer_scores_perfectly() {
        let ds = synthetic_dataset(4, 12, 6);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let labels: Vec<u32> = idx.iter().map(|&i| ds.examples[i].1).collect();
        let scorer = OracleScorer {
            labels,
            classes: 4,
            cursor: std::sync::atomic::AtomicUsize::new(0),
        };
        // Oracle scorer answers sequentially: probabilities() then predict()
        // both consume; evaluate per index manually instead.
        let mut correct = 0;
        for &i in &idx {
            let (x, y) = &ds.examples[i];
            let p = scorer.probabilities(x);
            if argmax_tie_low(&p) == *y {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn uniform_random_scorer_sits_at_the_base_rate() {
        // 100 balanced classes: accuracy ~1%, top-5 ~5%.
        let classes = 100;
        let n = 20_000;
        let scorer = UniformRandomScorer { classes, state: std::sync::atomic::AtomicU64::new(0) };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (mut acc, mut top5) = (0usize, 0usize);
        for _ in 0..n {
            let y = rng.gen_range(0..classes) as u32;
            let p = scorer.probabilities(&[]);
            if argmax_tie_low(&p) == y {
                acc += 1;
            }
            if top_k_hit(&p, y, 5) {
                top5 += 1;
            }
        }
        let acc = acc as f64 / n as f64;
        let top5 = top5 as f64 / n as f64;
        assert!((acc - 0.01).abs() < 0.005, "accuracy {acc}");
        assert!((top5 - 0.05).abs() < 0.012, "top5 {top5}");
    }

    #[test]
    fn trivial_all_nonsensitive_classifier_hits_the_open_world_base_rate() {
        // 10 sensitive classes x 10 traces + 50 non-sensitive singles:
        // base rate 50/150 = 33.3%.
        let mut ds = synthetic_dataset(10, 10, 4);
        for i in 0..50 {
            ds.examples.push((vec![i as f32; 4], 10));
        }
        ds.classes = 11;
        ds.nonsensitive = Some(10);
        assert!((ds.base_rate() - 1.0 / 3.0).abs() < 1e-9);

        struct AllNs;
        impl Scorer for AllNs {
            fn probabilities(&self, _x: &[f32]) -> Vec<f64> {
                let mut p = vec![0.0; 11];
                p[10] = 1.0;
                p
            }
        }
        let idx: Vec<usize> = (0..ds.len()).collect();
        let outcome = evaluate_scorer(&AllNs, &ds, &idx);
        assert!((outcome.accuracy - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn auc_of_perfect_and_random_separation() {
        let perfect: Vec<(f64, bool)> =
            (0..50).map(|i| (i as f64, i >= 25)).collect();
        assert!((roc_auc(&perfect) - 1.0).abs() < 1e-12);

        let inverted: Vec<(f64, bool)> =
            (0..50).map(|i| (i as f64, i < 25)).collect();
        assert!(roc_auc(&inverted) < 0.01);

        let all_tied: Vec<(f64, bool)> = (0..50).map(|i| (0.5, i % 2 == 0)).collect();
        assert!((roc_auc(&all_tied) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn knn_self_classifies_training_data() {
        let ds = synthetic_dataset(4, 6, 10);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let scorer = KnnClassifier { k: 1 }.fit(&ds, &idx, &[], 0).unwrap();
        let outcome = evaluate_scorer(scorer.as_ref(), &ds, &idx);
        assert_eq!(outcome.accuracy, 1.0);
    }

    #[test]
    fn knn_separates_gaussian_classes() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut examples = Vec::new();
        for c in 0..2u32 {
            for _ in 0..60 {
                let center = c as f32 * 3.0;
                let x: Vec<f32> = (0..16).map(|_| center + rng.gen_range(-1.0..1.0)).collect();
                examples.push((x, c));
            }
        }
        let ds = Dataset::new(examples, 2);
        let folds = stratified_folds(&ds, 4, 7);
        let split = fold_split(&folds, 0, 7);
        let scorer = KnnClassifier { k: 3 }.fit(&ds, &split.train, &split.val, 0).unwrap();
        let outcome = evaluate_scorer(scorer.as_ref(), &ds, &split.test);
        assert!(outcome.accuracy >= 0.95, "accuracy {}", outcome.accuracy);
    }

    #[test]
    fn kfold_rejects_thin_classes() {
        let ds = synthetic_dataset(3, 5, 4);
        let knn = KnnClassifier { k: 1 };
        assert!(matches!(
            kfold_eval(&ds, &knn, 10, 10, 0),
            Err(TrainError::ClassTooSmall { .. })
        ));
    }

    #[test]
    fn kfold_metrics_on_easy_data() {
        let ds = synthetic_dataset(4, 20, 8);
        let knn = KnnClassifier { k: 3 };
        let metrics = kfold_eval(&ds, &knn, 10, 10, 5).unwrap();
        assert_eq!(metrics.outcomes.len(), 10);
        assert!(metrics.accuracy_mean > 0.95);
        assert!(metrics.accuracy_std < 0.2);
        assert!(metrics.auc_mean.is_none());
    }

    #[test]
    fn standardization_centers_and_passes_sentinel_through() {
        let mut features = vec![vec![2.0f32, 4.0, MISSED_SLOT, 6.0]];
        standardize(&mut features, true);
        let x = &features[0];
        assert_eq!(x[2], -1.0);
        let mean: f32 = [x[0], x[1], x[3]].iter().sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-6);

        // Without sentinel handling every entry participates.
        let mut plain = vec![vec![1.0f32, 2.0, 3.0]];
        standardize(&mut plain, false);
        let m: f32 = plain[0].iter().sum::<f32>() / 3.0;
        assert!(m.abs() < 1e-6);
    }

    #[test]
    fn mean_pool_shrinks_long_traces_only() {
        let long: Vec<f32> = (0..1500).map(|i| i as f32).collect();
        let pooled = mean_pool(&long, 256);
        assert_eq!(pooled.len(), 256);
        let short = vec![1.0f32; 50];
        assert_eq!(mean_pool(&short, 256).len(), 50);
    }
}
