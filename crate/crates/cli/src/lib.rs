//! Command implementations behind the `occlab` binary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing input.

use std::io;
use std::path::Path;

use thiserror::Error;

pub mod config;
pub mod dataset;
pub mod detectcmd;
pub mod suite;
pub mod svg;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn io(context: &'static str) -> impl Fn(io::Error) -> CliError {
        move |e| CliError::Runtime(format!("{context}: {e}"))
    }
}

/// Installs a rayon pool bounded to `jobs` threads (0 keeps the default).
/// All outputs are keyed and order-merged, so the thread count never
/// changes any produced byte.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("building thread pool");
    pool.install(f)
}

/// Loads a dataset and trains the CNN on the round-0 split of one source.
pub fn train_command(
    config: &ExperimentConfig,
    data_dir: &Path,
    source: &str,
    model_out: &Path,
) -> Result<String, CliError> {
    use occlab_core::learn::{fold_split, stratified_folds, train, Example};

    let loaded = dataset::load_dataset(data_dir)?;
    let ds = match source {
        "cache" => &loaded.cache,
        "network" => &loaded.net,
        _ => return Err(CliError::Config(format!("unknown source {source:?} (cache|network)"))),
    };
    let folds = stratified_folds(ds, config.folds, config.master_seed);
    let split = fold_split(&folds, 0, config.master_seed);
    let spec = config.cnn_spec(ds.feature_len(), ds.classes);
    let train_set: Vec<&Example> = split.train.iter().map(|&i| &ds.examples[i]).collect();
    let val_set: Vec<&Example> = split.val.iter().map(|&i| &ds.examples[i]).collect();
    let seed = config.train_seed(&format!("{source}-cnn"), 0);
    let (model, log) =
        train(&train_set, &val_set, &spec, seed).map_err(|e| CliError::Runtime(e.to_string()))?;
    model.save(model_out).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(format!(
        "trained {} epochs (best {} at validation accuracy {:.3}); model written to {}",
        log.epochs.len(),
        log.best_epoch,
        log.best_val_accuracy,
        model_out.display()
    ))
}

/// Evaluates a saved model over an entire dataset.
pub fn eval_command(model_path: &Path, data_dir: &Path, source: &str) -> Result<String, CliError> {
    use occlab_core::learn::{evaluate_scorer, Model, Scorer};

    if !model_path.exists() {
        return Err(CliError::MissingInput(format!("no model file at {}", model_path.display())));
    }
    let model = Model::load(model_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let loaded = dataset::load_dataset(data_dir)?;
    let ds = match source {
        "cache" => &loaded.cache,
        "network" => &loaded.net,
        _ => return Err(CliError::Config(format!("unknown source {source:?} (cache|network)"))),
    };

    struct Loaded(occlab_core::learn::Model);
    impl Scorer for Loaded {
        fn probabilities(&self, x: &[f32]) -> Vec<f64> {
            self.0.forward_f32(x).expect("length checked")
        }
    }
    if ds.feature_len() != model.spec.input_len {
        return Err(CliError::Config(format!(
            "model expects input length {}, dataset has {}",
            model.spec.input_len,
            ds.feature_len()
        )));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let outcome = evaluate_scorer(&Loaded(model), ds, &idx);
    Ok(match outcome.auc {
        Some(auc) => format!(
            "accuracy {:.4}  top5 {:.4}  auc {:.4}  ({} traces)",
            outcome.accuracy, outcome.top5, auc, ds.len()
        ),
        None => format!(
            "accuracy {:.4}  top5 {:.4}  ({} traces)",
            outcome.accuracy, outcome.top5, ds.len()
        ),
    })
}
