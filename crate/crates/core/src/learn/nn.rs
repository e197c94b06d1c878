//! From-scratch 1D convolutional network.
//!
//! Plain `Vec<f64>` tensors, hand-written forward and backward passes, Adam
//! updates, mini-batch training with early stopping on validation accuracy,
//! and a finite-difference gradient checker. Training is single-threaded and
//! deterministic for a given seed; parallelism lives one level up, across
//! folds and experiments.
//!
//! Architecture: repeated (conv, relu, max-pool) stages, a dense relu layer,
//! and a softmax output trained with cross-entropy.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::seed::derive_seed;

const MODEL_MAGIC: &[u8; 4] = b"OCNN";
const MODEL_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
}

/// Architecture and optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnSpec {
    pub input_len: usize,
    pub stages: Vec<ConvStage>,
    pub dense: usize,
    pub classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stop after this many epochs without a validation-accuracy
    /// improvement.
    pub patience: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad network spec: {0}")]
    BadSpec(String),
    #[error("input length {got} does not match spec input {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("class {class} has only {count} traces, need at least {needed}")]
    ClassTooSmall { class: u32, count: usize, needed: usize },
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("model file: {0}")]
    Io(#[from] io::Error),
    #[error("model file has bad magic or version")]
    BadModelFile,
}

impl CnnSpec {
    /// Scaled-down default for desk-size experiments.
    pub fn desk(input_len: usize, classes: usize) -> Self {
        CnnSpec {
            input_len,
            stages: vec![
                ConvStage { filters: 32, kernel: 16, pool: 4 },
                ConvStage { filters: 32, kernel: 8, pool: 4 },
            ],
            dense: 128,
            classes,
            learning_rate: 0.001,
            batch_size: 50,
            max_epochs: 40,
            patience: 3,
        }
    }

    /// Full-size configuration: three conv/pool pairs of 256 kernels with
    /// kernel sizes 16, 8, 4 and pool size 4, Adam at 0.001, batch 100.
    pub fn full(input_len: usize, classes: usize) -> Self {
        CnnSpec {
            input_len,
            stages: vec![
                ConvStage { filters: 256, kernel: 16, pool: 4 },
                ConvStage { filters: 256, kernel: 8, pool: 4 },
                ConvStage { filters: 256, kernel: 4, pool: 4 },
            ],
            dense: 128,
            classes,
            learning_rate: 0.001,
            batch_size: 100,
            max_epochs: 30,
            patience: 3,
        }
    }

    /// Per-stage (conv output length, pooled length).
    pub fn stage_lens(&self) -> Vec<(usize, usize)> {
        let mut lens = Vec::with_capacity(self.stages.len());
        let mut len = self.input_len;
        for st in &self.stages {
            let conv_len = len.saturating_sub(st.kernel - 1);
            let pool_len = conv_len / st.pool.max(1);
            lens.push((conv_len, pool_len));
            len = pool_len;
        }
        lens
    }

    /// Flattened width feeding the dense layer.
    pub fn flat_len(&self) -> usize {
        match self.stages.last() {
            Some(st) => st.filters * self.stage_lens().last().unwrap().1,
            None => self.input_len,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.input_len == 0 {
            return Err(TrainError::BadSpec("zero input length".into()));
        }
        if self.classes < 2 {
            return Err(TrainError::BadSpec("need at least two classes".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.filters == 0 || st.kernel == 0 || st.pool == 0 {
                return Err(TrainError::BadSpec(format!("stage {i} has a zero dimension")));
            }
        }
        for (i, (conv_len, pool_len)) in self.stage_lens().iter().enumerate() {
            if *conv_len == 0 || *pool_len == 0 {
                return Err(TrainError::BadSpec(format!(
                    "stage {i} reduces the feature map to zero length"
                )));
            }
        }
        if self.dense == 0 && !self.stages.is_empty() {
            return Err(TrainError::BadSpec("zero dense width".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::BadSpec("batch size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        let mut in_ch = 1;
        for st in &self.stages {
            count += st.filters * in_ch * st.kernel + st.filters;
            in_ch = st.filters;
        }
        if self.dense > 0 {
            count += self.dense * self.flat_len() + self.dense;
            count += self.classes * self.dense + self.classes;
        } else {
            count += self.classes * self.flat_len() + self.classes;
        }
        count
    }
}

/// One parameter (or gradient, or moment) set shaped like the network.
#[derive(Clone, Debug)]
struct ParamSet {
    conv_w: Vec<Vec<f64>>,
    conv_b: Vec<Vec<f64>>,
    dense_w: Vec<f64>,
    dense_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

impl ParamSet {
    fn zeros(spec: &CnnSpec) -> Self {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut in_ch = 1;
        for st in &spec.stages {
            conv_w.push(vec![0.0; st.filters * in_ch * st.kernel]);
            conv_b.push(vec![0.0; st.filters]);
            in_ch = st.filters;
        }
        let (dense_in, dense_out) = (spec.flat_len(), spec.dense);
        let (dense_w, dense_b, out_w, out_b) = if dense_out > 0 {
            (
                vec![0.0; dense_out * dense_in],
                vec![0.0; dense_out],
                vec![0.0; spec.classes * dense_out],
                vec![0.0; spec.classes],
            )
        } else {
            (Vec::new(), Vec::new(), vec![0.0; spec.classes * dense_in], vec![0.0; spec.classes])
        };
        ParamSet { conv_w, conv_b, dense_w, dense_b, out_w, out_b }
    }

    fn zero(&mut self) {
        for b in self.buffers_mut() {
            b.fill(0.0);
        }
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut v: Vec<&Vec<f64>> = Vec::new();
        v.extend(self.conv_w.iter());
        v.extend(self.conv_b.iter());
        v.push(&self.dense_w);
        v.push(&self.dense_b);
        v.push(&self.out_w);
        v.push(&self.out_b);
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = Vec::new();
        v.extend(self.conv_w.iter_mut());
        v.extend(self.conv_b.iter_mut());
        v.push(&mut self.dense_w);
        v.push(&mut self.dense_b);
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }
}

/// Trained (or training) network: weights plus Adam moment state.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: CnnSpec,
    params: ParamSet,
    adam_m: ParamSet,
    adam_v: ParamSet,
    step: u64,
}

struct Activations {
    // Per stage: input map, pre-relu conv output, pooled output, argmaxes.
    stage_in: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
    pool_arg: Vec<Vec<usize>>,
    dense_pre: Vec<f64>,
    dense_act: Vec<f64>,
    probs: Vec<f64>,
}

impl Model {
    /// He-style normal initialization, biases zero.
    pub fn init(spec: &CnnSpec, seed: u64) -> Result<Self, TrainError> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::zeros(spec);
        let mut in_ch = 1;
        for (s, st) in spec.stages.iter().enumerate() {
            let std = (2.0 / (in_ch * st.kernel) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for w in params.conv_w[s].iter_mut() {
                *w = dist.sample(&mut rng);
            }
            in_ch = st.filters;
        }
        if spec.dense > 0 {
            let dist = Normal::new(0.0, (2.0 / spec.flat_len() as f64).sqrt()).unwrap();
            for w in params.dense_w.iter_mut() {
                *w = dist.sample(&mut rng);
            }
            let dist = Normal::new(0.0, (2.0 / spec.dense as f64).sqrt()).unwrap();
            for w in params.out_w.iter_mut() {
                *w = dist.sample(&mut rng);
            }
        } else {
            let dist = Normal::new(0.0, (2.0 / spec.flat_len() as f64).sqrt()).unwrap();
            for w in params.out_w.iter_mut() {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(Model {
            spec: spec.clone(),
            adam_m: ParamSet::zeros(spec),
            adam_v: ParamSet::zeros(spec),
            params,
            step: 0,
        })
    }

    /// A-posteriori class probabilities for one input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, TrainError> {
        if input.len() != self.spec.input_len {
            return Err(TrainError::LengthMismatch {
                expected: self.spec.input_len,
                got: input.len(),
            });
        }
        Ok(self.forward_full(input).probs)
    }

    pub fn forward_f32(&self, input: &[f32]) -> Result<Vec<f64>, TrainError> {
        let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        self.forward(&x)
    }

    fn forward_full(&self, input: &[f64]) -> Activations {
        let spec = &self.spec;
        let lens = spec.stage_lens();
        let mut stage_in = Vec::with_capacity(spec.stages.len());
        let mut conv_pre = Vec::with_capacity(spec.stages.len());
        let mut pooled_all = Vec::with_capacity(spec.stages.len());
        let mut pool_arg = Vec::with_capacity(spec.stages.len());

        let mut current = input.to_vec();
        let mut in_ch = 1;
        let mut in_len = spec.input_len;
        for (s, st) in spec.stages.iter().enumerate() {
            let (conv_len, pool_len) = lens[s];
            let w = &self.params.conv_w[s];
            let b = &self.params.conv_b[s];

            let mut pre = vec![0.0f64; st.filters * conv_len];
            for f in 0..st.filters {
                let out_row = &mut pre[f * conv_len..(f + 1) * conv_len];
                out_row.fill(b[f]);
                for c in 0..in_ch {
                    let w_row = &w[(f * in_ch + c) * st.kernel..(f * in_ch + c + 1) * st.kernel];
                    let in_row = &current[c * in_len..(c + 1) * in_len];
                    for (j, out) in out_row.iter_mut().enumerate() {
                        let window = &in_row[j..j + st.kernel];
                        let mut acc = 0.0;
                        for k in 0..st.kernel {
                            acc += w_row[k] * window[k];
                        }
                        *out += acc;
                    }
                }
            }

            // relu + max-pool in one pass, remembering argmax positions.
            let mut pooled = vec![0.0f64; st.filters * pool_len];
            let mut args = vec![0usize; st.filters * pool_len];
            for f in 0..st.filters {
                let row = &pre[f * conv_len..(f + 1) * conv_len];
                for p in 0..pool_len {
                    let lo = p * st.pool;
                    let hi = (lo + st.pool).min(conv_len);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = lo;
                    for (j, &v) in row[lo..hi].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_at = lo + j;
                        }
                    }
                    pooled[f * pool_len + p] = best.max(0.0);
                    args[f * pool_len + p] = best_at;
                }
            }

            stage_in.push(current);
            conv_pre.push(pre);
            pool_arg.push(args);
            current = pooled.clone();
            pooled_all.push(pooled);
            in_ch = st.filters;
            in_len = pool_len;
        }

        let flat = current;
        let (dense_pre, dense_act, logits) = if spec.dense > 0 {
            let mut pre = self.params.dense_b.clone();
            for (o, out) in pre.iter_mut().enumerate() {
                let row = &self.params.dense_w[o * flat.len()..(o + 1) * flat.len()];
                *out += dot(row, &flat);
            }
            let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let mut logits = self.params.out_b.clone();
            for (o, out) in logits.iter_mut().enumerate() {
                let row = &self.params.out_w[o * act.len()..(o + 1) * act.len()];
                *out += dot(row, &act);
            }
            (pre, act, logits)
        } else {
            let mut logits = self.params.out_b.clone();
            for (o, out) in logits.iter_mut().enumerate() {
                let row = &self.params.out_w[o * flat.len()..(o + 1) * flat.len()];
                *out += dot(row, &flat);
            }
            (Vec::new(), flat.clone(), logits)
        };

        let probs = softmax(&logits);
        // The flattened map is pooled output of the last stage (or the raw
        // input); keep it in dense_act's place when there is no dense layer.
        Activations { stage_in, conv_pre, pooled: pooled_all, pool_arg, dense_pre, dense_act, probs }
    }

    /// Cross-entropy loss and gradient accumulation for one example.
    fn backward(&self, input: &[f64], label: u32, grads: &mut ParamSet) -> f64 {
        let acts = self.forward_full(input);
        let spec = &self.spec;
        let loss = -(acts.probs[label as usize].max(1e-300)).ln();

        // Softmax + cross-entropy combined gradient.
        let mut dlogits = acts.probs.clone();
        dlogits[label as usize] -= 1.0;

        let flat: &[f64] = if spec.stages.is_empty() {
            input
        } else {
            spec_last_pooled(&acts)
        };

        let mut dflat = vec![0.0f64; flat.len()];
        if spec.dense > 0 {
            let act = &acts.dense_act;
            let mut ddense_act = vec![0.0f64; act.len()];
            for (o, &dl) in dlogits.iter().enumerate() {
                let w_row = &self.params.out_w[o * act.len()..(o + 1) * act.len()];
                let g_row = &mut grads.out_w[o * act.len()..(o + 1) * act.len()];
                for i in 0..act.len() {
                    g_row[i] += dl * act[i];
                    ddense_act[i] += dl * w_row[i];
                }
                grads.out_b[o] += dl;
            }
            for (o, da) in ddense_act.iter().enumerate() {
                if acts.dense_pre[o] <= 0.0 {
                    continue;
                }
                let w_row = &self.params.dense_w[o * flat.len()..(o + 1) * flat.len()];
                let g_row = &mut grads.dense_w[o * flat.len()..(o + 1) * flat.len()];
                for i in 0..flat.len() {
                    g_row[i] += da * flat[i];
                    dflat[i] += da * w_row[i];
                }
                grads.dense_b[o] += da;
            }
        } else {
            for (o, &dl) in dlogits.iter().enumerate() {
                let g_row = &mut grads.out_w[o * flat.len()..(o + 1) * flat.len()];
                let w_row = &self.params.out_w[o * flat.len()..(o + 1) * flat.len()];
                for i in 0..flat.len() {
                    g_row[i] += dl * flat[i];
                    dflat[i] += dl * w_row[i];
                }
                grads.out_b[o] += dl;
            }
        }

        // Walk conv stages backwards routing gradients through pool argmaxes
        // and relu.
        let lens = spec.stage_lens();
        let mut dpooled = dflat;
        for s in (0..spec.stages.len()).rev() {
            let st = &spec.stages[s];
            let (conv_len, pool_len) = lens[s];
            let in_ch = if s == 0 { 1 } else { spec.stages[s - 1].filters };
            let in_len = if s == 0 { spec.input_len } else { lens[s - 1].1 };
            let stage_input = &acts.stage_in[s];
            let pre = &acts.conv_pre[s];
            let args = &acts.pool_arg[s];

            let mut dpre = vec![0.0f64; st.filters * conv_len];
            for f in 0..st.filters {
                for p in 0..pool_len {
                    let g = dpooled[f * pool_len + p];
                    if g == 0.0 {
                        continue;
                    }
                    let j = args[f * pool_len + p];
                    // relu': the pooled value was max(pre, 0); gradient flows
                    // only when the winning pre-activation is positive.
                    if pre[f * conv_len + j] > 0.0 {
                        dpre[f * conv_len + j] += g;
                    }
                }
            }

            let mut dinput = vec![0.0f64; in_ch * in_len];
            for f in 0..st.filters {
                let dpre_row = &dpre[f * conv_len..(f + 1) * conv_len];
                let mut bias_acc = 0.0;
                for c in 0..in_ch {
                    let w_row = &self.params.conv_w[s]
                        [(f * in_ch + c) * st.kernel..(f * in_ch + c + 1) * st.kernel];
                    let g_row = &mut grads.conv_w[s]
                        [(f * in_ch + c) * st.kernel..(f * in_ch + c + 1) * st.kernel];
                    let in_row = &stage_input[c * in_len..(c + 1) * in_len];
                    let din_row = &mut dinput[c * in_len..(c + 1) * in_len];
                    for (j, &g) in dpre_row.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        for k in 0..st.kernel {
                            g_row[k] += g * in_row[j + k];
                            din_row[j + k] += g * w_row[k];
                        }
                    }
                }
                for &g in dpre_row {
                    bias_acc += g;
                }
                grads.conv_b[s][f] += bias_acc;
            }
            dpooled = dinput;
        }
        loss
    }

    fn adam_step(&mut self, grads: &ParamSet, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let p = self.params.buffers_mut();
        let m = self.adam_m.buffers_mut();
        let v = self.adam_v.buffers_mut();
        let g = grads.buffers();
        for (((pb, mb), vb), gb) in p.into_iter().zip(m).zip(v).zip(g) {
            for i in 0..pb.len() {
                let grad = gb[i];
                mb[i] = ADAM_BETA1 * mb[i] + (1.0 - ADAM_BETA1) * grad;
                vb[i] = ADAM_BETA2 * vb[i] + (1.0 - ADAM_BETA2) * grad * grad;
                let mhat = mb[i] / bc1;
                let vhat = vb[i] / bc2;
                pb[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        let spec = &self.spec;
        for v in [spec.input_len, spec.classes, spec.dense, spec.stages.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for st in &spec.stages {
            for v in [st.filters, st.kernel, st.pool] {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
        }
        for buf in self.params.buffers() {
            for &x in buf.iter() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads shapes and weights. Optimizer hyperparameters are not stored;
    /// the loaded model is for inference (weights are f32 in the file).
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut m4 = [0u8; 4];
        r.read_exact(&mut m4)?;
        if &m4 != MODEL_MAGIC {
            return Err(TrainError::BadModelFile);
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, TrainError> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        if read_u32(&mut r)? != MODEL_VERSION {
            return Err(TrainError::BadModelFile);
        }
        let input_len = read_u32(&mut r)? as usize;
        let classes = read_u32(&mut r)? as usize;
        let dense = read_u32(&mut r)? as usize;
        let n_stages = read_u32(&mut r)? as usize;
        let mut stages = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            let filters = read_u32(&mut r)? as usize;
            let kernel = read_u32(&mut r)? as usize;
            let pool = read_u32(&mut r)? as usize;
            stages.push(ConvStage { filters, kernel, pool });
        }
        let spec = CnnSpec {
            input_len,
            stages,
            dense,
            classes,
            learning_rate: 0.001,
            batch_size: 1,
            max_epochs: 1,
            patience: 1,
        };
        spec.validate()?;
        let mut model = Model {
            spec: spec.clone(),
            params: ParamSet::zeros(&spec),
            adam_m: ParamSet::zeros(&spec),
            adam_v: ParamSet::zeros(&spec),
            step: 0,
        };
        let mut f4 = [0u8; 4];
        for buf in model.params.buffers_mut() {
            for x in buf.iter_mut() {
                r.read_exact(&mut f4)?;
                *x = f32::from_le_bytes(f4) as f64;
            }
        }
        Ok(model)
    }
}

fn spec_last_pooled(acts: &Activations) -> &[f64] {
    acts.pooled.last().map(|v| v.as_slice()).unwrap_or(&[])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-epoch training diagnostics.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// One labeled example: feature vector and class id.
pub type Example = (Vec<f32>, u32);

/// Mini-batch Adam training with cross-entropy loss and early stopping on
/// validation accuracy. Weights from the best validation epoch are kept.
/// Deterministic given the seed.
pub fn train(
    train_set: &[&Example],
    val_set: &[&Example],
    spec: &CnnSpec,
    seed: u64,
) -> Result<(Model, TrainLog), TrainError> {
    spec.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    for (x, _) in train_set.iter().chain(val_set.iter()) {
        if x.len() != spec.input_len {
            return Err(TrainError::LengthMismatch { expected: spec.input_len, got: x.len() });
        }
    }

    let mut model = Model::init(spec, derive_seed(seed, "cnn-init", &[]))?;
    // Zero-initialized output layer and slightly positive hidden biases:
    // the output layer aligns itself with whatever features exist before any
    // gradient reaches the feature layers, which keeps early updates from
    // driving relu units dead on low-variance inputs.
    model.params.out_w.fill(0.0);
    model.params.out_b.fill(0.0);
    for b in model.params.conv_b.iter_mut() {
        b.fill(0.01);
    }
    model.params.dense_b.fill(0.01);

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "cnn-shuffle", &[]));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = ParamSet::zeros(spec);

    let mut log = TrainLog { epochs: Vec::new(), best_epoch: 0, best_val_accuracy: -1.0 };
    let mut best_params: Option<ParamSet> = None;

    for epoch in 0..spec.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(spec.batch_size).enumerate() {
            grads.zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (x, y) = train_set[i];
                let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
                batch_loss += model.backward(&x64, *y, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for buf in grads.buffers_mut() {
                for g in buf.iter_mut() {
                    *g *= scale;
                }
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(TrainError::NanLoss { epoch, batch: batch_no });
            }
            model.adam_step(&grads, spec.learning_rate);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_loss /= train_set.len() as f64;

        let mut correct = 0usize;
        for (x, y) in val_set {
            let probs = model.forward_f32(x)?;
            if argmax_tie_low(&probs) == *y {
                correct += 1;
            }
        }
        let val_accuracy = correct as f64 / val_set.len() as f64;
        log.epochs.push(EpochStats { train_loss: epoch_loss, val_accuracy });

        if val_accuracy > log.best_val_accuracy {
            log.best_val_accuracy = val_accuracy;
            log.best_epoch = epoch;
            best_params = Some(model.params.clone());
        } else if epoch - log.best_epoch >= spec.patience {
            break;
        }
    }

    if let Some(p) = best_params {
        model.params = p;
    }
    Ok((model, log))
}

/// Argmax with ties broken towards the lower class id.
pub fn argmax_tie_low(probs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best as u32
}

/// Compares analytic gradients against central finite differences (step
/// 1e-5) over every parameter; returns the maximum relative error. Meant for
/// small specs (≤ ~10³ parameters), double precision.
pub fn grad_check(spec: &CnnSpec, seed: u64) -> Result<f64, TrainError> {
    spec.validate()?;
    let mut model = Model::init(spec, derive_seed(seed, "gradcheck-init", &[]))?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "gradcheck-input", &[]));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let input: Vec<f64> = (0..spec.input_len).map(|_| normal.sample(&mut rng)).collect();
    let label = rng.gen_range(0..spec.classes) as u32;

    let mut analytic = ParamSet::zeros(spec);
    model.backward(&input, label, &mut analytic);

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let n_buffers = model.params.buffers().len();
    for b in 0..n_buffers {
        let len = model.params.buffers()[b].len();
        for i in 0..len {
            let orig = model.params.buffers()[b][i];
            model.params.buffers_mut()[b][i] = orig + h;
            let up = loss_of(&model, &input, label);
            model.params.buffers_mut()[b][i] = orig - h;
            let down = loss_of(&model, &input, label);
            model.params.buffers_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.buffers()[b][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn loss_of(model: &Model, input: &[f64], label: u32) -> f64 {
    let probs = model.forward_full(input).probs;
    -(probs[label as usize].max(1e-300)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> CnnSpec {
        CnnSpec {
            input_len: 4,
            stages: vec![ConvStage { filters: 1, kernel: 2, pool: 2 }],
            dense: 2,
            classes: 2,
            learning_rate: 0.001,
            batch_size: 2,
            max_epochs: 5,
            patience: 2,
        }
    }

    #[test]
    fn zero_weight_model_is_uniform() {
        let spec = CnnSpec::desk(64, 5);
        let mut model = Model::init(&spec, 1).unwrap();
        for buf in model.params.buffers_mut() {
            buf.fill(0.0);
        }
        let probs = model.forward(&vec![0.3; 64]).unwrap();
        for p in probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let spec = CnnSpec::desk(128, 7);
        let model = Model::init(&spec, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x: Vec<f64> = (0..128).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let probs = model.forward(&x).unwrap();
            assert!(probs.iter().all(|&p| p >= 0.0));
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_matches_hand_computation() {
        // input [1,2,3,4]; conv w=[2,1] b=-1 -> pre [2*1+1*2-1, 2*2+1*3-1,
        // 2*3+1*4-1] = [3,6,9]; relu same; pool 2 over [3,6] -> 6;
        // dense w=[[0.5],[-0.25]] b=[0,2] -> pre [3, 0.5]; relu -> [3, 0.5];
        // out = identity -> logits [3, 0.5];
        // softmax = (e^3, e^0.5) / (e^3 + e^0.5).
        let spec = tiny_spec();
        let mut model = Model::init(&spec, 0).unwrap();
        model.params.conv_w[0] = vec![2.0, 1.0];
        model.params.conv_b[0] = vec![-1.0];
        model.params.dense_w = vec![0.5, -0.25];
        model.params.dense_b = vec![0.0, 2.0];
        model.params.out_w = vec![1.0, 0.0, 0.0, 1.0];
        model.params.out_b = vec![0.0, 0.0];
        let probs = model.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let e3 = 3f64.exp();
        let eh = 0.5f64.exp();
        assert!((probs[0] - e3 / (e3 + eh)).abs() < 1e-12);
        assert!((probs[1] - eh / (e3 + eh)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let model = Model::init(&tiny_spec(), 1).unwrap();
        assert!(matches!(
            model.forward(&[1.0, 2.0]),
            Err(TrainError::LengthMismatch { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn grad_check_dense_only() {
        let spec = CnnSpec {
            input_len: 12,
            stages: vec![],
            dense: 0,
            classes: 3,
            learning_rate: 0.001,
            batch_size: 1,
            max_epochs: 1,
            patience: 1,
        };
        let err = grad_check(&spec, 7).unwrap();
        assert!(err < 1e-6, "dense-only gradient error {err}");
    }

    #[test]
    fn grad_check_full_stack() {
        let spec = CnnSpec {
            input_len: 64,
            stages: vec![
                ConvStage { filters: 2, kernel: 5, pool: 2 },
                ConvStage { filters: 3, kernel: 4, pool: 2 },
            ],
            dense: 8,
            classes: 3,
            learning_rate: 0.001,
            batch_size: 1,
            max_epochs: 1,
            patience: 1,
        };
        assert!(spec.param_count() <= 1000, "spec too large: {}", spec.param_count());
        let err = grad_check(&spec, 11).unwrap();
        assert!(err < 1e-4, "full-stack gradient error {err}");
    }

    #[test]
    fn zero_input_zero_weights_has_zero_hidden_gradients() {
        let spec = tiny_spec();
        let mut model = Model::init(&spec, 1).unwrap();
        for buf in model.params.buffers_mut() {
            buf.fill(0.0);
        }
        let mut grads = ParamSet::zeros(&spec);
        model.backward(&[0.0; 4], 0, &mut grads);
        // Everything below the output bias sees zero activations and zero
        // upstream weights: analytic gradients are exactly zero.
        assert!(grads.conv_w[0].iter().all(|&g| g == 0.0));
        assert!(grads.conv_b[0].iter().all(|&g| g == 0.0));
        assert!(grads.dense_w.iter().all(|&g| g == 0.0));
        assert!(grads.dense_b.iter().all(|&g| g == 0.0));
        assert!(grads.out_w.iter().all(|&g| g == 0.0));
        // Output biases do receive the softmax gradient.
        assert!(grads.out_b.iter().any(|&g| g != 0.0));
    }

    fn separable_examples(n_per_class: usize, len: usize) -> Vec<Example> {
        let mut out = Vec::new();
        for i in 0..n_per_class {
            let wiggle = (i % 7) as f32 * 1e-3;
            out.push((vec![wiggle; len], 0));
            out.push((vec![1.0 + wiggle; len], 1));
        }
        out
    }

    #[test]
    fn separable_classes_reach_perfect_validation() {
        let examples = separable_examples(12, 32);
        let spec = CnnSpec {
            input_len: 32,
            stages: vec![ConvStage { filters: 4, kernel: 4, pool: 2 }],
            dense: 8,
            classes: 2,
            learning_rate: 0.05,
            batch_size: 2,
            max_epochs: 5,
            patience: 5,
        };
        let train_refs: Vec<&Example> = examples.iter().take(16).collect();
        let val_refs: Vec<&Example> = examples.iter().skip(16).collect();
        let (_, log) = train(&train_refs, &val_refs, &spec, 5).unwrap();
        assert!(
            log.epochs.iter().any(|e| e.val_accuracy == 1.0),
            "never reached 100% within five epochs: {:?}",
            log.epochs
        );
    }

    #[test]
    fn training_loss_decreases_on_separable_data() {
        let examples = separable_examples(12, 32);
        let spec = CnnSpec {
            input_len: 32,
            stages: vec![ConvStage { filters: 4, kernel: 4, pool: 2 }],
            dense: 8,
            classes: 2,
            learning_rate: 0.01,
            batch_size: 4,
            max_epochs: 4,
            patience: 10,
        };
        let train_refs: Vec<&Example> = examples.iter().take(16).collect();
        let val_refs: Vec<&Example> = examples.iter().skip(16).collect();
        let (_, log) = train(&train_refs, &val_refs, &spec, 5).unwrap();
        assert!(log.epochs[3].train_loss < log.epochs[0].train_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let examples = separable_examples(8, 16);
        let spec = CnnSpec {
            input_len: 16,
            stages: vec![ConvStage { filters: 2, kernel: 3, pool: 2 }],
            dense: 4,
            classes: 2,
            learning_rate: 0.005,
            batch_size: 4,
            max_epochs: 3,
            patience: 5,
        };
        let train_refs: Vec<&Example> = examples.iter().take(12).collect();
        let val_refs: Vec<&Example> = examples.iter().skip(12).collect();
        let (m1, _) = train(&train_refs, &val_refs, &spec, 9).unwrap();
        let (m2, _) = train(&train_refs, &val_refs, &spec, 9).unwrap();
        for (a, b) in m1.params.buffers().iter().zip(m2.params.buffers().iter()) {
            assert_eq!(*a, *b, "weights differ between identical runs");
        }
    }

    #[test]
    fn model_file_round_trip_preserves_predictions() {
        let spec = tiny_spec();
        let model = Model::init(&spec, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ocnn");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.spec.stages, spec.stages);
        let x = [0.5, -1.0, 2.0, 0.25];
        let a = model.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pa - pb).abs() < 1e-4, "f32 round trip drifted: {pa} vs {pb}");
        }
    }

    #[test]
    fn spec_rejecting_zero_feature_maps() {
        let spec = CnnSpec {
            input_len: 10,
            stages: vec![ConvStage { filters: 2, kernel: 8, pool: 4 }],
            dense: 4,
            classes: 2,
            learning_rate: 0.001,
            batch_size: 1,
            max_epochs: 1,
            patience: 1,
        };
        assert!(spec.validate().is_err());
    }
}
