//! Training loop: Adam with step-decayed learning rate, per-sample
//! augmentation, checkpointing with bit-exact resume, and evaluation.
//!
//! Resume needs no saved RNG state: every random draw during training is
//! derived functionally from (run seed, epoch, sample id). Parameters and
//! optimizer moments are passed through f32 at each epoch boundary so the
//! f32 on-disk checkpoint represents the live state losslessly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    load_named, save_named, AutodiffError, CheckpointError, Tape, Tensor,
};
use crate::data::{batcher, derive_seed, DataError, LabeledCloud};
use crate::geometry::{
    GeometryError, NonParamKind, NonParamTransform, TransformDistribution,
    sample_param_transform,
};
use crate::losses::{assemble_total, LossBreakdown, LossWeights, TaskBranch};
use crate::network::{
    forward_single, forward_two_branch, predicted_class, ForwardOptions, ForwardPass,
    ModelDims, ModelParams, NetworkError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad train config: {0}")]
    BadConfig(String),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { op } => TrainError::NonFinite(op.to_string()),
            other => TrainError::Network(NetworkError::Autodiff(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full model.
    None,
    /// FPS coordinates used directly as anchors; no anchor learning.
    NoAnchor,
    /// Local feature alignment weight forced to zero.
    NoLocal,
    /// Global descriptor alignment weight forced to zero.
    NoGlobal,
    /// Single branch, no augmentation, task loss only.
    Baseline,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoAnchor => "no_anchor",
            Ablation::NoLocal => "no_local",
            Ablation::NoGlobal => "no_global",
            Ablation::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Ablation::None),
            "no_anchor" => Ok(Ablation::NoAnchor),
            "no_local" => Ok(Ablation::NoLocal),
            "no_global" => Ok(Ablation::NoGlobal),
            "baseline" => Ok(Ablation::Baseline),
            _ => Err(format!("unknown ablation `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub dims: ModelDims,
    pub augment: TransformDistribution,
    /// Keep ratio of the non-parameterized augmentation (random point drop).
    pub drop_keep_ratio: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub task_branch: TaskBranch,
    pub normalize_local: bool,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 0.001,
            lr_decay_every: 20,
            lr_decay_factor: 0.5,
            weight_decay: 0.0001,
            weights: LossWeights::default(),
            dims: ModelDims::default(),
            augment: TransformDistribution {
                rot_x_half: 0.3,
                rot_y_half: 0.3,
                rot_z_half: std::f64::consts::PI,
                scale_min: 0.8,
                scale_max: 1.25,
                translation_max: 0.1,
            },
            drop_keep_ratio: 0.85,
            seed: 0,
            ablation: Ablation::None,
            task_branch: TaskBranch::Both,
            normalize_local: true,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::BadConfig(format!("bad lr {}", self.lr)));
        }
        if self.lr_decay_every == 0 {
            return Err(TrainError::BadConfig("lr_decay_every must be >= 1".into()));
        }
        if !(0.0 < self.drop_keep_ratio && self.drop_keep_ratio <= 1.0) {
            return Err(TrainError::BadConfig(format!(
                "drop_keep_ratio must be in (0, 1], got {}",
                self.drop_keep_ratio
            )));
        }
        Ok(())
    }

    /// Loss weights with ablation switches applied as literal zeroes.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.ablation {
            Ablation::NoLocal => w.beta = 0.0,
            Ablation::NoGlobal => w.gamma = 0.0,
            _ => {}
        }
        w
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            no_anchor_learning: self.ablation == Ablation::NoAnchor,
        }
    }
}

/// Learning rate after step decay: `lr * factor^(epoch / every)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr * config.lr_decay_factor.powi((epoch / config.lr_decay_every) as i32)
}

/// Model parameters plus Adam state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub epoch: usize,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Self {
        let params = ModelParams::init(config.dims.clone(), config.seed);
        let m = (0..params.len())
            .map(|i| {
                let t = params.tensor(i);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            params,
            m,
            v,
            step: 0,
            epoch: 0,
        }
    }

    /// Round parameters and moments through f32 so saved checkpoints are
    /// lossless snapshots of the live state.
    pub fn quantize_f32(&mut self) {
        self.params.quantize_f32();
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.quantize_f32();
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update with coupled L2 weight decay. `grads` is parallel to the
/// parameter list; missing gradients count as zero.
pub fn adam_step(
    state: &mut TrainState,
    grads: &[Tensor],
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), state.params.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..grads.len() {
        if !grads[i].is_finite() {
            return Err(TrainError::NonFinite(format!(
                "gradient of {}",
                state.params.names()[i]
            )));
        }
        let p = state.params.tensor_mut(i);
        let pd = p.data_mut();
        let md = state.m[i].data_mut();
        let vd = state.v[i].data_mut();
        let gd = grads[i].data();
        for k in 0..pd.len() {
            let g = gd[k] + weight_decay * pd[k];
            md[k] = ADAM_BETA1 * md[k] + (1.0 - ADAM_BETA1) * g;
            vd[k] = ADAM_BETA2 * vd[k] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = md[k] / bc1;
            let vhat = vd[k] / bc2;
            pd[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub mean: LossBreakdown,
    pub lr: f64,
    pub s_row_err: f64,
    pub attn_sum_err: f64,
}

/// One pass over the training split. Gradients are averaged within each
/// batch; augmentations are freshly sampled per (epoch, sample).
pub fn train_epoch(
    state: &mut TrainState,
    config: &TrainConfig,
    train: &[LabeledCloud],
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    let lr = lr_at_epoch(config, epoch);
    let weights = config.effective_weights();
    let opts = config.forward_options();
    let batches = batcher(train.len(), config.batch_size, config.seed, epoch);

    let mut sum = LossBreakdown {
        task: 0.0,
        cd: 0.0,
        local: 0.0,
        global: 0.0,
        total: 0.0,
    };
    let mut n_samples = 0usize;
    let mut s_row_err = 0.0_f64;
    let mut attn_sum_err = 0.0_f64;

    for batch in &batches {
        let mut acc: Vec<Tensor> = (0..state.params.len())
            .map(|i| {
                let t = state.params.tensor(i);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect();
        for &si in batch {
            let sample = &train[si];
            enum Fwd {
                Single(crate::network::SingleOutputs),
                Two(Box<crate::network::ForwardOutputs>),
            }
            let mut tape = Tape::new();
            let (fwd, param_vars) = {
                let mut pass = ForwardPass::new(&mut tape, &state.params, true)?;
                let fwd = if config.ablation == Ablation::Baseline {
                    Fwd::Single(forward_single(&mut pass, &sample.cloud, opts)?)
                } else {
                    let base =
                        derive_seed(&[config.seed, epoch as u64, fnv1a(&sample.sample_id)]);
                    let t1 = sample_param_transform(&config.augment, derive_seed(&[base, 1]))?;
                    let t2 = NonParamTransform {
                        kind: NonParamKind::DropRandom {
                            keep_ratio: config.drop_keep_ratio,
                        },
                        seed: derive_seed(&[base, 2]),
                    };
                    Fwd::Two(Box::new(forward_two_branch(
                        &mut pass,
                        &sample.cloud,
                        &t1,
                        &t2,
                        opts,
                    )?))
                };
                (fwd, pass.param_vars().to_vec())
            };
            let (total, breakdown) = match fwd {
                Fwd::Single(out) => {
                    s_row_err = s_row_err.max(out.s_row_err);
                    attn_sum_err = attn_sum_err.max(out.attn_sum_err);
                    let task = tape.cross_entropy(out.logits, &[sample.label])?;
                    let task_v = tape.value(task).item();
                    (
                        task,
                        LossBreakdown {
                            task: task_v,
                            cd: 0.0,
                            local: 0.0,
                            global: 0.0,
                            total: task_v,
                        },
                    )
                }
                Fwd::Two(out) => {
                    s_row_err = s_row_err.max(out.s_row_err);
                    attn_sum_err = attn_sum_err.max(out.attn_sum_err);
                    let loss = assemble_total(
                        &mut tape,
                        &out,
                        &sample.cloud,
                        sample.label,
                        &weights,
                        config.task_branch,
                        config.normalize_local,
                    )?;
                    (loss.total, loss.breakdown)
                }
            };
            if !tape.value(total).item().is_finite() {
                return Err(TrainError::NonFinite("total loss".into()));
            }
            sum.task += breakdown.task;
            sum.cd += breakdown.cd;
            sum.local += breakdown.local;
            sum.global += breakdown.global;
            sum.total += breakdown.total;
            n_samples += 1;

            let grads = tape.backward(total)?;
            for (i, &pv) in param_vars.iter().enumerate() {
                if let Some(g) = grads.get(pv) {
                    let a = acc[i].data_mut();
                    for (k, &gv) in g.data().iter().enumerate() {
                        a[k] += gv;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for t in &mut acc {
            for x in t.data_mut() {
                *x *= inv;
            }
        }
        if config.grad_clip > 0.0 {
            let norm_sq: f64 = acc
                .iter()
                .flat_map(|t| t.data())
                .map(|&g| g * g)
                .sum();
            let norm = norm_sq.sqrt();
            if norm > config.grad_clip {
                let scale = config.grad_clip / norm;
                for t in &mut acc {
                    for x in t.data_mut() {
                        *x *= scale;
                    }
                }
            }
        }
        adam_step(state, &acc, lr, config.weight_decay)?;
    }

    let k = n_samples.max(1) as f64;
    Ok(EpochStats {
        mean: LossBreakdown {
            task: sum.task / k,
            cd: sum.cd / k,
            local: sum.local / k,
            global: sum.global / k,
            total: sum.total / k,
        },
        lr,
        s_row_err,
        attn_sum_err,
    })
}

/// Accuracy plus the worst normalization deviations seen during evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalStats {
    pub correct: usize,
    pub total: usize,
    pub s_row_err: f64,
    pub attn_sum_err: f64,
}

impl EvalStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn merge(&mut self, other: &EvalStats) {
        self.correct += other.correct;
        self.total += other.total;
        self.s_row_err = self.s_row_err.max(other.s_row_err);
        self.attn_sum_err = self.attn_sum_err.max(other.attn_sum_err);
    }
}

fn eval_chunk(
    params: &ModelParams,
    samples: &[LabeledCloud],
    opts: ForwardOptions,
) -> Result<EvalStats, TrainError> {
    let mut stats = EvalStats {
        total: samples.len(),
        ..EvalStats::default()
    };
    for s in samples {
        let mut tape = Tape::new();
        let mut pass = ForwardPass::new(&mut tape, params, false)?;
        let out = forward_single(&mut pass, &s.cloud, opts)?;
        stats.s_row_err = stats.s_row_err.max(out.s_row_err);
        stats.attn_sum_err = stats.attn_sum_err.max(out.attn_sum_err);
        if predicted_class(tape.value(out.logits)) == s.label {
            stats.correct += 1;
        }
    }
    Ok(stats)
}

/// Worker count for evaluation, from `IOODG_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("IOODG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Classification accuracy of the single-branch forward over `samples`.
/// With multiple workers, contiguous chunks are evaluated in parallel and
/// reduced in fixed order, so the result is thread-count independent.
pub fn evaluate(
    params: &ModelParams,
    samples: &[LabeledCloud],
    opts: ForwardOptions,
) -> Result<f64, TrainError> {
    Ok(evaluate_detailed(params, samples, opts)?.accuracy())
}

/// As [`evaluate`], but also reports the worst selection-row and attention
/// normalization deviations observed.
pub fn evaluate_detailed(
    params: &ModelParams,
    samples: &[LabeledCloud],
    opts: ForwardOptions,
) -> Result<EvalStats, TrainError> {
    if samples.is_empty() {
        return Ok(EvalStats::default());
    }
    let threads = eval_threads().min(samples.len());
    if threads <= 1 {
        return eval_chunk(params, samples, opts);
    }
    let chunk = samples.len().div_ceil(threads);
    let results: Vec<Result<EvalStats, TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|c| scope.spawn(move || eval_chunk(params, c, opts)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut stats = EvalStats::default();
    for r in results {
        stats.merge(&r?);
    }
    Ok(stats)
}

const META_NAME: &str = "meta/state";
const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

/// Serialize parameters, Adam moments and the (step, epoch) counters.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let mut entries: Vec<(String, Tensor)> = state
        .params
        .entries()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    for (i, name) in state.params.names().to_vec().iter().enumerate() {
        entries.push((format!("{ADAM_M_PREFIX}{name}"), state.m[i].clone()));
        entries.push((format!("{ADAM_V_PREFIX}{name}"), state.v[i].clone()));
    }
    let meta = Tensor::from_vec(1, 2, vec![state.step as f64, state.epoch as f64]).unwrap();
    entries.push((META_NAME.to_string(), meta));
    save_named(path, &entries)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, dims: ModelDims) -> Result<TrainState, TrainError> {
    let entries = load_named(path)?;
    let mut state = TrainState::init(&TrainConfig {
        dims,
        ..TrainConfig::default()
    });
    let mut seen = vec![false; state.params.len()];
    for (name, t) in entries {
        if name == META_NAME {
            state.step = t.at(0, 0) as u64;
            state.epoch = t.at(0, 1) as usize;
        } else if let Some(base) = name.strip_prefix(ADAM_M_PREFIX) {
            let i = state.params.lookup(base)?;
            state.m[i] = t;
        } else if let Some(base) = name.strip_prefix(ADAM_V_PREFIX) {
            let i = state.params.lookup(base)?;
            state.v[i] = t;
        } else {
            let i = state.params.lookup(&name)?;
            if !state.params.tensor(i).same_shape(&t) {
                return Err(TrainError::BadConfig(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    state.params.tensor(i).shape()
                )));
            }
            seen[i] = true;
            state.params.set_tensor(&name, t)?;
        }
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(TrainError::BadConfig(format!(
            "checkpoint is missing parameter `{}`",
            state.params.names()[i]
        )));
    }
    Ok(state)
}

pub const METRICS_HEADER: &str =
    "epoch,lr,loss_task,loss_cd,loss_local,loss_global,loss_total,train_acc,test_acc";

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs_run: usize,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub final_loss: LossBreakdown,
    pub max_s_row_err: f64,
    pub max_attn_sum_err: f64,
}

/// Full training run. Writes one `metrics.csv` row per epoch and keeps the
/// latest checkpoint (plus a JSON copy of the config) in `out_dir`. Pass
/// `resume` to continue a previous run from its checkpoint; epochs already
/// trained are skipped and metrics are appended.
pub fn fit(
    config: &TrainConfig,
    train: &[LabeledCloud],
    test: &[LabeledCloud],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitReport, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::BadConfig("empty training split".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(path) => load_checkpoint(path, config.dims.clone())?,
        None => TrainState::init(config),
    };
    let start_epoch = state.epoch;
    if start_epoch > config.epochs {
        return Err(TrainError::BadConfig(format!(
            "checkpoint is at epoch {start_epoch}, beyond requested {}",
            config.epochs
        )));
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        fs::read_to_string(&metrics_path)?
    } else {
        format!("{METRICS_HEADER}\n")
    };
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(config).expect("config serializes"),
    )?;

    let opts = config.forward_options();
    let mut report = FitReport {
        epochs_run: 0,
        final_train_acc: 0.0,
        final_test_acc: 0.0,
        final_loss: LossBreakdown {
            task: 0.0,
            cd: 0.0,
            local: 0.0,
            global: 0.0,
            total: 0.0,
        },
        max_s_row_err: 0.0,
        max_attn_sum_err: 0.0,
    };
    let ckpt_path = out_dir.join("checkpoint.bin");
    for epoch in start_epoch..config.epochs {
        let stats = train_epoch(&mut state, config, train, epoch)?;
        state.quantize_f32();
        state.epoch = epoch + 1;
        let train_acc = evaluate(&state.params, train, opts)?;
        let test_acc = evaluate(&state.params, test, opts)?;
        metrics.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4}\n",
            epoch,
            stats.lr,
            stats.mean.task,
            stats.mean.cd,
            stats.mean.local,
            stats.mean.global,
            stats.mean.total,
            train_acc,
            test_acc
        ));
        fs::write(&metrics_path, &metrics)?;
        save_checkpoint(&state, &ckpt_path)?;
        report.epochs_run += 1;
        report.final_train_acc = train_acc;
        report.final_test_acc = test_acc;
        report.final_loss = stats.mean;
        report.max_s_row_err = report.max_s_row_err.max(stats.s_row_err);
        report.max_attn_sum_err = report.max_attn_sum_err.max(stats.attn_sum_err);
    }
    if report.epochs_run == 0 {
        // Resumed at the final epoch: still report current accuracy.
        report.final_train_acc = evaluate(&state.params, train, opts)?;
        report.final_test_acc = evaluate(&state.params, test, opts)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_benchmark, BenchmarkConfig, CorruptionSuite, ShapeKind};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            n_layers: 2,
            feat_dim: 8,
            hidden_dim: 8,
            attn_dim: 4,
            m_anchors: 4,
            n_classes: 2,
            radius_sq: 0.25,
            leaky_slope: 0.2,
        }
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            dims: tiny_dims(),
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_benchmark() -> (Vec<LabeledCloud>, Vec<LabeledCloud>) {
        let config = BenchmarkConfig {
            classes: vec![ShapeKind::Sphere, ShapeKind::Plane],
            train_per_class: 4,
            test_per_class: 2,
            points_per_cloud: 32,
            corruption: CorruptionSuite {
                crop_fraction: 0.3,
                jitter_sigma: 0.01,
                density_bias: 0.0,
                outlier_count: 0,
                outlier_range: 0.0,
            },
        };
        build_benchmark(&config, 11).unwrap()
    }

    #[test]
    fn adam_scalar_matches_hand_computation() {
        let config = TrainConfig {
            dims: tiny_dims(),
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&config);
        let before = state.params.tensor(0).at(0, 0);
        let mut grads: Vec<Tensor> = (0..state.params.len())
            .map(|i| {
                let t = state.params.tensor(i);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect();
        grads[0].set(0, 0, 1.0);
        adam_step(&mut state, &grads, 0.1, 0.0).unwrap();
        // t = 1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps).
        let expected = before - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((state.params.tensor(0).at(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_grads_zero_decay_is_noop() {
        let config = TrainConfig {
            dims: tiny_dims(),
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&config);
        let before = state.params.clone();
        let grads: Vec<Tensor> = (0..state.params.len())
            .map(|i| {
                let t = state.params.tensor(i);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect();
        adam_step(&mut state, &grads, 0.1, 0.0).unwrap();
        for (i, (name, t)) in before.entries().enumerate() {
            assert_eq!(t.data(), state.params.tensor(i).data(), "param {name}");
        }
    }

    #[test]
    fn adam_rejects_nonfinite_gradient() {
        let config = TrainConfig {
            dims: tiny_dims(),
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&config);
        let mut grads: Vec<Tensor> = (0..state.params.len())
            .map(|i| {
                let t = state.params.tensor(i);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect();
        grads[0].set(0, 0, f64::NAN);
        assert!(matches!(
            adam_step(&mut state, &grads, 0.1, 0.0),
            Err(TrainError::NonFinite(_))
        ));
    }

    #[test]
    fn lr_schedule_steps() {
        let config = TrainConfig {
            lr: 0.001,
            lr_decay_every: 20,
            lr_decay_factor: 0.5,
            ..tiny_config(1)
        };
        assert_eq!(lr_at_epoch(&config, 0), 0.001);
        assert_eq!(lr_at_epoch(&config, 19), 0.001);
        assert_eq!(lr_at_epoch(&config, 20), 0.0005);
        assert_eq!(lr_at_epoch(&config, 40), 0.00025);
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let (train, test) = tiny_benchmark();
        let config = tiny_config(25);

        let dir_a = tempfile::tempdir().unwrap();
        let a = fit(&config, &train, &test, dir_a.path(), None).unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let b = fit(&config, &train, &test, dir_b.path(), None).unwrap();

        let bytes_a = std::fs::read(dir_a.path().join("checkpoint.bin")).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join("checkpoint.bin")).unwrap();
        assert_eq!(bytes_a, bytes_b, "two identical runs diverged");
        assert_eq!(a.final_loss.total, b.final_loss.total);

        let metrics = std::fs::read_to_string(dir_a.path().join("metrics.csv")).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let first: f64 = lines.next().unwrap().split(',').nth(6).unwrap().parse().unwrap();
        assert!(
            a.final_loss.total < first,
            "loss did not decrease: {first} -> {}",
            a.final_loss.total
        );
        assert!(a.max_s_row_err < 1e-9);
        assert!(a.max_attn_sum_err < 1e-9);
    }

    #[test]
    fn resume_is_bit_exact() {
        let (train, test) = tiny_benchmark();

        let dir_full = tempfile::tempdir().unwrap();
        fit(&tiny_config(4), &train, &test, dir_full.path(), None).unwrap();

        let dir_split = tempfile::tempdir().unwrap();
        fit(&tiny_config(2), &train, &test, dir_split.path(), None).unwrap();
        let ckpt = dir_split.path().join("checkpoint.bin");
        fit(&tiny_config(4), &train, &test, dir_split.path(), Some(&ckpt)).unwrap();

        let full = std::fs::read(dir_full.path().join("checkpoint.bin")).unwrap();
        let split = std::fs::read(dir_split.path().join("checkpoint.bin")).unwrap();
        assert_eq!(full, split, "resumed run diverged from uninterrupted run");

        let m_full = std::fs::read_to_string(dir_full.path().join("metrics.csv")).unwrap();
        let m_split = std::fs::read_to_string(dir_split.path().join("metrics.csv")).unwrap();
        assert_eq!(m_full, m_split);
    }

    #[test]
    fn checkpoint_round_trip_preserves_state() {
        let config = tiny_config(1);
        let mut state = TrainState::init(&config);
        state.step = 42;
        state.epoch = 3;
        state.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path, config.dims.clone()).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.epoch, 3);
        for (i, (name, t)) in state.params.entries().enumerate() {
            assert_eq!(t.data(), loaded.params.tensor(i).data(), "param {name}");
        }
    }

    #[test]
    fn evaluate_thread_count_invariant() {
        let (train, _) = tiny_benchmark();
        let config = tiny_config(1);
        let state = TrainState::init(&config);
        let opts = ForwardOptions::default();
        std::env::remove_var("IOODG_THREADS");
        let serial = evaluate(&state.params, &train, opts).unwrap();
        std::env::set_var("IOODG_THREADS", "3");
        let parallel = evaluate(&state.params, &train, opts).unwrap();
        std::env::remove_var("IOODG_THREADS");
        assert_eq!(serial, parallel);
    }
}
