//! SGD training with the standard schedule (momentum, weight decay, lr
//! drops), the two-stage snapshot pipeline used by estimation-based
//! methods, per-epoch memorization diagnostics, and checkpoint selection
//! by noisy-validation accuracy.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_gaussian_mixture, load_idx, Dataset, NoisyDataset, Standardizer, SyntheticSpec,
};
use crate::estimate::estimate_transition_anchor;
use crate::mlp::{GradientBuffer, Mlp};
use crate::noise::{perturb_and_normalize, NoiseSpec, TransitionMatrix};
use crate::numerics::{Matrix, RngStream, StreamId};
use crate::risk::{
    eq2_weights, population_variance, reweight_factors, reweight_vrnl_risk, volmin_vrnl_objective,
    vrnl_empirical_risk, LossHead, MeanMode, Method, RiskSpec, TrainableTransition, WeightMean,
};
use crate::{Error, Result};

/// Optimizer and schedule settings. Defaults follow the standard recipe:
/// lr 1e-2 divided by 10 after epochs 30 and 60, momentum 0.9, weight
/// decay 1e-4, batch 128, 80 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    /// Drives the init and shuffle streams.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 80,
            lr_drop_epochs: vec![30, 60],
            drop_factor: 10.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.drop_factor <= 0.0
            || self.batch_size == 0
            || self.epochs == 0
        {
            return Err(Error::InvalidSpec(
                "learning rate, drop factor, batch size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidSpec(
                "momentum must be in [0,1) and weight decay non-negative".into(),
            ));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec(
                "lr drop epochs must be strictly increasing".into(),
            ));
        }
        if self.lr_drop_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::InvalidSpec(
                "lr drop epochs must precede the final epoch".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate / self.drop_factor.powi(drops as i32)
    }
}

/// Classical momentum with weight decay folded into the gradient:
/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    mlp: &mut Mlp,
    grads: &GradientBuffer,
    velocity: &mut GradientBuffer,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for ((layer, g), v) in mlp
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        for ((p, &gw), vw) in layer
            .weight
            .data_mut()
            .iter_mut()
            .zip(g.weight.data())
            .zip(v.weight.data_mut())
        {
            *vw = momentum * *vw + (gw + weight_decay * *p);
            *p -= lr * *vw;
            if !p.is_finite() {
                return Err(Error::NonFinite("parameter update".into()));
            }
        }
        for ((p, &gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = momentum * *vb + (gb + weight_decay * *p);
            *p -= lr * *vb;
            if !p.is_finite() {
                return Err(Error::NonFinite("parameter update".into()));
            }
        }
    }
    Ok(())
}

/// One epoch of the training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Epoch mean of the minibatch objective actually descended.
    pub train_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Mean of the method's per-example loss over correctly labeled
    /// training examples; absent when the split is empty.
    pub loss_correct: Option<f64>,
    pub loss_incorrect: Option<f64>,
    /// Population variance of the method's per-example losses.
    pub loss_var: f64,
    pub clamp_count: usize,
    /// Plain-CE split against noisy labels, reported for methods whose own
    /// loss is not plain CE.
    pub ce_loss_correct: Option<f64>,
    pub ce_loss_incorrect: Option<f64>,
}

/// Per-epoch training record plus the selected checkpoint epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    /// Whether the extra plain-CE split columns carry data.
    pub has_ce_split: bool,
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,train_loss,val_acc,test_acc,loss_correct,loss_incorrect,loss_var,clamp_count",
        );
        if self.has_ce_split {
            out.push_str(",ce_loss_correct,ce_loss_incorrect");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.val_acc,
                r.test_acc,
                csv_opt(r.loss_correct),
                csv_opt(r.loss_incorrect),
                r.loss_var,
                r.clamp_count
            ));
            if self.has_ce_split {
                out.push_str(&format!(
                    ",{},{}",
                    csv_opt(r.ce_loss_correct),
                    csv_opt(r.ce_loss_incorrect)
                ));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Train/val/test splits a trainer consumes. Validation is noisy (used for
/// checkpoint selection); the test set keeps clean labels.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: NoisyDataset,
    pub val: NoisyDataset,
    pub test: Dataset,
}

/// Per-method inputs resolved before the main run.
#[derive(Debug, Clone, Default)]
pub struct TrainSetup {
    /// Fixed transition for the forward-corrected loss.
    pub transition: Option<TransitionMatrix>,
    /// Importance factors aligned with the training examples.
    pub betas: Option<Vec<f64>>,
}

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best_model: Mlp,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub final_model: Mlp,
    /// The transition learned by volmin, realized at the final epoch.
    pub learned_transition: Option<TransitionMatrix>,
}

/// Loss split over a diagnostics pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSplit {
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
    pub variance: f64,
}

/// Split the per-example losses by label correctness; read-only.
pub fn diagnostics_pass(
    mlp: &Mlp,
    data: &NoisyDataset,
    head: &LossHead,
    betas: Option<&[f64]>,
) -> Result<LossSplit> {
    let losses = batched_losses(mlp, head, &data.features, &data.noisy_labels)?;
    let losses: Vec<f64> = match betas {
        Some(b) => {
            if b.len() != losses.len() {
                return Err(Error::DimensionMismatch(
                    "importance factors do not match the dataset".into(),
                ));
            }
            losses.iter().zip(b).map(|(l, b)| l * b).collect()
        }
        None => losses,
    };
    Ok(split_losses(
        &losses,
        &data.noisy_labels,
        &data.clean_labels,
    ))
}

fn split_losses(losses: &[f64], noisy: &[usize], clean: &[usize]) -> LossSplit {
    let mut sum_c = 0.0;
    let mut n_c = 0usize;
    let mut sum_i = 0.0;
    let mut n_i = 0usize;
    for ((&l, &ny), &cy) in losses.iter().zip(noisy).zip(clean) {
        if ny == cy {
            sum_c += l;
            n_c += 1;
        } else {
            sum_i += l;
            n_i += 1;
        }
    }
    LossSplit {
        mean_correct: (n_c > 0).then(|| sum_c / n_c as f64),
        mean_incorrect: (n_i > 0).then(|| sum_i / n_i as f64),
        variance: population_variance(losses),
    }
}

const EVAL_CHUNK: usize = 512;

fn batched_losses(
    mlp: &Mlp,
    head: &LossHead,
    features: &Matrix,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let n = features.rows();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = copy_rows(features, &(start..end).collect::<Vec<_>>());
        let cache = mlp.forward_cached(&chunk)?;
        for (i, idx) in (start..end).enumerate() {
            out.push(head.loss(cache.logits().row(i), labels[idx])?);
        }
        start = end;
    }
    Ok(out)
}

/// Fraction of examples whose argmax logit matches the label.
pub fn accuracy(mlp: &Mlp, features: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::EmptyInput("accuracy evaluation".into()));
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = copy_rows(features, &(start..end).collect::<Vec<_>>());
        let cache = mlp.forward_cached(&chunk)?;
        for (i, idx) in (start..end).enumerate() {
            let row = cache.logits().row(i);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("nonempty")
                .0;
            if pred == labels[idx] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

fn copy_rows(features: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), features.cols());
    for (dst, &src) in idx.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(features.row(src));
    }
    out
}

const EMA_DECAY: f64 = 0.9;

/// Run the full schedule for one method. Diagnostics are computed on the
/// training set each epoch without touching parameters; the checkpoint with
/// the highest noisy-validation accuracy wins.
pub fn train(
    spec: &RiskSpec,
    bundle: &DataBundle,
    mut mlp: Mlp,
    cfg: &OptimizerConfig,
    setup: &TrainSetup,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if spec.alpha < 0.0 || spec.lambda < 0.0 {
        return Err(Error::InvalidSpec("alpha and lambda must be >= 0".into()));
    }
    let n = bundle.train.len();
    if n == 0 {
        return Err(Error::EmptyInput("training set".into()));
    }

    let head = match spec.method {
        Method::Ce | Method::Reweight => LossHead::PlainCe,
        Method::Forward => LossHead::ForwardCe {
            transition: setup
                .transition
                .clone()
                .ok_or_else(|| Error::InvalidSpec("forward method needs a transition".into()))?,
        },
        Method::VolMin => LossHead::PlainCe, // replaced per-step by the realized matrix
    };
    let betas = match spec.method {
        Method::Reweight => Some(setup.betas.clone().ok_or_else(|| {
            Error::InvalidSpec("reweight method needs importance factors".into())
        })?),
        _ => None,
    };
    if let Some(b) = &betas {
        if b.len() != n {
            return Err(Error::DimensionMismatch(
                "importance factors do not match the training set".into(),
            ));
        }
    }
    let mut trainable = match spec.method {
        Method::VolMin => Some(TrainableTransition::new(bundle.train.classes)?),
        _ => None,
    };

    let mut velocity = GradientBuffer::zeros_like(&mlp);
    let mut u_velocity = trainable
        .as_ref()
        .map(|t| vec![0.0; t.params().len()])
        .unwrap_or_default();
    let mut shuffle_rng = RngStream::named(cfg.seed, StreamId::Shuffle);

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_model = mlp.clone();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut clamp_count = 0usize;
        let mut ema: Option<f64> = None;

        for chunk in order.chunks(cfg.batch_size) {
            let batch = copy_rows(&bundle.train.features, chunk);
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| bundle.train.noisy_labels[i])
                .collect();

            let objective = match (&mut trainable, &betas) {
                (Some(tt), _) => {
                    let eval = volmin_vrnl_objective(
                        &mlp,
                        tt,
                        &batch,
                        &labels,
                        spec.alpha,
                        spec.lambda,
                        spec.weight_floor,
                    )?;
                    clamp_count += eval.weight_clamp_count;
                    sgd_step(
                        &mut mlp,
                        &eval.theta_grads,
                        &mut velocity,
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    )?;
                    // The transition parameters skip weight decay: decaying
                    // them would bias the estimate toward a fixed mixing
                    // level rather than toward "no information".
                    for ((u, &g), v) in tt
                        .params_mut()
                        .iter_mut()
                        .zip(&eval.u_grads)
                        .zip(&mut u_velocity)
                    {
                        *v = cfg.momentum * *v + g;
                        *u -= lr * *v;
                    }
                    eval.objective
                }
                (None, Some(all_betas)) => {
                    let losses = per_example_losses(&mlp, &LossHead::PlainCe, &batch, &labels)?;
                    let batch_betas: Vec<f64> = chunk.iter().map(|&i| all_betas[i]).collect();
                    let (risk, raw_w) = reweight_vrnl_risk(&losses, &batch_betas, spec.alpha)?;
                    let mut grad_w = Vec::with_capacity(raw_w.len());
                    for (w, b) in raw_w.iter().zip(&batch_betas) {
                        let mut w = *w;
                        if w < spec.weight_floor {
                            w = spec.weight_floor;
                            clamp_count += 1;
                        }
                        grad_w.push(w * b);
                    }
                    let (_, grads) =
                        mlp.weighted_batch_gradient(&batch, &labels, &grad_w, &LossHead::PlainCe)?;
                    sgd_step(
                        &mut mlp,
                        &grads,
                        &mut velocity,
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    )?;
                    risk
                }
                (None, None) => {
                    let losses = per_example_losses(&mlp, &head, &batch, &labels)?;
                    let mean = match spec.mean_mode {
                        MeanMode::Batch => WeightMean::Batch,
                        MeanMode::RunningEpoch => {
                            let batch_mean = losses.iter().sum::<f64>() / losses.len() as f64;
                            let m = match ema {
                                Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * batch_mean,
                                None => batch_mean,
                            };
                            ema = Some(m);
                            WeightMean::Running(m)
                        }
                    };
                    let (weights, clamped) =
                        eq2_weights(&losses, spec.alpha, mean, spec.weight_floor);
                    clamp_count += clamped;
                    let (_, grads) =
                        mlp.weighted_batch_gradient(&batch, &labels, &weights, &head)?;
                    sgd_step(
                        &mut mlp,
                        &grads,
                        &mut velocity,
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    )?;
                    vrnl_empirical_risk(&losses, spec.alpha)?
                }
            };
            if !objective.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += objective * chunk.len() as f64;
        }
        let train_loss = epoch_loss / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }

        // Read-only diagnostics with the method's own loss.
        let diag_head = match &trainable {
            Some(tt) => LossHead::ForwardCe {
                transition: tt.realize(),
            },
            None => head.clone(),
        };
        let split = diagnostics_pass(&mlp, &bundle.train, &diag_head, betas.as_deref())?;
        let ce_split = match spec.method {
            Method::Reweight | Method::VolMin => Some(diagnostics_pass(
                &mlp,
                &bundle.train,
                &LossHead::PlainCe,
                None,
            )?),
            _ => None,
        };

        let val_acc = accuracy(&mlp, &bundle.val.features, &bundle.val.noisy_labels)?;
        let test_acc = accuracy(&mlp, &bundle.test.features, &bundle.test.labels)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best_model = mlp.clone();
        }

        rows.push(EpochRow {
            epoch,
            train_loss,
            val_acc,
            test_acc,
            loss_correct: split.mean_correct,
            loss_incorrect: split.mean_incorrect,
            loss_var: split.variance,
            clamp_count,
            ce_loss_correct: ce_split.and_then(|s| s.mean_correct),
            ce_loss_incorrect: ce_split.and_then(|s| s.mean_incorrect),
        });
    }

    let has_ce_split = matches!(spec.method, Method::Reweight | Method::VolMin);
    Ok(TrainOutcome {
        report: TrainReport {
            rows,
            best_epoch,
            has_ce_split,
        },
        best_model,
        best_epoch,
        best_val_acc: best_val,
        final_model: mlp,
        learned_transition: trainable.map(|t| t.realize()),
    })
}

fn per_example_losses(
    mlp: &Mlp,
    head: &LossHead,
    batch: &Matrix,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let cache = mlp.forward_cached(batch)?;
    (0..batch.rows())
        .map(|i| head.loss(cache.logits().row(i), labels[i]))
        .collect()
}

/// Where the method's transition matrix comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionSource {
    /// The true matrix built from the noise spec (optionally biased by γ).
    Given,
    /// Anchor-point estimation from a warm-up snapshot.
    Estimate,
}

/// Data source for an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic {
        spec: SyntheticSpec,
        /// Clean test examples generated alongside the training pool.
        test_n: usize,
    },
    Mnist {
        dir: PathBuf,
        /// Seeded training subsample size (0 = all).
        subsample: usize,
    },
}

/// Fully resolved experiment description; a run is reproducible from this
/// alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub noise: NoiseSpec,
    pub risk: RiskSpec,
    pub optimizer: OptimizerConfig,
    /// Hidden layer widths of the classifier.
    pub hidden: Vec<usize>,
    pub val_fraction: f64,
    /// Plain-CE epochs that produce the posterior snapshot for estimation
    /// and reweighting.
    pub warmup_epochs: usize,
    pub transition_source: TransitionSource,
    pub anchor_percentile: f64,
    /// Bias injected into the given transition before handing it to the
    /// method; 0 disables.
    pub gamma: f64,
    pub seed: u64,
    /// Kept for interface compatibility; execution is always sequential and
    /// deterministic.
    pub deterministic: bool,
}

impl ExperimentConfig {
    /// Stamp one top-level seed into every seeded sub-config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.optimizer.seed = seed;
        self.noise.seed = seed;
        if let DataConfig::Synthetic { spec, .. } = &mut self.data {
            spec.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::InvalidSpec("val fraction outside (0,1)".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidSpec("gamma must be >= 0".into()));
        }
        if self.gamma > 0.0 && self.transition_source != TransitionSource::Given {
            return Err(Error::InvalidSpec(
                "bias injection applies to a given transition only".into(),
            ));
        }
        if let DataConfig::Synthetic { spec, .. } = &self.data {
            if spec.classes != self.noise.classes {
                return Err(Error::InvalidSpec(format!(
                    "data has {} classes, noise spec {}",
                    spec.classes, self.noise.classes
                )));
            }
        }
        Ok(())
    }
}

/// Run summary: config echo plus headline outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    /// Relative entry-wise L1 error of the biased transition (0 when no
    /// bias was injected).
    pub eps_t: f64,
    /// L1 estimation error against the true matrix, when the method
    /// estimated one and the truth is known.
    pub estimation_error: Option<f64>,
    pub warmup_epochs_run: usize,
    pub total_weight_clamps: usize,
    pub wall_seconds: f64,
}

/// A finished pipeline run.
pub struct PipelineResult {
    pub outcome: TrainOutcome,
    pub summary: RunSummary,
    /// The transition handed to the method, when there was one.
    pub method_transition: Option<TransitionMatrix>,
}

fn salt(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

const TEST_DATA_TAG: u64 = 0x7e57;

/// Assemble the data splits for a config: load or generate, corrupt with
/// the true matrix, split, and (for synthetic data) standardize using
/// train-split statistics.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(DataBundle, TransitionMatrix)> {
    let (pool, test) = match &cfg.data {
        DataConfig::Synthetic { spec, test_n } => {
            let (pool, _) = generate_gaussian_mixture(spec)?;
            let mut test_spec = spec.clone();
            test_spec.n = (*test_n).max(2 * spec.classes);
            test_spec.seed = salt(spec.seed, TEST_DATA_TAG);
            let (test, _) = generate_gaussian_mixture(&test_spec)?;
            (pool, test)
        }
        DataConfig::Mnist { dir, subsample } => {
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            let train = if *subsample > 0 && *subsample < train.len() {
                let mut rng = RngStream::named(cfg.seed, StreamId::Subsample);
                train.subsample(*subsample, &mut rng)
            } else {
                train
            };
            (train, test)
        }
    };
    let mut noise = cfg.noise;
    noise.classes = pool.classes;
    let true_t = noise.build()?;

    let mut corrupt_rng = RngStream::named(cfg.seed, StreamId::Corruption);
    let noisy = pool.corrupt(&true_t, &mut corrupt_rng)?;
    let (mut train, mut val) = noisy.split(cfg.val_fraction, cfg.seed)?;
    let mut test = test;

    if matches!(cfg.data, DataConfig::Synthetic { .. }) {
        let standardizer = Standardizer::fit(&train.features);
        standardizer.apply(&mut train.features);
        standardizer.apply(&mut val.features);
        standardizer.apply(&mut test.features);
    }
    Ok((DataBundle { train, val, test }, true_t))
}

/// Run the full pipeline for a config: data preparation, warm-up snapshot
/// and transition estimation where the method needs them, then the main
/// schedule.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    let started = Instant::now();
    cfg.validate()?;
    let (bundle, true_t) = prepare_data(cfg)?;
    let classes = bundle.train.classes;

    let mut dims = vec![bundle.train.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(classes);

    // Bias injection: the data stays corrupted by the true matrix; only
    // what the method is told changes.
    let (given_t, eps_t) = if cfg.gamma > 0.0 {
        let mut rng = RngStream::named(cfg.seed, StreamId::Perturbation);
        perturb_and_normalize(&true_t, cfg.gamma, &mut rng)?
    } else {
        (true_t.clone(), 0.0)
    };

    let needs_warmup = match cfg.risk.method {
        Method::Reweight => true,
        Method::Forward => cfg.transition_source == TransitionSource::Estimate,
        _ => false,
    };
    let mut warmup_epochs_run = 0;
    let snapshot = if needs_warmup {
        let mut warm_cfg = cfg.optimizer.clone();
        warm_cfg.epochs = cfg.warmup_epochs.max(1);
        warm_cfg.lr_drop_epochs.retain(|&e| e < warm_cfg.epochs);
        let warm_spec = RiskSpec::new(Method::Ce, 0.0);
        let init = Mlp::new(
            &dims,
            &mut RngStream::named(cfg.optimizer.seed, StreamId::Init),
        )?;
        let warm = train(&warm_spec, &bundle, init, &warm_cfg, &TrainSetup::default())?;
        warmup_epochs_run = warm_cfg.epochs;
        Some(warm.final_model)
    } else {
        None
    };

    let mut estimation_error = None;
    let method_transition = match cfg.risk.method {
        Method::Forward | Method::Reweight => Some(match cfg.transition_source {
            TransitionSource::Given => given_t.clone(),
            TransitionSource::Estimate => {
                let model = snapshot.as_ref().expect("warm-up ran");
                let est = estimate_transition_anchor(
                    model,
                    &bundle.train.features,
                    cfg.anchor_percentile,
                )?;
                estimation_error = Some(true_t.l11_distance(&est));
                est
            }
        }),
        _ => None,
    };

    let setup = TrainSetup {
        transition: method_transition.clone(),
        betas: match cfg.risk.method {
            Method::Reweight => {
                let model = snapshot.as_ref().expect("warm-up ran");
                let t = method_transition.as_ref().expect("transition resolved");
                let (betas, _) =
                    reweight_factors(model, t, &bundle.train.features, &bundle.train.noisy_labels)?;
                Some(betas)
            }
            _ => None,
        },
    };

    // Reweighting continues from the snapshot; everything else starts from
    // the seeded init (identical to the warm-up's starting point).
    let initial = match (&cfg.risk.method, &snapshot) {
        (Method::Reweight, Some(model)) => model.clone(),
        _ => Mlp::new(
            &dims,
            &mut RngStream::named(cfg.optimizer.seed, StreamId::Init),
        )?,
    };

    let outcome = train(&cfg.risk, &bundle, initial, &cfg.optimizer, &setup)?;

    let best_test_acc = outcome
        .report
        .rows
        .get(outcome.best_epoch)
        .map(|r| r.test_acc)
        .unwrap_or(0.0);
    let final_test_acc = outcome
        .report
        .rows
        .last()
        .map(|r| r.test_acc)
        .unwrap_or(0.0);
    let total_weight_clamps = outcome.report.rows.iter().map(|r| r.clamp_count).sum();

    let summary = RunSummary {
        config: cfg.clone(),
        best_epoch: outcome.best_epoch,
        best_val_acc: outcome.best_val_acc,
        best_test_acc,
        final_test_acc,
        eps_t,
        estimation_error,
        warmup_epochs_run,
        total_weight_clamps,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(PipelineResult {
        outcome,
        summary,
        method_transition,
    })
}

/// Write the standard artifact set for a finished run.
pub fn write_artifacts(result: &PipelineResult, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    result
        .outcome
        .report
        .save_csv(&out_dir.join("report.csv"))?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&result.summary)?,
    )?;
    result
        .outcome
        .best_model
        .save(&out_dir.join("model.ckpt"))?;
    if let Some(t) = &result.method_transition {
        let note = match result.summary.config.transition_source {
            TransitionSource::Given if result.summary.config.gamma > 0.0 => {
                format!(
                    "source: given, biased gamma={}",
                    result.summary.config.gamma
                )
            }
            TransitionSource::Given => "source: given".to_string(),
            TransitionSource::Estimate => format!(
                "source: anchor-estimate percentile={}",
                result.summary.config.anchor_percentile
            ),
        };
        t.save(&out_dir.join("transition_used.txt"), Some(&note))?;
    }
    if let Some(t) = &result.outcome.learned_transition {
        t.save(
            &out_dir.join("transition_learned.txt"),
            Some("source: volmin, final epoch"),
        )?;
    }
    Ok(())
}
