//! Objective functions: the variance-regularized empirical risk, its
//! equivalent per-example gradient weights, forward-corrected and
//! importance-reweighted losses, and the jointly trained transition matrix
//! with its volume penalty.
//!
//! The core identity used throughout: the gradient of
//! `mean(ℓ) − α·(mean(ℓ²) − mean(ℓ)²)` equals the weighted gradient
//! `(1/n)Σ wᵢ∇ℓᵢ` with `wᵢ = 1 + 2α(mean(ℓ) − ℓᵢ)`, so increasing loss
//! variance is exactly down-weighting large-loss (likely mislabeled)
//! examples.

use serde::{Deserialize, Serialize};

use crate::mlp::{GradientBuffer, Mlp};
use crate::noise::TransitionMatrix;
use crate::numerics::{log_det, log_det_gradient, log_sum_exp, stable_softmax, Matrix};
use crate::{Error, Result};

const PROB_CLAMP: f64 = 1e-12;

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain cross-entropy on noisy labels.
    Ce,
    /// Cross-entropy through a fixed transition matrix.
    Forward,
    /// Importance-reweighted cross-entropy from a frozen posterior snapshot.
    Reweight,
    /// Joint classifier + trainable transition with a log-det volume penalty.
    VolMin,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Ce => write!(f, "ce"),
            Method::Forward => write!(f, "forward"),
            Method::Reweight => write!(f, "reweight"),
            Method::VolMin => write!(f, "volmin"),
        }
    }
}

/// Which mean enters the gradient weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanMode {
    /// Mean of the current minibatch losses (plug-in estimator).
    Batch,
    /// Exponential moving average across batches, decay 0.9; steadier for
    /// small batches.
    RunningEpoch,
}

/// Reference mean resolved for one weight computation.
#[derive(Debug, Clone, Copy)]
pub enum WeightMean {
    Batch,
    Running(f64),
}

/// Objective configuration shared by the trainer and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub method: Method,
    /// Variance-regularization strength; 0 disables it.
    pub alpha: f64,
    /// Volume-penalty strength (volmin only).
    pub lambda: f64,
    pub mean_mode: MeanMode,
    /// Weights below this are clamped up and counted.
    pub weight_floor: f64,
}

impl RiskSpec {
    pub fn new(method: Method, alpha: f64) -> Self {
        RiskSpec {
            method,
            alpha,
            lambda: 1e-4,
            mean_mode: MeanMode::Batch,
            weight_floor: 0.0,
        }
    }
}

/// Variance-regularized empirical risk:
/// `mean(ℓ) − α·(mean(ℓ²) − mean(ℓ)²)`, biased variance as written.
pub fn vrnl_empirical_risk(losses: &[f64], alpha: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::EmptyInput("losses".into()));
    }
    if !losses.iter().all(|l| l.is_finite()) {
        return Err(Error::NonFinite("losses".into()));
    }
    let n = losses.len() as f64;
    let mean: f64 = losses.iter().sum::<f64>() / n;
    let mean_sq: f64 = losses.iter().map(|l| l * l).sum::<f64>() / n;
    Ok(mean - alpha * (mean_sq - mean * mean))
}

/// Per-example gradient weights `wᵢ = 1 + 2α(ℓ̄ − ℓᵢ)`, clamped at `floor`
/// from below; returns the clamp count alongside.
pub fn eq2_weights(losses: &[f64], alpha: f64, mean: WeightMean, floor: f64) -> (Vec<f64>, usize) {
    let reference = match mean {
        WeightMean::Batch => losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        WeightMean::Running(m) => m,
    };
    let mut clamped = 0;
    let weights = losses
        .iter()
        .map(|&l| {
            let w = 1.0 + 2.0 * alpha * (reference - l);
            if w < floor {
                clamped += 1;
                floor
            } else {
                w
            }
        })
        .collect();
    (weights, clamped)
}

/// Population (divide-by-n) variance, two-pass.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Maps logits to a per-example scalar loss.
#[derive(Debug, Clone)]
pub enum LossHead {
    /// `−ln softmax(z)[y]`.
    PlainCe,
    /// `−ln (T·softmax(z))[y]`: the classifier models the clean posterior,
    /// the mixed output models the noisy one.
    ForwardCe { transition: TransitionMatrix },
}

impl LossHead {
    pub fn loss(&self, logits: &[f64], label: usize) -> Result<f64> {
        Ok(self.eval(logits, label)?.0)
    }

    /// Loss and its gradient with respect to the logits.
    pub fn loss_and_logit_grad(&self, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let (loss, grad, _) = self.eval_full(logits, label, false)?;
        Ok((loss, grad))
    }

    fn eval(&self, logits: &[f64], label: usize) -> Result<(f64, f64)> {
        if label >= logits.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: logits.len(),
            });
        }
        let lse_z = log_sum_exp(logits);
        let ln_py = match self {
            LossHead::PlainCe => logits[label] - lse_z,
            LossHead::ForwardCe { transition } => {
                if transition.classes() != logits.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "transition for {} classes, logits of {}",
                        transition.classes(),
                        logits.len()
                    )));
                }
                // ln (T p)[y] = lse_j(ln T[y][j] + z_j) − lse(z), computed
                // entirely in log space so zero entries and saturated
                // softmaxes stay harmless.
                let shifted: Vec<f64> = (0..logits.len())
                    .map(|j| {
                        let t = transition.get(label, j);
                        if t > 0.0 {
                            t.ln() + logits[j]
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                log_sum_exp(&shifted) - lse_z
            }
        };
        let floor = PROB_CLAMP.ln();
        if ln_py < floor {
            Ok((-floor, f64::NEG_INFINITY)) // clamped: flat region
        } else {
            Ok((-ln_py, ln_py))
        }
    }

    /// Loss, logit gradient, and (when requested for a forward head) the
    /// gradient with respect to row `label` of the transition matrix.
    fn eval_full(
        &self,
        logits: &[f64],
        label: usize,
        want_transition_grad: bool,
    ) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        let (loss, ln_py) = self.eval(logits, label)?;
        if ln_py == f64::NEG_INFINITY {
            // Inside the clamp the loss is constant.
            return Ok((loss, vec![0.0; logits.len()], None));
        }
        let p = stable_softmax(logits)?;
        match self {
            LossHead::PlainCe => {
                let mut grad = p;
                grad[label] -= 1.0;
                Ok((loss, grad, None))
            }
            LossHead::ForwardCe { transition } => {
                // dℓ/dz = p − r with r_k = T[y][k]·p_k / (T p)[y]; r is itself
                // a probability vector, so the gradient stays bounded.
                let lse_z = log_sum_exp(logits);
                let r: Vec<f64> = (0..logits.len())
                    .map(|k| {
                        let t = transition.get(label, k);
                        if t > 0.0 {
                            (t.ln() + logits[k] - lse_z - ln_py).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let grad: Vec<f64> = p.iter().zip(&r).map(|(pk, rk)| pk - rk).collect();
                let t_grad = if want_transition_grad {
                    // dℓ/dT[y][j] = −p_j / (T p)[y].
                    Some(
                        logits
                            .iter()
                            .map(|&zj| -((zj - lse_z - ln_py).exp()))
                            .collect(),
                    )
                } else {
                    None
                };
                Ok((loss, grad, t_grad))
            }
        }
    }
}

/// Per-example losses of a head over a feature batch.
pub fn head_losses(
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

/// Frozen model producing class-posterior estimates on the simplex.
pub trait Posterior {
    fn posterior(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl Posterior for Mlp {
    fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

impl<F> Posterior for F
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self(x))
    }
}

/// Importance factors `β̂ᵢ = g(xᵢ)[ỹᵢ] / (T̂·g(xᵢ))[ỹᵢ]` with the
/// denominator clamped at 1e-12; returns the clamp count alongside.
pub fn reweight_factors(
    snapshot: &dyn Posterior,
    transition: &TransitionMatrix,
    batch: &Matrix,
    labels: &[usize],
) -> Result<(Vec<f64>, usize)> {
    let mut clamp_count = 0;
    let mut betas = Vec::with_capacity(batch.rows());
    for i in 0..batch.rows() {
        let g = snapshot.posterior(batch.row(i))?;
        if labels[i] >= g.len() {
            return Err(Error::LabelOutOfRange {
                label: labels[i],
                classes: g.len(),
            });
        }
        let mixed = transition.matrix().matvec(&g)?;
        let mut denom = mixed[labels[i]];
        if denom < PROB_CLAMP {
            denom = PROB_CLAMP;
            clamp_count += 1;
        }
        betas.push(g[labels[i]] / denom);
    }
    Ok((betas, clamp_count))
}

/// Variance-regularized reweighted risk on the products `β̂ᵢℓᵢ`, plus the
/// gradient weights `ŵᵢ = 1 + 2α(mean(β̂ℓ) − β̂ᵢℓᵢ)` to apply to `∇(β̂ᵢℓᵢ)`
/// (β̂ held constant).
pub fn reweight_vrnl_risk(losses: &[f64], betas: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if losses.len() != betas.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} losses, {} factors",
            losses.len(),
            betas.len()
        )));
    }
    let products: Vec<f64> = losses.iter().zip(betas).map(|(l, b)| l * b).collect();
    let risk = vrnl_empirical_risk(&products, alpha)?;
    let (weights, _) = eq2_weights(&products, alpha, WeightMean::Batch, f64::NEG_INFINITY);
    Ok((risk, weights))
}

/// Free parameters of a trainable transition matrix, one per off-diagonal
/// entry. The realized matrix is column stochastic and diagonally dominant
/// by construction: off-diagonals are `sigmoid(u)/C ∈ (0, 1/C)` and the
/// diagonal absorbs the remainder, so it always exceeds `1/C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableTransition {
    classes: usize,
    u: Vec<f64>,
}

/// Init value ≈ identity: sigmoid(−4)/C off-diagonals.
const U_INIT: f64 = -4.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl TrainableTransition {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "trainable transition needs C >= 2, got {classes}"
            )));
        }
        Ok(TrainableTransition {
            classes,
            u: vec![U_INIT; classes * (classes - 1)],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.u
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn set_params(&mut self, u: &[f64]) -> Result<()> {
        if u.len() != self.u.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} transition params, got {}",
                self.u.len(),
                u.len()
            )));
        }
        self.u.copy_from_slice(u);
        Ok(())
    }

    /// Flat index of off-diagonal entry (row, col); entries are laid out
    /// column by column, skipping the diagonal.
    fn index(&self, row: usize, col: usize) -> usize {
        debug_assert_ne!(row, col);
        col * (self.classes - 1) + if row < col { row } else { row - 1 }
    }

    /// Realize the constrained matrix from the free parameters.
    pub fn realize(&self) -> TransitionMatrix {
        let c = self.classes;
        let mut m = Matrix::zeros(c, c);
        for col in 0..c {
            let mut off_sum = 0.0;
            for row in 0..c {
                if row == col {
                    continue;
                }
                let o = sigmoid(self.u[self.index(row, col)]) / c as f64;
                m.set(row, col, o);
                off_sum += o;
            }
            m.set(col, col, 1.0 - off_sum);
        }
        TransitionMatrix::from_matrix(m).expect("construction keeps the constraints")
    }

    /// Chain a gradient with respect to the realized matrix back to the free
    /// parameters: `du[row,col] = (dT[row,col] − dT[col,col])·σ'(u)/C`.
    pub fn chain_gradient(&self, d_matrix: &Matrix) -> Vec<f64> {
        let c = self.classes;
        let mut du = vec![0.0; self.u.len()];
        for col in 0..c {
            let d_diag = d_matrix.get(col, col);
            for row in 0..c {
                if row == col {
                    continue;
                }
                let idx = self.index(row, col);
                let s = sigmoid(self.u[idx]);
                du[idx] = (d_matrix.get(row, col) - d_diag) * s * (1.0 - s) / c as f64;
            }
        }
        du
    }
}

/// One evaluation of the joint classifier/transition objective.
pub struct VolMinEval {
    /// `mean CE(T̂f, ỹ) + λ·ln det(T̂) − α·Var(CE)`.
    pub objective: f64,
    pub losses: Vec<f64>,
    /// Variance-weighted classifier gradient.
    pub theta_grads: GradientBuffer,
    /// Unweighted gradient of `mean CE + λ·ln det` through the
    /// parameterization; the variance term regularizes θ only.
    pub u_grads: Vec<f64>,
    pub weight_clamp_count: usize,
}

/// Evaluate the volume-minimization objective with the variance regularizer
/// on the classifier side.
pub fn volmin_vrnl_objective(
    mlp: &Mlp,
    tt: &TrainableTransition,
    batch: &Matrix,
    labels: &[usize],
    alpha: f64,
    lambda: f64,
    weight_floor: f64,
) -> Result<VolMinEval> {
    let n = batch.rows();
    if n == 0 {
        return Err(Error::EmptyInput("volmin batch".into()));
    }
    let transition = tt.realize();
    let det = log_det(transition.matrix())?;
    debug_assert!(det.sign > 0.0, "realized transition has positive det");

    let head = LossHead::ForwardCe {
        transition: transition.clone(),
    };
    let cache = mlp.forward_cached(batch)?;
    let classes = mlp.output_dim();
    let mut losses = Vec::with_capacity(n);
    let mut logit_grads: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut d_transition = Matrix::zeros(classes, classes);
    for (i, &label) in labels.iter().enumerate() {
        let (loss, grad, t_row) = head.eval_full(cache.logits().row(i), label, true)?;
        losses.push(loss);
        logit_grads.push(grad);
        if let Some(row) = t_row {
            let dst = d_transition.row_mut(label);
            for (dj, &v) in dst.iter_mut().zip(&row) {
                *dj += v / n as f64;
            }
        }
    }

    let (weights, weight_clamp_count) =
        eq2_weights(&losses, alpha, WeightMean::Batch, weight_floor);
    let mut dlogits = Matrix::zeros(n, classes);
    for i in 0..n {
        let scale = weights[i] / n as f64;
        for (d, &g) in dlogits.row_mut(i).iter_mut().zip(&logit_grads[i]) {
            *d = scale * g;
        }
    }
    let theta_grads = mlp.backward(batch, &cache, dlogits)?;

    let ld_grad = log_det_gradient(transition.matrix())?;
    for (d, &g) in d_transition.data_mut().iter_mut().zip(ld_grad.data()) {
        *d += lambda * g;
    }
    let u_grads = tt.chain_gradient(&d_transition);

    let objective = vrnl_empirical_risk(&losses, alpha)? + lambda * det.ln_abs;
    Ok(VolMinEval {
        objective,
        losses,
        theta_grads,
        u_grads,
        weight_clamp_count,
    })
}
