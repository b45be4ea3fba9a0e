//! Transition-matrix estimation from noisy data via anchor points, and the
//! inversion identity mapping noisy posteriors back to clean ones.
//!
//! An anchor for class `j` is an instance whose clean posterior is
//! (approximately) one-hot at `j`; a noisy-posterior model evaluated there
//! reads off column `j` of the transition matrix.

use crate::noise::TransitionMatrix;
use crate::numerics::{solve, Matrix};
use crate::risk::Posterior;
use crate::{Error, Result};

/// Default anchor percentile; slightly below the maximum to shed outliers.
pub const DEFAULT_ANCHOR_PERCENTILE: f64 = 97.0;

/// Estimate the transition matrix by scanning, for each class `j`, the
/// model's predicted noisy posterior for `j` over the whole dataset and
/// taking the example at the given percentile as the anchor. Column `j` of
/// the estimate is the model output at that anchor, clamped to [0,1] and
/// renormalized.
pub fn estimate_transition_anchor(
    model: &dyn Posterior,
    features: &Matrix,
    percentile: f64,
) -> Result<TransitionMatrix> {
    if !(0.0 < percentile && percentile <= 100.0) {
        return Err(Error::InvalidSpec(format!(
            "anchor percentile {percentile} outside (0, 100]"
        )));
    }
    let n = features.rows();
    if n == 0 {
        return Err(Error::EmptyInput(
            "anchor estimation needs at least one example per class scan".into(),
        ));
    }
    let posteriors: Vec<Vec<f64>> = (0..n)
        .map(|i| model.posterior(features.row(i)))
        .collect::<Result<_>>()?;
    let classes = posteriors[0].len();
    if classes < 2 {
        return Err(Error::InvalidSpec(
            "posterior model with < 2 classes".into(),
        ));
    }

    let mut estimate = Matrix::zeros(classes, classes);
    for class in 0..classes {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            posteriors[a][class]
                .partial_cmp(&posteriors[b][class])
                .expect("finite posteriors")
                .then(a.cmp(&b))
        });
        let rank = ((percentile / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1;
        let anchor = order[rank];
        for (row, &p) in posteriors[anchor].iter().enumerate() {
            estimate.set(row, class, p.clamp(0.0, 1.0));
        }
    }
    crate::noise::normalize_columns_exact(&mut estimate);
    TransitionMatrix::from_matrix(estimate)
}

/// `T⁻¹·p̃`: the clean posterior implied by a noisy one. Estimation error can
/// push the result off the simplex; it is returned as-is with a flag saying
/// whether it still lies on it (within 1e-9).
pub fn invert_for_clean_posterior(
    transition: &TransitionMatrix,
    noisy_posterior: &[f64],
) -> Result<(Vec<f64>, bool)> {
    let clean = solve(transition.matrix(), noisy_posterior)?;
    let sum: f64 = clean.iter().sum();
    let on_simplex =
        (sum - 1.0).abs() <= 1e-9 && clean.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v));
    Ok((clean, on_simplex))
}
