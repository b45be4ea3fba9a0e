//! Noise transition matrices: construction, label corruption, bias
//! injection, and the plain-text matrix format.
//!
//! A transition matrix is column-stochastic with `T[i][j] = P(ỹ=i | y=j)`,
//! so column `j` is the flip distribution of true class `j`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, RngStream};
use crate::{Error, Result};

const COLUMN_SUM_TOL: f64 = 1e-12;

/// Column-stochastic noise transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    m: Matrix,
}

impl TransitionMatrix {
    /// Validate and wrap a square matrix: entries in [0,1], columns summing
    /// to 1 within 1e-12.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() || m.rows() < 2 {
            return Err(Error::InvalidSpec(format!(
                "transition matrix must be square with C >= 2, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let v = m.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidSpec(format!(
                        "transition entry ({i},{j}) = {v} outside [0,1]"
                    )));
                }
            }
        }
        for j in 0..m.cols() {
            let s: f64 = (0..m.rows()).map(|i| m.get(i, j)).sum();
            if (s - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(Error::InvalidSpec(format!(
                    "column {j} sums to {s}, expected 1"
                )));
            }
        }
        Ok(TransitionMatrix { m })
    }

    pub fn identity(classes: usize) -> Self {
        TransitionMatrix {
            m: Matrix::identity(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.m.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    #[inline]
    pub fn get(&self, noisy: usize, clean: usize) -> f64 {
        self.m.get(noisy, clean)
    }

    /// Flip distribution of true class `j` (column `j`).
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.classes()).map(|i| self.m.get(i, j)).collect()
    }

    /// Sum of absolute entry differences against another matrix
    /// (entry-wise L1 norm of the difference).
    pub fn l11_distance(&self, other: &TransitionMatrix) -> f64 {
        self.m
            .data()
            .iter()
            .zip(other.m.data())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Serialize as plain text: optional `#` comment lines, a line with C,
    /// then C rows of C entries. Entries round-trip exactly.
    pub fn to_text(&self, comment: Option<&str>) -> String {
        let c = self.classes();
        let mut out = String::new();
        if let Some(note) = comment {
            for line in note.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        let _ = writeln!(out, "{c}");
        for i in 0..c {
            let row: Vec<String> = (0..c).map(|j| format!("{}", self.m.get(i, j))).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let c: usize = lines
            .next()
            .ok_or_else(|| Error::Format("empty transition matrix file".into()))?
            .parse()
            .map_err(|_| Error::Format("first non-comment line must be the class count".into()))?;
        let mut data = Vec::with_capacity(c * c);
        for i in 0..c {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing row {i}")))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad entry '{t}' in row {i}")))
                })
                .collect::<Result<_>>()?;
            if row.len() != c {
                return Err(Error::Format(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        TransitionMatrix::from_matrix(Matrix::from_vec(c, c, data)?)
    }

    pub fn save(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        fs::write(path, self.to_text(comment))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TransitionMatrix::from_text(&fs::read_to_string(path)?)
    }
}

/// Noise family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    Pair,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseKind::Symmetric => write!(f, "symmetric"),
            NoiseKind::Asymmetric => write!(f, "asymmetric"),
            NoiseKind::Pair => write!(f, "pair"),
        }
    }
}

/// Declarative description of a noise process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub classes: usize,
    /// Used by the asymmetric builder's per-class rate draws.
    pub seed: u64,
}

impl NoiseSpec {
    pub fn build(&self) -> Result<TransitionMatrix> {
        match self.kind {
            NoiseKind::Symmetric => build_symmetric(self.classes, self.rate),
            NoiseKind::Asymmetric => build_asymmetric(self.classes, self.rate, self.seed),
            NoiseKind::Pair => build_pair(self.classes, self.rate),
        }
    }
}

/// Uniform flips: diagonal `1−ε`, every off-diagonal `ε/(C−1)`.
///
/// `ε = (C−1)/C` is admitted as the uniform-matrix edge case; diagonal
/// dominance holds strictly below it.
pub fn build_symmetric(classes: usize, rate: f64) -> Result<TransitionMatrix> {
    check_classes(classes)?;
    let max = (classes as f64 - 1.0) / classes as f64;
    if !(0.0..=max).contains(&rate) {
        return Err(Error::InvalidSpec(format!(
            "symmetric rate {rate} outside [0, {max}] for C={classes}"
        )));
    }
    let off = rate / (classes as f64 - 1.0);
    let mut m = Matrix::zeros(classes, classes);
    for i in 0..classes {
        for j in 0..classes {
            m.set(i, j, if i == j { 1.0 - rate } else { off });
        }
    }
    TransitionMatrix::from_matrix(m)
}

/// Circular flips: class `j` goes to `j+1 (mod C)` with probability `ε`.
pub fn build_pair(classes: usize, rate: f64) -> Result<TransitionMatrix> {
    check_classes(classes)?;
    if !(0.0..0.5).contains(&rate) {
        return Err(Error::InvalidSpec(format!(
            "pair rate {rate} outside [0, 0.5)"
        )));
    }
    let mut m = Matrix::zeros(classes, classes);
    for j in 0..classes {
        m.set(j, j, 1.0 - rate);
        m.set((j + 1) % classes, j, rate);
    }
    TransitionMatrix::from_matrix(m)
}

const ASYM_STREAM: u64 = 0x6173796d; // distinct stream tag for rate draws

/// Class-dependent flips: each class `j` flips to `j+1 (mod C)` with its own
/// seeded rate drawn uniformly from `[ε/2, ε]`.
pub fn build_asymmetric(classes: usize, rate: f64, seed: u64) -> Result<TransitionMatrix> {
    check_classes(classes)?;
    if !(0.0..0.5).contains(&rate) {
        return Err(Error::InvalidSpec(format!(
            "asymmetric rate {rate} outside [0, 0.5)"
        )));
    }
    let mut rng = RngStream::new(seed, ASYM_STREAM);
    let mut m = Matrix::zeros(classes, classes);
    for j in 0..classes {
        let rj = rng.uniform_in(0.5 * rate, rate);
        m.set(j, j, 1.0 - rj);
        m.set((j + 1) % classes, j, rj);
    }
    TransitionMatrix::from_matrix(m)
}

fn check_classes(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidSpec(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    Ok(())
}

/// Divide each column by its sum, then push the fp remainder into the
/// column's largest entry so sums come out exactly 1.
pub(crate) fn normalize_columns_exact(m: &mut Matrix) {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        let s: f64 = (0..rows).map(|i| m.get(i, j)).sum();
        for i in 0..rows {
            m.set(i, j, m.get(i, j) / s);
        }
        let col_sum: f64 = (0..rows).map(|i| m.get(i, j)).sum();
        let imax = (0..rows)
            .max_by(|&a, &b| m.get(a, j).partial_cmp(&m.get(b, j)).expect("finite"))
            .expect("non-empty column");
        m.set(imax, j, m.get(imax, j) + (1.0 - col_sum));
    }
}

/// Draw a noisy label for each clean label from the matching column of `t`.
///
/// The clean labels are untouched; callers keep them only for diagnostics.
pub fn corrupt_labels(
    clean: &[usize],
    t: &TransitionMatrix,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let classes = t.classes();
    let columns: Vec<Vec<f64>> = (0..classes).map(|j| t.column(j)).collect();
    clean
        .iter()
        .map(|&y| {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            Ok(rng.categorical(&columns[y]))
        })
        .collect()
}

/// Additively bias `t` by `γ · |Δ|` with standard-normal Δ, renormalize the
/// columns, and report the relative entry-wise L1 error of the result.
pub fn perturb_and_normalize(
    t: &TransitionMatrix,
    gamma: f64,
    rng: &mut RngStream,
) -> Result<(TransitionMatrix, f64)> {
    let c = t.classes();
    let mut delta_abs = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            delta_abs.set(i, j, rng.normal().abs());
        }
    }
    perturb_with_delta(t, gamma, &delta_abs)
}

/// Same as [`perturb_and_normalize`] but with the absolute perturbation
/// matrix supplied, which makes the arithmetic directly checkable.
pub fn perturb_with_delta(
    t: &TransitionMatrix,
    gamma: f64,
    delta_abs: &Matrix,
) -> Result<(TransitionMatrix, f64)> {
    if gamma < 0.0 {
        return Err(Error::InvalidSpec(format!("gamma {gamma} must be >= 0")));
    }
    let c = t.classes();
    if delta_abs.rows() != c || delta_abs.cols() != c {
        return Err(Error::DimensionMismatch(format!(
            "perturbation is {}x{}, transition is {c}x{c}",
            delta_abs.rows(),
            delta_abs.cols()
        )));
    }
    let mut biased = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            biased.set(i, j, t.get(i, j) + gamma * delta_abs.get(i, j));
        }
    }
    normalize_columns_exact(&mut biased);
    let normalized = TransitionMatrix::from_matrix(biased)?;
    let t_norm: f64 = t.matrix().data().iter().map(|x| x.abs()).sum();
    let eps_t = t.l11_distance(&normalized) / t_norm;
    Ok((normalized, eps_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_column_stochastic(t: &TransitionMatrix) {
        for j in 0..t.classes() {
            let s: f64 = t.column(j).iter().sum();
            assert!((s - 1.0).abs() <= COLUMN_SUM_TOL, "column {j} sums to {s}");
            for &v in &t.column(j) {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn symmetric_uniform_edge() {
        let t = build_symmetric(2, 0.5).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((t.get(i, j) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_formula() {
        let t = build_symmetric(3, 0.2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.8 } else { 0.1 };
                assert!((t.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_zero_is_identity() {
        let t = build_symmetric(10, 0.0).unwrap();
        assert!(t.matrix().max_abs_diff(&Matrix::identity(10)) < 1e-15);
    }

    #[test]
    fn symmetric_rejects_out_of_range() {
        assert!(build_symmetric(3, 0.7).is_err());
        assert!(build_symmetric(3, -0.1).is_err());
        assert!(build_symmetric(1, 0.1).is_err());
    }

    #[test]
    fn pair_formula_and_wraparound() {
        let t = build_pair(3, 0.45).unwrap();
        for j in 0..3 {
            assert!((t.get(j, j) - 0.55).abs() < 1e-15);
            assert!((t.get((j + 1) % 3, j) - 0.45).abs() < 1e-15);
        }
        let t = build_pair(4, 0.2).unwrap();
        assert!((t.get(3, 3) - 0.8).abs() < 1e-15);
        assert!((t.get(0, 3) - 0.2).abs() < 1e-15);

        assert!(build_pair(2, 0.5).is_err());
        let id = build_pair(2, 0.0).unwrap();
        assert!(id.matrix().max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn asymmetric_bounds_and_determinism() {
        let t = build_asymmetric(3, 0.4, 7).unwrap();
        assert_column_stochastic(&t);
        for j in 0..3 {
            let d = t.get(j, j);
            assert!((0.6..=0.8).contains(&d), "diagonal {d}");
        }
        let again = build_asymmetric(3, 0.4, 7).unwrap();
        assert_eq!(t, again);

        let zero = build_asymmetric(5, 0.0, 123).unwrap();
        assert!(zero.matrix().max_abs_diff(&Matrix::identity(5)) < 1e-15);
    }

    #[test]
    fn corrupt_identity_is_noop() {
        let t = TransitionMatrix::identity(4);
        let clean: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let mut rng = RngStream::new(1, 3);
        let noisy = corrupt_labels(&clean, &t, &mut rng).unwrap();
        assert_eq!(clean, noisy);
    }

    #[test]
    fn corrupt_full_flip() {
        let m = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let t = TransitionMatrix::from_matrix(m).unwrap();
        let clean = vec![0, 1, 0, 1, 1];
        let mut rng = RngStream::new(9, 3);
        let noisy = corrupt_labels(&clean, &t, &mut rng).unwrap();
        assert_eq!(noisy, vec![1, 0, 1, 0, 0]);
    }

    #[test]
    fn corrupt_rejects_out_of_range_label() {
        let t = TransitionMatrix::identity(3);
        let mut rng = RngStream::new(1, 3);
        let err = corrupt_labels(&[0, 5], &t, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                label: 5,
                classes: 3
            }
        ));
    }

    #[test]
    fn corrupt_retention_within_binomial_bound() {
        let t = build_symmetric(3, 0.2).unwrap();
        let clean = vec![0usize; 10_000];
        let mut rng = RngStream::new(42, 3);
        let noisy = corrupt_labels(&clean, &t, &mut rng).unwrap();
        let kept = noisy.iter().filter(|&&y| y == 0).count() as f64 / 10_000.0;
        let bound = 3.0 * (0.2f64 * 0.8 / 10_000.0).sqrt();
        assert!((kept - 0.8).abs() <= bound, "kept {kept}, bound {bound}");
    }

    #[test]
    fn corrupt_is_deterministic() {
        let t = build_symmetric(4, 0.3).unwrap();
        let clean: Vec<usize> = (0..500).map(|i| i % 4).collect();
        let a = corrupt_labels(&clean, &t, &mut RngStream::new(5, 3)).unwrap();
        let b = corrupt_labels(&clean, &t, &mut RngStream::new(5, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_gamma_zero_is_identity_map() {
        let t = build_symmetric(3, 0.2).unwrap();
        let mut rng = RngStream::new(11, 4);
        let (tn, eps) = perturb_and_normalize(&t, 0.0, &mut rng).unwrap();
        assert!(t.matrix().max_abs_diff(tn.matrix()) < 1e-15);
        assert_eq!(eps, 0.0);
    }

    #[test]
    fn perturb_hand_arithmetic() {
        let t = build_symmetric(2, 0.2).unwrap();
        let ones = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let (tn, eps) = perturb_with_delta(&t, 0.1, &ones).unwrap();
        // biased = [[0.9,0.3],[0.3,0.9]], column sums 1.2 -> [[0.75,0.25],[0.25,0.75]]
        let expect = Matrix::from_vec(2, 2, vec![0.75, 0.25, 0.25, 0.75]).unwrap();
        assert!(tn.matrix().max_abs_diff(&expect) < 1e-12);
        assert!((eps - 0.1).abs() < 1e-12);
    }

    #[test]
    fn perturb_monotone_in_gamma_for_fixed_delta() {
        let t = build_pair(4, 0.3).unwrap();
        let mut rng = RngStream::new(2, 4);
        let mut delta = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                delta.set(i, j, rng.normal().abs());
            }
        }
        let mut prev = 0.0;
        for gamma in [0.0, 0.01, 0.05, 0.1, 0.15, 0.5] {
            let (_, eps) = perturb_with_delta(&t, gamma, &delta).unwrap();
            assert!(eps >= prev, "eps_T not monotone at gamma={gamma}");
            if gamma > 0.0 {
                assert!(eps > 0.0, "nonzero gamma must bias the matrix");
            }
            prev = eps;
        }
    }

    #[test]
    fn text_round_trip() {
        let t = build_asymmetric(5, 0.37, 99).unwrap();
        let text = t.to_text(Some("source: unit-test"));
        let back = TransitionMatrix::from_text(&text).unwrap();
        assert_eq!(t, back);
    }

    proptest! {
        #[test]
        fn builders_always_column_stochastic(
            classes in 2usize..8,
            kind in 0u8..3,
            frac in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let t = match kind {
                0 => build_symmetric(classes, frac * (classes as f64 - 1.0) / classes as f64),
                1 => build_pair(classes, frac * 0.499),
                _ => build_asymmetric(classes, frac * 0.499, seed),
            }.unwrap();
            assert_column_stochastic(&t);
        }

        #[test]
        fn perturb_always_column_stochastic(
            classes in 2usize..6,
            gamma in 0.0f64..0.5,
            seed in 0u64..1000,
        ) {
            let t = build_symmetric(classes, 0.2).unwrap();
            let mut rng = RngStream::new(seed, 4);
            let (tn, eps) = perturb_and_normalize(&t, gamma, &mut rng).unwrap();
            assert_column_stochastic(&tn);
            prop_assert!(eps >= 0.0);
            if gamma == 0.0 {
                prop_assert_eq!(eps, 0.0);
            }
        }
    }
}
