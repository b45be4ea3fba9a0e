//! Datasets: a seeded Gaussian-mixture generator with closed-form oracle
//! posteriors, IDX image ingestion, corruption, splits, and normalization.
//!
//! Corruption happens before splitting, so validation labels are noisy —
//! the type system enforces the order because only a [`NoisyDataset`] can
//! be split.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::noise::{corrupt_labels, TransitionMatrix};
use crate::numerics::{stable_softmax, Matrix, RngStream};
use crate::risk::Posterior;
use crate::{Error, Result};

/// Clean dataset: features plus true labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Corrupt the labels through `t`. The clean labels ride along for
    /// diagnostics only; no training objective may read them.
    pub fn corrupt(&self, t: &TransitionMatrix, rng: &mut RngStream) -> Result<NoisyDataset> {
        if t.classes() != self.classes {
            return Err(Error::DimensionMismatch(format!(
                "transition over {} classes, dataset has {}",
                t.classes(),
                self.classes
            )));
        }
        let noisy = corrupt_labels(&self.labels, t, rng)?;
        Ok(NoisyDataset {
            features: self.features.clone(),
            noisy_labels: noisy,
            clean_labels: self.labels.clone(),
            classes: self.classes,
        })
    }

    /// Seeded subsample without replacement.
    pub fn subsample(&self, n: usize, rng: &mut RngStream) -> Dataset {
        let total = self.len();
        let keep = n.min(total);
        let mut order: Vec<usize> = (0..total).collect();
        rng.shuffle(&mut order);
        order.truncate(keep);
        let rows: Vec<Vec<f64>> = order
            .iter()
            .map(|&i| self.features.row(i).to_vec())
            .collect();
        Dataset {
            features: Matrix::from_rows(&rows).expect("rows are uniform"),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Corrupted dataset: noisy labels drive training, clean labels are kept
/// only to split diagnostics.
#[derive(Debug, Clone)]
pub struct NoisyDataset {
    pub features: Matrix,
    pub noisy_labels: Vec<usize>,
    pub clean_labels: Vec<usize>,
    pub classes: usize,
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Seeded shuffle-then-partition into (train, val).
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(NoisyDataset, NoisyDataset)> {
        if !(0.0 < val_fraction && val_fraction < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "val fraction {val_fraction} outside (0, 1)"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = RngStream::named(seed, crate::numerics::StreamId::Split);
        rng.shuffle(&mut order);
        let val_n = (val_fraction * n as f64).round() as usize;
        let (val_idx, train_idx) = order.split_at(val_n);
        Ok((self.take(train_idx), self.take(val_idx)))
    }

    fn take(&self, idx: &[usize]) -> NoisyDataset {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.features.row(i).to_vec()).collect();
        NoisyDataset {
            features: Matrix::from_rows(&rows).expect("rows are uniform"),
            noisy_labels: idx.iter().map(|&i| self.noisy_labels[i]).collect(),
            clean_labels: idx.iter().map(|&i| self.clean_labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// CSV with header `x0..x{d-1},clean_label,noisy_label`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.push("clean_label".into());
        header.push("noisy_label".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let mut row: Vec<String> = self
                .features
                .row(i)
                .iter()
                .map(|v| format!("{v}"))
                .collect();
            row.push(format!("{}", self.clean_labels[i]));
            row.push(format!("{}", self.noisy_labels[i]));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str, classes: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3
            || cols[cols.len() - 2] != "clean_label"
            || cols[cols.len() - 1] != "noisy_label"
        {
            return Err(Error::Format("dataset csv header mismatch".into()));
        }
        let d = cols.len() - 2;
        let mut rows = Vec::new();
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != d + 2 {
                return Err(Error::Format(format!(
                    "csv row {ln} has {} fields",
                    parts.len()
                )));
            }
            let feat: Vec<f64> = parts[..d]
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad value '{t}'")))
                })
                .collect::<Result<_>>()?;
            rows.push(feat);
            clean.push(
                parts[d]
                    .parse::<usize>()
                    .map_err(|_| Error::Format("bad clean label".into()))?,
            );
            noisy.push(
                parts[d + 1]
                    .parse::<usize>()
                    .map_err(|_| Error::Format("bad noisy label".into()))?,
            );
        }
        Ok(NoisyDataset {
            features: Matrix::from_rows(&rows)?,
            noisy_labels: noisy,
            clean_labels: clean,
            classes,
        })
    }

    pub fn load_csv(path: &Path, classes: usize) -> Result<Self> {
        NoisyDataset::from_csv(&fs::read_to_string(path)?, classes)
    }
}

/// Spherical Gaussian mixture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// One mean vector per class.
    pub means: Vec<Vec<f64>>,
    /// Shared isotropic standard deviation.
    pub sigma: f64,
    /// Total sample count, anchors included.
    pub n: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Means evenly spaced on a circle of the given radius in the first two
    /// dimensions.
    pub fn ring(classes: usize, dim: usize, radius: f64, sigma: f64, n: usize, seed: u64) -> Self {
        let means = (0..classes)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * angle.cos();
                if dim > 1 {
                    m[1] = radius * angle.sin();
                }
                m
            })
            .collect();
        SyntheticSpec {
            classes,
            dim,
            means,
            sigma,
            n,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.means.len() != self.classes {
            return Err(Error::InvalidSpec(format!(
                "{} means for {} classes",
                self.means.len(),
                self.classes
            )));
        }
        if self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::InvalidSpec("mean dimension mismatch".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidSpec("sigma must be positive".into()));
        }
        if self.n < 2 * self.classes {
            return Err(Error::InvalidSpec(format!(
                "need at least {} samples for {} classes",
                2 * self.classes,
                self.classes
            )));
        }
        for (a, ma) in self.means.iter().enumerate() {
            for (b, mb) in self.means.iter().enumerate().skip(a + 1) {
                let d2: f64 = ma.iter().zip(mb).map(|(x, y)| (x - y) * (x - y)).sum();
                if d2 == 0.0 {
                    return Err(Error::InvalidSpec(format!("means {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Closed-form clean posterior of a known equal-prior Gaussian mixture.
#[derive(Debug, Clone)]
pub struct OraclePosterior {
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl OraclePosterior {
    /// `P(c|x) = softmax_c(−‖x−μ_c‖²/(2σ²))` under equal priors.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = self
            .means
            .iter()
            .map(|m| {
                let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                -d2 / (2.0 * self.sigma * self.sigma)
            })
            .collect();
        stable_softmax(&scores).expect("finite scores")
    }

    pub fn bayes_label(&self, x: &[f64]) -> usize {
        let p = self.posterior(x);
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .expect("nonempty")
            .0
    }

    /// The noisy-class-posterior oracle `x ↦ T·P(·|x)`.
    pub fn through(&self, t: &TransitionMatrix) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        let t = t.clone();
        move |x: &[f64]| t.matrix().matvec(&self.posterior(x)).expect("dims match")
    }
}

impl Posterior for OraclePosterior {
    fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(OraclePosterior::posterior(self, x))
    }
}

/// Generate an equal-prior mixture with the last `C` examples planted far
/// along each mean direction, where the oracle posterior is one-hot within
/// 1e-12. Labels cycle through the classes so priors are exactly equal
/// over the bulk.
pub fn generate_gaussian_mixture(spec: &SyntheticSpec) -> Result<(Dataset, OraclePosterior)> {
    spec.validate()?;
    let oracle = OraclePosterior {
        means: spec.means.clone(),
        sigma: spec.sigma,
    };
    let mut rng = RngStream::named(spec.seed, crate::numerics::StreamId::DataGen);
    let bulk = spec.n - spec.classes;
    let mut rows = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..bulk {
        let c = i % spec.classes;
        let x: Vec<f64> = spec.means[c]
            .iter()
            .map(|&m| m + spec.sigma * rng.normal())
            .collect();
        rows.push(x);
        labels.push(c);
    }
    for c in 0..spec.classes {
        rows.push(anchor_point(&oracle, &spec.means[c], c)?);
        labels.push(c);
    }
    Ok((
        Dataset {
            features: Matrix::from_rows(&rows)?,
            labels,
            classes: spec.classes,
        },
        oracle,
    ))
}

/// Scale a mean vector outward until the oracle posterior there is one-hot
/// within 1e-12.
fn anchor_point(oracle: &OraclePosterior, mean: &[f64], class: usize) -> Result<Vec<f64>> {
    let mut scale = 2.0;
    while scale < 1e9 {
        let candidate: Vec<f64> = mean.iter().map(|&m| m * scale).collect();
        let p = oracle.posterior(&candidate);
        if p[class] > 1.0 - 1e-12 {
            return Ok(candidate);
        }
        scale *= 2.0;
    }
    Err(Error::InvalidSpec(format!(
        "could not plant an anchor for class {class}; means too close for sigma"
    )))
}

/// Per-dimension affine map fitted on training features.
#[derive(Debug, Clone)]
pub struct Standardizer {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Matrix) -> Standardizer {
        let (n, d) = (train.rows(), train.cols());
        let mut means = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in means.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n.max(1) as f64;
        }
        let mut stds = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), m) in stds.iter_mut().zip(train.row(i)).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut stds {
            *s = (*s / n.max(1) as f64).sqrt().max(1e-8);
        }
        Standardizer { means, stds }
    }

    pub fn apply(&self, features: &mut Matrix) {
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            for ((v, m), s) in row.iter_mut().zip(&self.means).zip(&self.stds) {
                *v = (*v - m) / s;
            }
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!("{what}: truncated header")));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse big-endian IDX image/label files; pixels are scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let img_magic = be_u32(&img_bytes, 0, "image file")?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file {images_path:?}: magic 0x{img_magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = be_u32(&img_bytes, 4, "image file")? as usize;
    let rows = be_u32(&img_bytes, 8, "image file")? as usize;
    let cols = be_u32(&img_bytes, 12, "image file")? as usize;
    let dim = rows * cols;
    if img_bytes.len() != 16 + n * dim {
        return Err(Error::Format(format!(
            "image file {images_path:?}: {} bytes of pixel data, expected {}",
            img_bytes.len().saturating_sub(16),
            n * dim
        )));
    }

    let lbl_magic = be_u32(&lbl_bytes, 0, "label file")?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file {labels_path:?}: magic 0x{lbl_magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n_labels = be_u32(&lbl_bytes, 4, "label file")? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(Error::Format(format!(
            "label file {labels_path:?}: {} label bytes, expected {n_labels}",
            lbl_bytes.len().saturating_sub(8)
        )));
    }
    if n != n_labels {
        return Err(Error::Format(format!("{n} images but {n_labels} labels")));
    }

    let mut features = Matrix::zeros(n, dim);
    for i in 0..n {
        let src = &img_bytes[16 + i * dim..16 + (i + 1) * dim];
        for (dst, &b) in features.row_mut(i).iter_mut().zip(src) {
            *dst = b as f64 / 255.0;
        }
    }
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        features,
        labels,
        classes: classes.max(2),
    })
}

/// Write an IDX image/label pair (the inverse of [`load_idx`], used for
/// fixtures). Pixel values are clamped to [0,1] and quantized to bytes.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    features: &Matrix,
    labels: &[usize],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let n = features.rows();
    if rows * cols != features.cols() || labels.len() != n {
        return Err(Error::DimensionMismatch("idx writer shapes".into()));
    }
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for i in 0..n {
        for &v in features.row(i) {
            img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend(labels.iter().map(|&l| l as u8));
    fs::write(labels_path, lbl)?;
    Ok(())
}
