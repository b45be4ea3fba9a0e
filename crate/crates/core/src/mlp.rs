//! Small multilayer perceptron: rectifier hidden layers, softmax head,
//! hand-written backpropagation with per-example gradient weighting, and a
//! finite-difference oracle for checking it.

use std::fs;
use std::path::Path;

use crate::numerics::{stable_softmax, Matrix, RngStream};
use crate::risk::LossHead;
use crate::{Error, Result};

/// One dense layer; `weight` is `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// MLP parameters. Hidden layers use the rectifier; the final layer emits
/// logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Fan-balanced uniform init: weights in ±√(6/(d_in+d_out)), biases 0.
    pub fn new(dims: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut mlp = Mlp::zeros(dims)?;
        for layer in &mut mlp.layers {
            let (d_out, d_in) = (layer.weight.rows(), layer.weight.cols());
            let bound = (6.0 / (d_in + d_out) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.uniform_in(-bound, bound);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "mlp needs at least input and output dims, all nonzero: {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.cols()];
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.rows()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} params, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    /// Logits for one example.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input dim {} but network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut a = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z: Vec<f64> = (0..layer.weight.rows())
                .map(|i| crate::numerics::dot(layer.weight.row(i), &a) + layer.bias[i])
                .collect();
            if idx + 1 < self.layers.len() {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            a = z;
        }
        Ok(a)
    }

    /// Probability vector for one example.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        stable_softmax(&self.logits(x)?)
    }

    /// Batched forward pass keeping post-rectifier activations for backprop.
    /// The returned cache's last matrix holds the logits.
    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch dim {} but network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut acts: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let prev = if idx == 0 { batch } else { &acts[idx - 1] };
            let mut z = prev.matmul_bt(&layer.weight)?;
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if idx + 1 < self.layers.len() {
                for v in z.data_mut() {
                    *v = v.max(0.0);
                }
            }
            acts.push(z);
        }
        Ok(ForwardCache { acts })
    }

    /// Backprop the given per-example logit gradients through the cached
    /// forward pass. Any per-example scaling must already be folded into
    /// `dlogits` rows; backprop is linear in them.
    pub fn backward(
        &self,
        batch: &Matrix,
        cache: &ForwardCache,
        dlogits: Matrix,
    ) -> Result<GradientBuffer> {
        let mut grads = GradientBuffer::zeros_like(self);
        let mut g = dlogits;
        for idx in (0..self.layers.len()).rev() {
            let prev = if idx == 0 {
                batch
            } else {
                &cache.acts[idx - 1]
            };
            grads.layers[idx].weight = g.matmul_at(prev)?;
            let db = &mut grads.layers[idx].bias;
            for i in 0..g.rows() {
                for (b, &v) in db.iter_mut().zip(g.row(i)) {
                    *b += v;
                }
            }
            if idx > 0 {
                let mut gp = g.matmul(&self.layers[idx].weight)?;
                // Rectifier mask: activation 0 means the unit was off.
                for (v, &a) in gp.data_mut().iter_mut().zip(prev.data()) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
                g = gp;
            }
        }
        Ok(grads)
    }

    /// Mean weighted loss `(1/n)Σ wᵢℓᵢ` and its exact gradient
    /// `(1/n)Σ wᵢ∂ℓᵢ/∂θ`, with the weights treated as constants.
    pub fn weighted_batch_gradient(
        &self,
        batch: &Matrix,
        labels: &[usize],
        weights: &[f64],
        head: &LossHead,
    ) -> Result<(f64, GradientBuffer)> {
        let n = batch.rows();
        if labels.len() != n || weights.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "batch of {n} with {} labels, {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput("weighted batch".into()));
        }
        let cache = self.forward_cached(batch)?;
        let logits = cache.logits();
        let classes = self.output_dim();
        let mut dlogits = Matrix::zeros(n, classes);
        let mut total = 0.0;
        for i in 0..n {
            if !weights[i].is_finite() {
                return Err(Error::NonFinite(format!("weight of example {i}")));
            }
            let (loss, grad) = head.loss_and_logit_grad(logits.row(i), labels[i])?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss of example {i}")));
            }
            total += weights[i] * loss;
            let scale = weights[i] / n as f64;
            for (d, &gv) in dlogits.row_mut(i).iter_mut().zip(&grad) {
                *d = scale * gv;
            }
        }
        let grads = self.backward(batch, &cache, dlogits)?;
        Ok((total / n as f64, grads))
    }

    /// Save as a plain-text checkpoint; values round-trip exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("mlp-checkpoint v1\n");
        out.push_str(&format!("layers {}\n", self.layers.len()));
        for l in &self.layers {
            out.push_str(&format!("layer {} {}\n", l.weight.rows(), l.weight.cols()));
            for i in 0..l.weight.rows() {
                let row: Vec<String> = l.weight.row(i).iter().map(|v| format!("{v}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
            let bias: Vec<String> = l.bias.iter().map(|v| format!("{v}")).collect();
            out.push_str(&bias.join(" "));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "mlp-checkpoint v1" {
            return Err(Error::Format(format!("bad checkpoint header '{header}'")));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("layers "))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("missing layer count".into()))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let dims = lines
                .next()
                .and_then(|l| l.strip_prefix("layer "))
                .ok_or_else(|| Error::Format("missing layer header".into()))?;
            let mut it = dims.split_whitespace();
            let d_out: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("bad layer dims".into()))?;
            let d_in: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("bad layer dims".into()))?;
            let mut data = Vec::with_capacity(d_out * d_in);
            for _ in 0..d_out {
                let row = lines
                    .next()
                    .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
                for tok in row.split_whitespace() {
                    data.push(
                        tok.parse::<f64>()
                            .map_err(|_| Error::Format(format!("bad weight '{tok}'")))?,
                    );
                }
            }
            let bias_line = lines
                .next()
                .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
            let bias: Vec<f64> = bias_line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad bias '{tok}'")))
                })
                .collect::<Result<_>>()?;
            if data.len() != d_out * d_in || bias.len() != d_out {
                return Err(Error::Format("checkpoint shape mismatch".into()));
            }
            layers.push(Layer {
                weight: Matrix::from_vec(d_out, d_in, data)?,
                bias,
            });
        }
        Ok(Mlp { layers })
    }
}

/// Post-activation values of a batched forward pass.
pub struct ForwardCache {
    acts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("nonempty")
    }
}

/// Parameter-shaped accumulator for `∂risk/∂θ` (also reused as the SGD
/// velocity buffer).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub layers: Vec<Layer>,
}

impl GradientBuffer {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        GradientBuffer {
            layers: mlp
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Cross-entropy of a probability vector at a label, clamped at 1e-12
/// before the log.
pub fn per_example_ce(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    Ok(-probs[label].max(1e-12).ln())
}

/// Central finite differences of a scalar objective over every parameter,
/// step 1e-5. Deliberately independent of the backprop path.
pub fn finite_difference_gradient<F>(mlp: &Mlp, objective: F) -> GradientBuffer
where
    F: Fn(&Mlp) -> f64,
{
    let h = 1e-5;
    let base = mlp.params_flat();
    let mut probe = mlp.clone();
    let mut grad_flat = vec![0.0; base.len()];
    let mut params = base.clone();
    for k in 0..base.len() {
        params[k] = base[k] + h;
        probe.set_params_flat(&params).expect("same shape");
        let plus = objective(&probe);
        params[k] = base[k] - h;
        probe.set_params_flat(&params).expect("same shape");
        let minus = objective(&probe);
        params[k] = base[k];
        grad_flat[k] = (plus - minus) / (2.0 * h);
    }
    probe.set_params_flat(&base).expect("same shape");
    let mut out = GradientBuffer::zeros_like(mlp);
    let mut k = 0;
    for l in &mut out.layers {
        let nw = l.weight.data().len();
        l.weight.data_mut().copy_from_slice(&grad_flat[k..k + nw]);
        k += nw;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&grad_flat[k..k + nb]);
        k += nb;
    }
    out
}

/// Largest entry-wise difference between two gradients, normalized by the
/// larger of their largest magnitudes. This is the scale-relative error
/// used by every gradient check in the crate.
pub fn gradient_relative_error(a: &GradientBuffer, b: &GradientBuffer) -> f64 {
    let fa = a.flat();
    let fb = b.flat();
    assert_eq!(fa.len(), fb.len(), "gradient shapes differ");
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    fa.iter()
        .zip(&fb)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}
