//! Training objectives: cross-entropy, the confidence-weighted adapter
//! dampening penalty, the coefficient-of-variation load-balancing loss, the
//! weighted total, and the harmonic-mean metric.
//!
//! Backward passes are hand-derived next to each forward and checked against
//! the finite-difference oracle in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside `log` so saturated probabilities cannot produce -inf.
pub const LOG_CLAMP: f64 = 1e-12;

/// Norms below this are treated as exactly zero when differentiating
/// `||delta||`; the subgradient at the origin is taken as zero.
const NORM_GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bias: f64,
    pub lambda_bal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // suppression strength 0.3, balance weight 0.1
        Self {
            lambda_bias: 0.3,
            lambda_bal: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_bias >= 0.0) || !(self.lambda_bal >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-step loss record. `total = ce + lambda_bias * bias + lambda_bal * bal`
/// holds within 1e-10 by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub bias: f64,
    pub bal: f64,
    pub total: f64,
    pub lambda_bias: f64,
    pub lambda_bal: f64,
    /// Per-sample confidence scores of the step.
    pub kappa: Vec<f64>,
    /// Per-layer mean dampened-branch delta norms of the step.
    pub delta_norms: Vec<f64>,
}

/// Mean negative log-probability of the true labels.
pub fn cross_entropy(probabilities: &Tensor, labels: &[usize]) -> Result<f64> {
    if probabilities.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows vs {} labels",
            probabilities.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::DegenerateInput("cross_entropy over empty batch".into()));
    }
    let n_c = probabilities.cols();
    let mut acc = 0.0;
    for (j, &label) in labels.iter().enumerate() {
        if label >= n_c {
            return Err(Error::Usage(format!(
                "label {label} out of range for {n_c} classes"
            )));
        }
        acc += -probabilities.at(j, label).max(LOG_CLAMP).ln();
    }
    Ok(acc / labels.len() as f64)
}

/// dL/d(logits) for `ce = cross_entropy(softmax(logits), labels)`, the fused
/// softmax + clamped-log backward: `(p - onehot) / B` per row, zeroed on rows
/// where the clamp was active.
pub fn cross_entropy_logits_backward(probabilities: &Tensor, labels: &[usize]) -> Tensor {
    let (b, n_c) = (probabilities.rows(), probabilities.cols());
    let mut grad = Tensor::zeros(vec![b, n_c]);
    let inv_b = 1.0 / b as f64;
    for (j, &label) in labels.iter().enumerate() {
        if probabilities.at(j, label) <= LOG_CLAMP {
            continue; // inside the clamp: locally constant
        }
        for c in 0..n_c {
            let indicator = if c == label { 1.0 } else { 0.0 };
            *grad.at_mut(j, c) = (probabilities.at(j, c) - indicator) * inv_b;
        }
    }
    grad
}

/// Confidence-weighted dampening penalty on the image-branch adapter outputs:
/// `(1/B) sum_j (1 - kappa_j) * sum_i ||delta_{i,j}||_2`, where the norm runs
/// over the flattened token x width delta of layer i for sample j.
///
/// `kappa` values are treated as constants: no gradient flows through them.
pub fn dampening_loss(kappa: &[f64], deltas_per_sample: &[Vec<Tensor>]) -> Result<f64> {
    if kappa.len() != deltas_per_sample.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} confidences vs {} delta stacks",
            kappa.len(),
            deltas_per_sample.len()
        )));
    }
    if kappa.is_empty() {
        return Err(Error::DegenerateInput("dampening_loss over empty batch".into()));
    }
    for &k in kappa {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::Usage(format!("confidence {k} outside [0, 1]")));
        }
    }
    let b = kappa.len() as f64;
    let mut acc = 0.0;
    for (j, layers) in deltas_per_sample.iter().enumerate() {
        let mut norms = 0.0;
        for delta in layers {
            norms += delta.l2_norm();
        }
        acc += (1.0 - kappa[j]) * norms;
    }
    Ok(acc / b)
}

/// dL/d(delta_{i,j}) for the dampening penalty:
/// `(1 - kappa_j) / B * delta / ||delta||`, zero at (numerically) zero norm.
pub fn dampening_loss_backward(kappa: &[f64], deltas_per_sample: &[Vec<Tensor>]) -> Vec<Vec<Tensor>> {
    let b = kappa.len() as f64;
    deltas_per_sample
        .iter()
        .enumerate()
        .map(|(j, layers)| {
            let w = (1.0 - kappa[j]) / b;
            layers
                .iter()
                .map(|delta| {
                    let norm = delta.l2_norm();
                    if norm <= NORM_GRAD_FLOOR {
                        Tensor::zeros(delta.shape().to_vec())
                    } else {
                        delta.scale(w / norm)
                    }
                })
                .collect()
        })
        .collect()
}

/// Gate records of one step: for each adapted layer (across both branches),
/// the per-sample token x expert gate matrices that flowed through it.
#[derive(Debug, Clone, Default)]
pub struct GateLog {
    pub layers: Vec<Vec<Tensor>>,
}

impl GateLog {
    pub fn push_layer(&mut self, per_sample: Vec<Tensor>) {
        self.layers.push(per_sample);
    }

    /// Batch-mean gate vector per layer (token-averaged, then sample-averaged).
    pub fn batch_mean_gates(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|samples| {
                let n = samples[0].cols();
                let mut mean = vec![0.0; n];
                for gates in samples {
                    let tokens = gates.rows() as f64;
                    for k in 0..n {
                        let mut tok_mean = 0.0;
                        for t in 0..gates.rows() {
                            tok_mean += gates.at(t, k);
                        }
                        mean[k] += tok_mean / tokens;
                    }
                }
                for m in &mut mean {
                    *m /= samples.len() as f64;
                }
                mean
            })
            .collect()
    }

    /// Largest absolute deviation of any layer's batch-mean gate from 1/n.
    pub fn max_deviation_from_uniform(&self) -> f64 {
        self.batch_mean_gates()
            .iter()
            .flat_map(|mean| {
                let n = mean.len() as f64;
                mean.iter().map(move |&m| (m - 1.0 / n).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Coefficient-of-variation load-balancing loss:
/// `n^2 * (1/(L*n)) * sum_l sum_k (mean_j w_bar_{l,j,k} - 1/n)^2`, where
/// `w_bar` is the token-averaged gate vector of sample j at layer l and L
/// counts all adapted layers contributing gates.
pub fn load_balance_loss(gates: &GateLog) -> Result<f64> {
    if gates.layers.is_empty() {
        return Err(Error::DegenerateInput("load_balance_loss without gate records".into()));
    }
    for samples in &gates.layers {
        if samples.is_empty() {
            return Err(Error::DegenerateInput("load_balance_loss over empty batch".into()));
        }
    }
    let l = gates.layers.len() as f64;
    let n = gates.layers[0][0].cols() as f64;
    let mut acc = 0.0;
    for mean in gates.batch_mean_gates() {
        for m in mean {
            let dev = m - 1.0 / n;
            acc += dev * dev;
        }
    }
    Ok(n * n * acc / (l * n))
}

/// dL/d(gate value) for the balancing loss, shaped like the input log:
/// `2n/L * (mean_{l,k} - 1/n) / (B_l * T_j)` broadcast over tokens.
pub fn load_balance_backward(gates: &GateLog) -> Vec<Vec<Tensor>> {
    let l = gates.layers.len() as f64;
    let means = gates.batch_mean_gates();
    gates
        .layers
        .iter()
        .zip(means.iter())
        .map(|(samples, mean)| {
            let n = mean.len() as f64;
            let b = samples.len() as f64;
            samples
                .iter()
                .map(|g| {
                    let tokens = g.rows() as f64;
                    let mut out = Tensor::zeros(g.shape().to_vec());
                    for k in 0..mean.len() {
                        let coeff = 2.0 * n / l * (mean[k] - 1.0 / n) / (b * tokens);
                        for t in 0..g.rows() {
                            *out.at_mut(t, k) = coeff;
                        }
                    }
                    out
                })
                .collect()
        })
        .collect()
}

/// Combine the components into the weighted total.
pub fn total_loss(
    ce: f64,
    bias: f64,
    bal: f64,
    weights: &LossWeights,
    kappa: Vec<f64>,
    delta_norms: Vec<f64>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    for v in [ce, bias, bal] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss component {v}")));
        }
    }
    Ok(LossBreakdown {
        ce,
        bias,
        bal,
        total: ce + weights.lambda_bias * bias + weights.lambda_bal * bal,
        lambda_bias: weights.lambda_bias,
        lambda_bal: weights.lambda_bal,
        kappa,
        delta_norms,
    })
}

/// Harmonic mean of two accuracies (in percent): `2ab / (a + b)`, 0 when
/// either side is 0.
pub fn harmonic_mean(base_acc: f64, novel_acc: f64) -> f64 {
    if base_acc == 0.0 || novel_acc == 0.0 {
        return 0.0;
    }
    2.0 * base_acc * novel_acc / (base_acc + novel_acc)
}
