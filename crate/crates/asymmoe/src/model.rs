//! The full dual-encoder model: both branches, the cosine/temperature
//! classifier, and the combined objective with its hand-derived backward.
//!
//! A training step encodes the N_c class prompt sequences through the text
//! branch (so text-adapter gradients flow into the class embeddings), encodes
//! the image batch, classifies, and assembles
//! `total = ce + lambda_bias * bias + lambda_bal * bal`. The backward pass
//! routes three gradient sources into the adapters: the cross-entropy path
//! through the classifier, the dampening penalty directly on the image
//! adapter outputs, and the balancing penalty directly on the gates.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterGrads;
use crate::encoder::{self, encode, encode_backward, EncodeCache, EncoderState};
use crate::error::{Error, Result};
use crate::loss::{self, GateLog, LossBreakdown, LossWeights};
use crate::tensor::Tensor;

/// Which branches contribute gates to the balancing loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceScope {
    Both,
    ImageOnly,
    TextOnly,
}

impl Default for BalanceScope {
    fn default() -> Self {
        BalanceScope::Both
    }
}

#[derive(Debug, Clone)]
pub struct DualEncoderModel {
    pub image: EncoderState,
    pub text: EncoderState,
    /// Classifier temperature.
    pub tau: f64,
    pub learn_tau: bool,
}

impl DualEncoderModel {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.config.d_shared != self.text.config.d_shared {
            return Err(Error::InvalidConfig("branches disagree on shared width".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau={} must be positive", self.tau)));
        }
        Ok(())
    }

    pub fn image_layers(&self) -> usize {
        self.image.config.layers
    }

    pub fn text_layers(&self) -> usize {
        self.text.config.layers
    }
}

/// Everything produced by one batch forward pass.
pub struct BatchForward {
    pub breakdown: LossBreakdown,
    /// B x N_c classification probabilities.
    pub probs: Tensor,
    /// Per-sample shared-space image vectors.
    pub image_vectors: Vec<Tensor>,
    /// N_c x d class embeddings from the text branch.
    pub class_embeddings: Tensor,
    /// Cosine similarities, B x N_c.
    pub cosines: Tensor,
    pub kappas: Vec<f64>,
    /// Gate records: image layers first, then text layers (subject to scope).
    pub gate_log: GateLog,
    pub scope: BalanceScope,
    /// Per-sample per-layer raw image adapter outputs.
    pub image_deltas: Vec<Vec<Tensor>>,
    /// Per-layer mean text adapter output norms (over the prompts).
    pub text_delta_norms: Vec<f64>,
    image_caches: Vec<EncodeCache>,
    text_caches: Vec<EncodeCache>,
}

/// Accumulated gradients of one batch for the trainable parameters.
pub struct ModelGrads {
    /// Per-image-layer adapter gradients, summed over the batch.
    pub image_adapters: Vec<Option<AdapterGrads>>,
    /// Per-text-layer adapter gradients, summed over the prompts.
    pub text_adapters: Vec<Option<AdapterGrads>>,
    pub tau: f64,
}

/// Forward pass over an image batch against class prompt sequences.
///
/// `fixed_kappas` pins the confidence scores instead of reading them from the
/// current probabilities; the finite-difference oracle uses this to evaluate
/// the objective exactly as defined (no gradient through kappa).
pub fn forward_batch(
    model: &DualEncoderModel,
    images: &[Tensor],
    labels: &[usize],
    prompts: &[Tensor],
    weights: &LossWeights,
    scope: BalanceScope,
    fixed_kappas: Option<&[f64]>,
) -> Result<BatchForward> {
    model.validate()?;
    weights.validate()?;
    if images.is_empty() {
        return Err(Error::DegenerateInput("empty image batch".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if prompts.is_empty() {
        return Err(Error::DegenerateInput("no class prompts".into()));
    }
    let n_c = prompts.len();
    let d = model.image.config.d_shared;

    // text branch: class embeddings
    let mut text_caches = Vec::with_capacity(n_c);
    let mut class_rows = Vec::with_capacity(n_c * d);
    for prompt in prompts {
        let (w, cache) = encode(prompt, &model.text, true)?;
        class_rows.extend_from_slice(w.data());
        text_caches.push(cache);
    }
    let class_embeddings = Tensor::matrix(n_c, d, class_rows)?;

    // image branch
    let mut image_caches = Vec::with_capacity(images.len());
    let mut image_vectors = Vec::with_capacity(images.len());
    for tokens in images {
        let (x, cache) = encode(tokens, &model.image, true)?;
        image_vectors.push(x);
        image_caches.push(cache);
    }

    // classifier
    let head = encoder::ClassifierHead::new(model.tau, model.learn_tau, class_embeddings.clone())?;
    let b = images.len();
    let mut cos_rows = Vec::with_capacity(b * n_c);
    for x in &image_vectors {
        let cosines = encoder::class_cosines(x, &head)?;
        cos_rows.extend_from_slice(cosines.data());
    }
    let cosines = Tensor::matrix(b, n_c, cos_rows)?;
    let probs = cosines.scale(1.0 / model.tau).softmax(1)?;

    let kappas: Vec<f64> = match fixed_kappas {
        Some(fixed) => {
            if fixed.len() != b {
                return Err(Error::ShapeMismatch("fixed kappa count".into()));
            }
            fixed.to_vec()
        }
        None => (0..b)
            .map(|j| Tensor::vector(probs.row(j).to_vec()).map(|p| encoder::confidence(&p)))
            .collect::<Result<_>>()?,
    };

    // losses
    let ce = loss::cross_entropy(&probs, labels)?;
    let image_deltas: Vec<Vec<Tensor>> = image_caches
        .iter()
        .map(|cache| cache.deltas.iter().flatten().cloned().collect())
        .collect();
    let bias = loss::dampening_loss(&kappas, &image_deltas)?;

    let mut gate_log = GateLog::default();
    if scope != BalanceScope::TextOnly {
        for layer in 0..model.image_layers() {
            let per_sample: Vec<Tensor> = image_caches
                .iter()
                .map(|c| c.gates[layer].clone().expect("image adapters active"))
                .collect();
            gate_log.push_layer(per_sample);
        }
    }
    if scope != BalanceScope::ImageOnly {
        for layer in 0..model.text_layers() {
            let per_prompt: Vec<Tensor> = text_caches
                .iter()
                .map(|c| c.gates[layer].clone().expect("text adapters active"))
                .collect();
            gate_log.push_layer(per_prompt);
        }
    }
    let bal = loss::load_balance_loss(&gate_log)?;

    let delta_norms: Vec<f64> = (0..model.image_layers())
        .map(|layer| {
            let mut acc = 0.0;
            for sample in &image_deltas {
                acc += sample[layer].l2_norm();
            }
            acc / image_deltas.len() as f64
        })
        .collect();
    let text_delta_norms: Vec<f64> = (0..model.text_layers())
        .map(|layer| {
            let mut acc = 0.0;
            for cache in &text_caches {
                if let Some(delta) = &cache.deltas[layer] {
                    acc += delta.l2_norm();
                }
            }
            acc / text_caches.len() as f64
        })
        .collect();
    let breakdown = loss::total_loss(ce, bias, bal, weights, kappas.clone(), delta_norms)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite total loss {}", breakdown.total)));
    }

    Ok(BatchForward {
        breakdown,
        probs,
        image_vectors,
        class_embeddings,
        cosines,
        kappas,
        gate_log,
        scope,
        image_deltas,
        text_delta_norms,
        image_caches,
        text_caches,
    })
}

/// dL/dx and dL/dw for the batch cosine matrix, given dL/d(cos).
fn cosine_backward(
    cos_grad: &Tensor,
    image_vectors: &[Tensor],
    class_embeddings: &Tensor,
    cosines: &Tensor,
) -> Result<(Vec<Tensor>, Tensor)> {
    let b = image_vectors.len();
    let n_c = class_embeddings.rows();
    let d = class_embeddings.cols();
    let mut x_grads = Vec::with_capacity(b);
    let mut w_grads = Tensor::zeros(vec![n_c, d]);
    let class_norms: Vec<f64> = (0..n_c)
        .map(|c| Tensor::vector(class_embeddings.row(c).to_vec()).map(|w| w.l2_norm()))
        .collect::<Result<_>>()?;
    for (j, x) in image_vectors.iter().enumerate() {
        let nx = x.l2_norm();
        let mut gx = Tensor::zeros(vec![d]);
        for c in 0..n_c {
            let g = cos_grad.at(j, c);
            if g == 0.0 {
                continue;
            }
            let nw = class_norms[c];
            let cos = cosines.at(j, c);
            for i in 0..d {
                let w_i = class_embeddings.at(c, i);
                let x_i = x.data()[i];
                gx.data_mut()[i] += g * (w_i / (nx * nw) - cos * x_i / (nx * nx));
                *w_grads.at_mut(c, i) += g * (x_i / (nx * nw) - cos * w_i / (nw * nw));
            }
        }
        x_grads.push(gx);
    }
    Ok((x_grads, w_grads))
}

/// Reverse-mode over a completed forward pass; returns gradients for every
/// adapter matrix (summed over the batch) and for tau when it is learnable.
pub fn backward_batch(
    model: &DualEncoderModel,
    fwd: &BatchForward,
    labels: &[usize],
) -> Result<ModelGrads> {
    let weights = LossWeights {
        lambda_bias: fwd.breakdown.lambda_bias,
        lambda_bal: fwd.breakdown.lambda_bal,
    };

    // cross-entropy through the temperature softmax
    let logit_grad = loss::cross_entropy_logits_backward(&fwd.probs, labels);
    let cos_grad = logit_grad.scale(1.0 / model.tau);
    let mut tau_grad = 0.0;
    if model.learn_tau {
        for j in 0..logit_grad.rows() {
            for c in 0..logit_grad.cols() {
                tau_grad += logit_grad.at(j, c) * (-fwd.cosines.at(j, c) / (model.tau * model.tau));
            }
        }
    }
    let (x_grads, w_grads) =
        cosine_backward(&cos_grad, &fwd.image_vectors, &fwd.class_embeddings, &fwd.cosines)?;

    // direct gradient terms from the auxiliary losses
    let damp_grads = loss::dampening_loss_backward(&fwd.kappas, &fwd.image_deltas);
    let bal_grads = loss::load_balance_backward(&fwd.gate_log);
    let image_gate_offset = if fwd.scope == BalanceScope::TextOnly { None } else { Some(0) };
    let text_gate_offset = match fwd.scope {
        BalanceScope::Both => Some(model.image_layers()),
        BalanceScope::TextOnly => Some(0),
        BalanceScope::ImageOnly => None,
    };

    let mut image_adapters: Vec<Option<AdapterGrads>> = Vec::new();
    image_adapters.resize_with(model.image_layers(), || None);
    let mut text_adapters: Vec<Option<AdapterGrads>> = Vec::new();
    text_adapters.resize_with(model.text_layers(), || None);

    // image branch, one backward per sample
    for (j, cache) in fwd.image_caches.iter().enumerate() {
        let delta_extra: Vec<Option<Tensor>> = (0..model.image_layers())
            .map(|layer| Some(damp_grads[j][layer].scale(weights.lambda_bias)))
            .collect();
        let gate_extra: Vec<Option<Tensor>> = (0..model.image_layers())
            .map(|layer| {
                image_gate_offset
                    .map(|off| bal_grads[off + layer][j].scale(weights.lambda_bal))
            })
            .collect();
        let grads = encode_backward(
            &x_grads[j],
            Some(&delta_extra),
            Some(&gate_extra),
            cache,
            &model.image,
        )?;
        accumulate(&mut image_adapters, grads.adapters);
    }

    // text branch, one backward per class prompt
    for (c, cache) in fwd.text_caches.iter().enumerate() {
        let w_grad = Tensor::vector(w_grads.row(c).to_vec())?;
        let gate_extra: Vec<Option<Tensor>> = (0..model.text_layers())
            .map(|layer| {
                text_gate_offset
                    .map(|off| bal_grads[off + layer][c].scale(weights.lambda_bal))
            })
            .collect();
        let grads = encode_backward(&w_grad, None, Some(&gate_extra), cache, &model.text)?;
        accumulate(&mut text_adapters, grads.adapters);
    }

    Ok(ModelGrads {
        image_adapters,
        text_adapters,
        tau: tau_grad,
    })
}

fn accumulate(acc: &mut [Option<AdapterGrads>], fresh: Vec<Option<AdapterGrads>>) {
    for (slot, new) in acc.iter_mut().zip(fresh.into_iter()) {
        match (slot.as_mut(), new) {
            (None, Some(g)) => *slot = Some(g),
            (Some(total), Some(g)) => {
                for (t, n) in total.down.iter_mut().zip(g.down.iter()) {
                    t.add_scaled(n, 1.0);
                }
                for (t, n) in total.up.iter_mut().zip(g.up.iter()) {
                    t.add_scaled(n, 1.0);
                }
                total.gate.add_scaled(&g.gate, 1.0);
            }
            _ => {}
        }
    }
}

/// Class embeddings for an arbitrary subset of prompts through the current
/// text branch.
pub fn subset_class_embeddings(
    model: &DualEncoderModel,
    prompts: &[Tensor],
    class_ids: &[usize],
) -> Result<Tensor> {
    let d = model.text.config.d_shared;
    let mut rows = Vec::with_capacity(class_ids.len() * d);
    for &c in class_ids {
        let (w, _) = encode(&prompts[c], &model.text, true)?;
        rows.extend_from_slice(w.data());
    }
    Tensor::matrix(class_ids.len(), d, rows)
}

/// Percent accuracy of the model on labelled samples, classifying among
/// `class_ids` (labels are global ids; predictions index into the subset).
pub fn evaluate_accuracy(
    model: &DualEncoderModel,
    samples: &[(Tensor, usize)],
    prompts: &[Tensor],
    class_ids: &[usize],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::DegenerateInput("accuracy over empty sample set".into()));
    }
    let embeddings = subset_class_embeddings(model, prompts, class_ids)?;
    let head = encoder::ClassifierHead::new(model.tau, model.learn_tau, embeddings)?;
    let mut correct = 0usize;
    for (tokens, label) in samples {
        let (x, _) = encode(tokens, &model.image, true)?;
        let probs = encoder::classify(&x, &head)?;
        let pred = probs
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .expect("nonempty probabilities")
            .0;
        if class_ids[pred] == *label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Batch-mean gate statistics of the current model over a set of samples,
/// restricted to the requested scope. Used for collapse diagnostics.
pub fn gate_statistics(
    model: &DualEncoderModel,
    samples: &[Tensor],
    prompts: &[Tensor],
    scope: BalanceScope,
) -> Result<GateLog> {
    let mut log = GateLog::default();
    if scope != BalanceScope::TextOnly {
        let mut caches = Vec::with_capacity(samples.len());
        for tokens in samples {
            let (_, cache) = encode(tokens, &model.image, true)?;
            caches.push(cache);
        }
        for layer in 0..model.image_layers() {
            log.push_layer(
                caches
                    .iter()
                    .map(|c| c.gates[layer].clone().expect("image adapters active"))
                    .collect(),
            );
        }
    }
    if scope != BalanceScope::ImageOnly {
        let mut caches = Vec::with_capacity(prompts.len());
        for prompt in prompts {
            let (_, cache) = encode(prompt, &model.text, true)?;
            caches.push(cache);
        }
        for layer in 0..model.text_layers() {
            log.push_layer(
                caches
                    .iter()
                    .map(|c| c.gates[layer].clone().expect("text adapters active"))
                    .collect(),
            );
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{BranchKind, EncoderConfig};
    use crate::gradcheck::{check_block, GradCheckConfig};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_model(seed: u64) -> DualEncoderModel {
        let image = EncoderState::init(
            EncoderConfig {
                branch: BranchKind::Image,
                layers: 1,
                d_h: 5,
                tokens: 2,
                input_width: 3,
                d_shared: 3,
            },
            Some((2, 2, 0.6)),
            seed,
        )
        .unwrap();
        let text = EncoderState::init(
            EncoderConfig {
                branch: BranchKind::Text,
                layers: 1,
                d_h: 5,
                tokens: 2,
                input_width: 3,
                d_shared: 3,
            },
            Some((2, 2, 0.6)),
            seed ^ 0x7777,
        )
        .unwrap();
        DualEncoderModel {
            image,
            text,
            tau: 0.5,
            learn_tau: false,
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v * scale
            })
            .collect();
        Tensor::from_parts(vec![rows, cols], data)
    }

    /// Model with random nonzero ups, inputs re-drawn until every ReLU and
    /// every confidence max stays away from a kink.
    fn trainable_instance(seed: u64) -> (DualEncoderModel, Vec<Tensor>, Vec<usize>, Vec<Tensor>) {
        for attempt in 0..300 {
            let s = seed.wrapping_add(attempt * 65537);
            let mut model = tiny_model(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xc0de);
            for branch in [&mut model.image, &mut model.text] {
                for adapter in branch.adapters.as_mut().unwrap() {
                    for up in &mut adapter.up {
                        *up = gaussian(&mut rng, 2, 5, 0.3);
                    }
                }
            }
            let images: Vec<Tensor> = (0..2).map(|_| gaussian(&mut rng, 2, 3, 1.0)).collect();
            let labels = vec![0usize, 1usize];
            let prompts: Vec<Tensor> = (0..2).map(|_| gaussian(&mut rng, 2, 3, 1.0)).collect();

            let fwd = forward_batch(
                &model,
                &images,
                &labels,
                &prompts,
                &LossWeights::default(),
                BalanceScope::Both,
                None,
            );
            let Ok(fwd) = fwd else { continue };
            // keep kappa maxima unambiguous and deltas away from zero norm
            let kappa_clear = fwd.probs.data().chunks(2).all(|row| (row[0] - row[1]).abs() > 1e-2);
            let delta_clear = fwd
                .image_deltas
                .iter()
                .all(|layers| layers.iter().all(|d| d.l2_norm() > 1e-2));
            if kappa_clear && delta_clear {
                return (model, images, labels, prompts);
            }
        }
        panic!("no clean model instance found");
    }

    #[test]
    fn total_equals_ce_plus_weighted_terms() {
        let (model, images, labels, prompts) = trainable_instance(1);
        let w = LossWeights {
            lambda_bias: 0.4,
            lambda_bal: 0.25,
        };
        let fwd = forward_batch(&model, &images, &labels, &prompts, &w, BalanceScope::Both, None).unwrap();
        let b = &fwd.breakdown;
        assert!((b.total - (b.ce + 0.4 * b.bias + 0.25 * b.bal)).abs() < 1e-10);
        assert!(b.ce >= 0.0 && b.bias >= 0.0 && b.bal >= 0.0);
    }

    #[test]
    fn balance_scope_controls_gate_layers() {
        let (model, images, labels, prompts) = trainable_instance(2);
        let w = LossWeights::default();
        let both =
            forward_batch(&model, &images, &labels, &prompts, &w, BalanceScope::Both, None).unwrap();
        let img =
            forward_batch(&model, &images, &labels, &prompts, &w, BalanceScope::ImageOnly, None).unwrap();
        let txt =
            forward_batch(&model, &images, &labels, &prompts, &w, BalanceScope::TextOnly, None).unwrap();
        assert_eq!(both.gate_log.layers.len(), 2);
        assert_eq!(img.gate_log.layers.len(), 1);
        assert_eq!(txt.gate_log.layers.len(), 1);
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        // end-to-end check of the combined loss wrt every adapter matrix of
        // both branches, with kappa pinned exactly as the objective defines
        let cfg = GradCheckConfig::default();
        for seed in 0..5u64 {
            let (model, images, labels, prompts) = trainable_instance(100 + seed);
            let w = LossWeights {
                lambda_bias: 0.3,
                lambda_bal: 0.2,
            };
            let fwd =
                forward_batch(&model, &images, &labels, &prompts, &w, BalanceScope::Both, None).unwrap();
            let kappas = fwd.kappas.clone();
            let grads = backward_batch(&model, &fwd, &labels).unwrap();

            let eval = |m: &DualEncoderModel| -> Result<f64> {
                let f = forward_batch(m, &images, &labels, &prompts, &w, BalanceScope::Both, Some(&kappas))?;
                Ok(f.breakdown.total)
            };

            // image adapter blocks
            let params = &model.image.adapters.as_ref().unwrap()[0];
            let g = grads.image_adapters[0].as_ref().unwrap();
            let checks: Vec<(&str, &Tensor, &Tensor)> = vec![
                ("img.down", &params.down[0], &g.down[0]),
                ("img.up0", &params.up[0], &g.up[0]),
                ("img.up1", &params.up[1], &g.up[1]),
                ("img.gate", &params.gate, &g.gate),
            ];
            for (name, theta, analytic) in checks {
                let report = check_block(
                    name,
                    |t| {
                        let mut m = model.clone();
                        let a = &mut m.image.adapters.as_mut().unwrap()[0];
                        match name {
                            "img.down" => a.down[0] = t.clone(),
                            "img.up0" => a.up[0] = t.clone(),
                            "img.up1" => a.up[1] = t.clone(),
                            "img.gate" => a.gate = t.clone(),
                            _ => unreachable!(),
                        }
                        eval(&m)
                    },
                    theta,
                    analytic,
                    &cfg,
                )
                .unwrap();
                assert!(report.passed, "{name} seed {seed} err {}", report.max_rel_err);
            }

            // text adapter blocks
            let params = &model.text.adapters.as_ref().unwrap()[0];
            let g = grads.text_adapters[0].as_ref().unwrap();
            let checks: Vec<(&str, &Tensor, &Tensor)> = vec![
                ("txt.down", &params.down[0], &g.down[0]),
                ("txt.up0", &params.up[0], &g.up[0]),
                ("txt.gate", &params.gate, &g.gate),
            ];
            for (name, theta, analytic) in checks {
                let report = check_block(
                    name,
                    |t| {
                        let mut m = model.clone();
                        let a = &mut m.text.adapters.as_mut().unwrap()[0];
                        match name {
                            "txt.down" => a.down[0] = t.clone(),
                            "txt.up0" => a.up[0] = t.clone(),
                            "txt.gate" => a.gate = t.clone(),
                            _ => unreachable!(),
                        }
                        eval(&m)
                    },
                    theta,
                    analytic,
                    &cfg,
                )
                .unwrap();
                assert!(report.passed, "{name} seed {seed} err {}", report.max_rel_err);
            }
        }
    }

    #[test]
    fn tau_gradient_matches_finite_differences_when_learnable() {
        let cfg = GradCheckConfig::default();
        let (mut model, images, labels, prompts) = trainable_instance(900);
        model.learn_tau = true;
        let w = LossWeights::default();
        let fwd = forward_batch(&model, &images, &labels, &prompts, &w, BalanceScope::Both, None).unwrap();
        let kappas = fwd.kappas.clone();
        let grads = backward_batch(&model, &fwd, &labels).unwrap();
        let theta = Tensor::vector(vec![model.tau]).unwrap();
        let analytic = Tensor::vector(vec![grads.tau]).unwrap();
        let report = check_block(
            "tau",
            |t| {
                let mut m = model.clone();
                m.tau = t.data()[0];
                let f = forward_batch(&m, &images, &labels, &prompts, &w, BalanceScope::Both, Some(&kappas))?;
                Ok(f.breakdown.total)
            },
            &theta,
            &analytic,
            &cfg,
        )
        .unwrap();
        assert!(report.passed, "tau err {}", report.max_rel_err);
    }

    #[test]
    fn accuracy_is_percent_and_respects_subset() {
        let (model, images, _labels, prompts) = trainable_instance(3);
        let samples: Vec<(Tensor, usize)> =
            images.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        let acc = evaluate_accuracy(&model, &samples, &prompts, &[0, 1]).unwrap();
        assert!((0.0..=100.0).contains(&acc));
    }
}
