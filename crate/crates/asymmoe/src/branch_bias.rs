//! Branch-contribution analytics: how much of the task gradient lands on the
//! image branch versus the text branch, the divergence of that split from
//! uniform, and the paired suppression report comparing models trained with
//! and without the dampening penalty.
//!
//! Contributions are measured exactly at the encoder outputs: the per-sample
//! loss is differentiated with respect to the shared-space image vector and
//! with respect to the true-class text embedding, and the mean gradient norms
//! are reported.

use serde::{Deserialize, Serialize};

use crate::encoder::{self, ClassifierHead};
use crate::error::{Error, Result};
use crate::loss::LOG_CLAMP;
use crate::model::{self, DualEncoderModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    /// Kullback-Leibler divergence with natural log (default).
    Kl,
    /// Total variation distance.
    TotalVariation,
}

impl Default for DivergenceKind {
    fn default() -> Self {
        DivergenceKind::Kl
    }
}

/// Contribution split of one evaluation batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchBiasReport {
    /// Mean image-branch gradient norm.
    pub c_v: f64,
    /// Mean text-branch gradient norm.
    pub c_t: f64,
    /// (c_v, c_t) normalized to sum 1.
    pub p_t: (f64, f64),
    /// Divergence of `p_t` from the uniform pair.
    pub divergence: f64,
    pub divergence_kind: DivergenceKind,
    pub samples_used: usize,
}

/// Per-sample gradient norms of the cross-entropy loss at the classifier
/// inputs: `(||d ce_j / d x_j||, ||d ce_j / d w_{y_j}||)`.
///
/// `probs` must be the classification probabilities of `x` against `head`.
fn sample_gradient_norms(
    x: &Tensor,
    label: usize,
    head: &ClassifierHead,
    probs: &Tensor,
    cosines: &Tensor,
) -> (f64, f64) {
    let n_c = head.num_classes();
    let d = x.len();
    let nx = x.l2_norm();
    let p_label = probs.data()[label];
    if p_label <= LOG_CLAMP {
        // clamped log: locally constant loss
        return (0.0, 0.0);
    }
    // d(-log p_label)/d cos_c = (p_c - 1[c=label]) / tau
    let mut gx = vec![0.0; d];
    let mut gw = vec![0.0; d];
    for c in 0..n_c {
        let indicator = if c == label { 1.0 } else { 0.0 };
        let g = (probs.data()[c] - indicator) / head.tau;
        let w_row = head.class_embeddings.row(c);
        let nw = {
            let mut acc = 0.0;
            for &v in w_row {
                acc += v * v;
            }
            acc.sqrt()
        };
        let cos = cosines.data()[c];
        for i in 0..d {
            gx[i] += g * (w_row[i] / (nx * nw) - cos * x.data()[i] / (nx * nx));
            if c == label {
                gw[i] = g * (x.data()[i] / (nx * nw) - cos * w_row[i] / (nw * nw));
            }
        }
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (norm(&gx), norm(&gw))
}

/// Mean gradient norms `(c_v, c_t)` of the per-sample cross-entropy over a
/// labelled batch, measured at the image vector and the true-class text
/// embedding.
pub fn branch_contributions(
    model: &DualEncoderModel,
    batch: &[(Tensor, usize)],
    prompts: &[Tensor],
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("branch contributions over empty batch".into()));
    }
    let class_ids: Vec<usize> = (0..prompts.len()).collect();
    let embeddings = model::subset_class_embeddings(model, prompts, &class_ids)?;
    let head = ClassifierHead::new(model.tau, model.learn_tau, embeddings)?;
    let mut c_v = 0.0;
    let mut c_t = 0.0;
    for (tokens, label) in batch {
        if *label >= prompts.len() {
            return Err(Error::Usage(format!("label {label} has no prompt")));
        }
        let (x, _) = encoder::encode(tokens, &model.image, true)?;
        let cosines = encoder::class_cosines(&x, &head)?;
        let probs = cosines.scale(1.0 / head.tau).softmax(0)?;
        let (gv, gt) = sample_gradient_norms(&x, *label, &head, &probs, &cosines);
        c_v += gv;
        c_t += gt;
    }
    let b = batch.len() as f64;
    Ok((c_v / b, c_t / b))
}

/// Divergence of the normalized contribution pair from uniform.
///
/// Errors when both contributions are zero: the split is undefined there.
pub fn branch_bias(c_v: f64, c_t: f64, kind: DivergenceKind) -> Result<f64> {
    if c_v < 0.0 || c_t < 0.0 {
        return Err(Error::Usage("contributions must be nonnegative".into()));
    }
    let total = c_v + c_t;
    if total == 0.0 {
        return Err(Error::DegenerateInput(
            "branch bias undefined: both contributions are zero".into(),
        ));
    }
    let p = (c_v / total, c_t / total);
    Ok(match kind {
        DivergenceKind::Kl => xlnx_ratio(p.0) + xlnx_ratio(p.1),
        DivergenceKind::TotalVariation => 0.5 * ((p.0 - 0.5).abs() + (p.1 - 0.5).abs()),
    })
}

// p * ln(p / 0.5) with the 0 * ln 0 = 0 convention
fn xlnx_ratio(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / 0.5).ln()
    }
}

/// Assembled report for one model/batch pair.
pub fn bias_report(
    model: &DualEncoderModel,
    batch: &[(Tensor, usize)],
    prompts: &[Tensor],
    kind: DivergenceKind,
) -> Result<BranchBiasReport> {
    let (c_v, c_t) = branch_contributions(model, batch, prompts)?;
    let divergence = branch_bias(c_v, c_t, kind)?;
    let total = c_v + c_t;
    Ok(BranchBiasReport {
        c_v,
        c_t,
        p_t: (c_v / total, c_t / total),
        divergence,
        divergence_kind: kind,
        samples_used: batch.len(),
    })
}

/// Mean over samples of the task-loss gradient norm with respect to each
/// branch's adapter parameters: the adaptation pressure the task exerts on
/// the branch. This is the effective-contribution measure of the suppression
/// report; keeping the adapter state small attenuates every gradient path
/// into the branch, so dampening shows up here directly.
pub fn adapter_gradient_contributions(
    model: &DualEncoderModel,
    batch: &[(Tensor, usize)],
    prompts: &[Tensor],
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("adapter contributions over empty batch".into()));
    }
    let ce_only = crate::loss::LossWeights {
        lambda_bias: 0.0,
        lambda_bal: 0.0,
    };
    let mut c_v = 0.0;
    let mut c_t = 0.0;
    for (tokens, label) in batch {
        let fwd = model::forward_batch(
            model,
            std::slice::from_ref(tokens),
            &[*label],
            prompts,
            &ce_only,
            model::BalanceScope::Both,
            None,
        )?;
        let grads = model::backward_batch(model, &fwd, &[*label])?;
        c_v += stacked_norm(&grads.image_adapters);
        c_t += stacked_norm(&grads.text_adapters);
    }
    let b = batch.len() as f64;
    Ok((c_v / b, c_t / b))
}

fn stacked_norm(grads: &[Option<crate::adapter::AdapterGrads>]) -> f64 {
    let mut acc = 0.0;
    for g in grads.iter().flatten() {
        for t in g.down.iter().chain(g.up.iter()) {
            for v in t.data() {
                acc += v * v;
            }
        }
        for v in g.gate.data() {
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// Paired comparison of two trained models that differ only in the dampening
/// weight: effective image contributions and mean adapter-output norms on a
/// (typically out-of-distribution) batch, plus the suppression flags.
///
/// Two levels are reported. The embedded [`BranchBiasReport`]s carry the
/// encoder-output gradient contributions (the branch-bias definition); the
/// `c_v_eff`/`c_t_eff` fields carry the adapter-parameter gradient norms
/// (adaptation pressure), which is what the suppression flag compares.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub with_dampening: BranchBiasReport,
    pub without_dampening: BranchBiasReport,
    /// Effective image-branch contribution (adaptation pressure), dampened.
    pub c_v_eff_with: f64,
    pub c_t_eff_with: f64,
    /// Same measurements for the undampened model.
    pub c_v_eff_without: f64,
    pub c_t_eff_without: f64,
    /// Mean per-layer image adapter output norm, dampened model.
    pub delta_norm_with: f64,
    /// Same measurement for the undampened model.
    pub delta_norm_without: f64,
    /// Whether c_v_eff(dampened) <= c_v_eff(undampened) on this batch.
    pub contribution_suppressed: bool,
    /// Whether the mean adapter output norm shrank under dampening.
    pub delta_suppressed: bool,
}

/// Mean over samples and layers of the raw image adapter output norm.
pub fn mean_image_delta_norm(
    model: &DualEncoderModel,
    batch: &[(Tensor, usize)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("delta norms over empty batch".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (tokens, _) in batch {
        let (_, cache) = encoder::encode(tokens, &model.image, true)?;
        for delta in cache.deltas.iter().flatten() {
            acc += delta.l2_norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage("model has no image adapters".into()));
    }
    Ok(acc / count as f64)
}

/// Compare two models with matched structure on the same batch. The caller is
/// responsible for the pairing discipline (same seeds, same data, different
/// dampening weight only).
pub fn suppression_report(
    dampened: &DualEncoderModel,
    undampened: &DualEncoderModel,
    batch: &[(Tensor, usize)],
    prompts: &[Tensor],
    kind: DivergenceKind,
) -> Result<SuppressionReport> {
    if dampened.image.config != undampened.image.config
        || dampened.text.config != undampened.text.config
    {
        return Err(Error::InvalidConfig(
            "suppression report requires structurally identical models".into(),
        ));
    }
    let with_dampening = bias_report(dampened, batch, prompts, kind)?;
    let without_dampening = bias_report(undampened, batch, prompts, kind)?;
    let (c_v_eff_with, c_t_eff_with) = adapter_gradient_contributions(dampened, batch, prompts)?;
    let (c_v_eff_without, c_t_eff_without) =
        adapter_gradient_contributions(undampened, batch, prompts)?;
    let delta_norm_with = mean_image_delta_norm(dampened, batch)?;
    let delta_norm_without = mean_image_delta_norm(undampened, batch)?;
    Ok(SuppressionReport {
        contribution_suppressed: c_v_eff_with <= c_v_eff_without,
        delta_suppressed: delta_norm_with <= delta_norm_without,
        with_dampening,
        without_dampening,
        c_v_eff_with,
        c_t_eff_with,
        c_v_eff_without,
        c_t_eff_without,
        delta_norm_with,
        delta_norm_without,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{BranchKind, EncoderConfig, EncoderState};
    use crate::gradcheck::{finite_difference_gradient, GradCheckConfig};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn bias_zero_when_contributions_equal() {
        assert_eq!(branch_bias(2.5, 2.5, DivergenceKind::Kl).unwrap(), 0.0);
        assert_eq!(branch_bias(2.5, 2.5, DivergenceKind::TotalVariation).unwrap(), 0.0);
    }

    #[test]
    fn bias_closed_form_three_to_one() {
        // P = (0.75, 0.25): KL = 0.75 ln 1.5 + 0.25 ln 0.5
        let want = 0.75 * 1.5_f64.ln() + 0.25 * 0.5_f64.ln();
        let got = branch_bias(3.0, 1.0, DivergenceKind::Kl).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn bias_boundary_is_ln_two() {
        let got = branch_bias(0.0, 4.2, DivergenceKind::Kl).unwrap();
        assert!((got - 2.0_f64.ln()).abs() < 1e-12);
        let got = branch_bias(4.2, 0.0, DivergenceKind::Kl).unwrap();
        assert!((got - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bias_both_zero_is_error() {
        assert!(matches!(
            branch_bias(0.0, 0.0, DivergenceKind::Kl),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn bias_is_scale_invariant() {
        let base = branch_bias(3.0, 1.0, DivergenceKind::Kl).unwrap();
        for s in [0.25, 2.0, 1e3, 1e-6] {
            let scaled = branch_bias(3.0 * s, 1.0 * s, DivergenceKind::Kl).unwrap();
            assert!((scaled - base).abs() < 1e-12, "s={s}");
        }
    }

    #[test]
    fn bias_nonnegative_and_zero_only_at_equal() {
        for (a, b) in [(1.0, 2.0), (0.1, 0.1), (5.0, 0.0), (0.3, 0.7)] {
            let d = branch_bias(a, b, DivergenceKind::Kl).unwrap();
            assert!(d >= 0.0);
            if a == b {
                assert_eq!(d, 0.0);
            } else {
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn bias_increases_as_one_branch_fades() {
        // fixed c_t, shrinking c_v toward 0 on a grid: divergence strictly grows
        let c_t = 1.0;
        let mut prev = branch_bias(1.0, c_t, DivergenceKind::Kl).unwrap();
        for i in 1..=20 {
            let c_v = 1.0 - i as f64 * 0.05 + 1e-9; // down to ~0
            let d = branch_bias(c_v.max(0.0), c_t, DivergenceKind::Kl).unwrap();
            assert!(d > prev, "c_v={c_v}: {d} <= {prev}");
            prev = d;
        }
    }

    fn hand_head(tau: f64, rows: Vec<f64>, n_c: usize, d: usize) -> ClassifierHead {
        ClassifierHead::new(tau, false, Tensor::matrix(n_c, d, rows).unwrap()).unwrap()
    }

    #[test]
    fn per_sample_gradients_match_closed_form_two_classes() {
        // x = (1,0) aligned with class 0, class 1 orthogonal, tau = 1:
        // d ce/d x = (0, p_1); d ce/d w_0 = 0
        let head = hand_head(1.0, vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let cosines = encoder::class_cosines(&x, &head).unwrap();
        let probs = cosines.scale(1.0).softmax(0).unwrap();
        let (gv, gt) = sample_gradient_norms(&x, 0, &head, &probs, &cosines);
        let e = std::f64::consts::E;
        let p1 = 1.0 / (e + 1.0);
        assert!((gv - p1).abs() < 1e-12);
        assert!(gt.abs() < 1e-12);
    }

    #[test]
    fn per_sample_gradients_match_finite_differences() {
        let cfg = GradCheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let d = 3;
            let n_c = 3;
            let mut draw = |k: usize| -> Vec<f64> {
                (0..k).map(|_| StandardNormal.sample(&mut rng)).collect()
            };
            let head = hand_head(0.7, draw(n_c * d), n_c, d);
            let x = Tensor::vector(draw(d)).unwrap();
            let label = 1usize;
            let cosines = encoder::class_cosines(&x, &head).unwrap();
            let probs = cosines.scale(1.0 / head.tau).softmax(0).unwrap();
            let (gv, gt) = sample_gradient_norms(&x, label, &head, &probs, &cosines);

            let ce_of_x = |theta: &Tensor| -> crate::error::Result<f64> {
                let cos = encoder::class_cosines(theta, &head)?;
                let p = cos.scale(1.0 / head.tau).softmax(0)?;
                Ok(-p.data()[label].max(LOG_CLAMP).ln())
            };
            let numeric_x = finite_difference_gradient(ce_of_x, &x, &cfg).unwrap();
            assert!((numeric_x.l2_norm() - gv).abs() / gv.max(1e-6) < 1e-4);

            let w_label = Tensor::vector(head.class_embeddings.row(label).to_vec()).unwrap();
            let ce_of_w = |theta: &Tensor| -> crate::error::Result<f64> {
                let mut h = head.clone();
                for i in 0..d {
                    *h.class_embeddings.at_mut(label, i) = theta.data()[i];
                }
                let cos = encoder::class_cosines(&x, &h)?;
                let p = cos.scale(1.0 / h.tau).softmax(0)?;
                Ok(-p.data()[label].max(LOG_CLAMP).ln())
            };
            let numeric_w = finite_difference_gradient(ce_of_w, &w_label, &cfg).unwrap();
            assert!((numeric_w.l2_norm() - gt).abs() / gt.max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn swap_symmetric_instance_gives_equal_contributions() {
        // two samples u, v with class embeddings w0 = v, w1 = u: swapping the
        // branches is a symmetry of the pair, so c_v == c_t
        let u = vec![1.0, 0.0, 0.0];
        let v = vec![0.6, 0.8, 0.0];
        let head = hand_head(0.9, [v.clone(), u.clone()].concat(), 2, 3);
        let norms = |x: &Tensor, label: usize| {
            let cosines = encoder::class_cosines(x, &head).unwrap();
            let probs = cosines.scale(1.0 / head.tau).softmax(0).unwrap();
            sample_gradient_norms(x, label, &head, &probs, &cosines)
        };
        let xu = Tensor::vector(u).unwrap();
        let xv = Tensor::vector(v).unwrap();
        let (gv_a, gt_a) = norms(&xu, 0);
        let (gv_b, gt_b) = norms(&xv, 1);
        let c_v = (gv_a + gv_b) / 2.0;
        let c_t = (gt_a + gt_b) / 2.0;
        assert!((c_v - c_t).abs() < 1e-12, "c_v={c_v} c_t={c_t}");
    }

    fn toy_model(seed: u64) -> DualEncoderModel {
        let mk = |branch: BranchKind, s: u64| {
            EncoderState::init(
                EncoderConfig {
                    branch,
                    layers: 1,
                    d_h: 5,
                    tokens: 2,
                    input_width: 3,
                    d_shared: 3,
                },
                Some((2, 2, 0.5)),
                s,
            )
            .unwrap()
        };
        DualEncoderModel {
            image: mk(BranchKind::Image, seed),
            text: mk(BranchKind::Text, seed ^ 0xff),
            tau: 0.5,
            learn_tau: false,
        }
    }

    fn toy_batch(seed: u64, n: usize) -> (Vec<(Tensor, usize)>, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| -> Tensor {
            let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let batch = (0..n).map(|i| (draw(2, 3), i % 2)).collect();
        let prompts = (0..2).map(|_| draw(2, 3)).collect();
        (batch, prompts)
    }

    #[test]
    fn identical_models_give_identical_reports() {
        let model = toy_model(7);
        let (batch, prompts) = toy_batch(8, 4);
        let a = bias_report(&model, &batch, &prompts, DivergenceKind::Kl).unwrap();
        let b = bias_report(&model, &batch, &prompts, DivergenceKind::Kl).unwrap();
        assert_eq!(a.c_v, b.c_v);
        assert_eq!(a.c_t, b.c_t);
        assert_eq!(a.divergence, b.divergence);
        assert_eq!(a.samples_used, 4);
    }

    #[test]
    fn untrained_pair_reports_equal_effective_contributions() {
        // identical parameters => both sides of the suppression report agree
        let model_a = toy_model(13);
        let model_b = toy_model(13);
        let (batch, prompts) = toy_batch(14, 4);
        let report =
            suppression_report(&model_a, &model_b, &batch, &prompts, DivergenceKind::Kl).unwrap();
        assert_eq!(report.with_dampening.c_v, report.without_dampening.c_v);
        assert!(report.contribution_suppressed);
        assert!(report.delta_suppressed);
    }

    #[test]
    fn mismatched_models_rejected() {
        let model_a = toy_model(1);
        let mut model_b = toy_model(1);
        model_b.image.config.tokens = 3;
        let (batch, prompts) = toy_batch(2, 2);
        assert!(suppression_report(&model_a, &model_b, &batch, &prompts, DivergenceKind::Kl).is_err());
    }

    #[test]
    fn empty_batch_is_error() {
        let model = toy_model(1);
        let (_, prompts) = toy_batch(2, 2);
        assert!(branch_contributions(&model, &[], &prompts).is_err());
    }
}
