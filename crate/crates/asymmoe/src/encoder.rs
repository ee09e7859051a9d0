//! Toy dual-branch encoder skeleton.
//!
//! Each branch is: token embedding -> L residual blocks with per-layer
//! adapter insertion -> projection of a designated token into the shared
//! space. A block is layer-normalization -> linear(d_h x d_h) -> ReLU,
//! residual-added together with the token-mean of the same activation:
//!
//! `block(x)_t = x_t + a_t + mean_s(a_s)`, with `a = relu(layer_norm(x) W)`.
//!
//! The pooled term is the minimal token-mixing path: without it the CLS
//! token's final state cannot depend on the patch tokens at all and the image
//! branch degenerates to a constant. The adapter reads the *block input* and
//! its output is added (scaled by alpha) to the block output:
//!
//! `h_i = block_i(h_{i-1}) + alpha * adapter_i(h_{i-1})`
//!
//! The image branch prepends a learnable CLS token and projects its final
//! state; the text branch projects the final state of the last token.
//!
//! The backbone (embedding, CLS, blocks, projection) is frozen during
//! training; only adapters receive updates. Block parameter gradients are
//! still derived and exposed so the whole chain stays checkable against the
//! finite-difference oracle.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterCache, AdapterGrads, AdapterParams};
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Image,
    Text,
}

/// Structural description of one encoder branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub branch: BranchKind,
    /// Number of residual blocks.
    pub layers: usize,
    /// Hidden width of the branch.
    pub d_h: usize,
    /// Raw tokens per input (patches for the image branch, before CLS).
    pub tokens: usize,
    /// Raw feature width of each input token.
    pub input_width: usize,
    /// Shared projection width.
    pub d_shared: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        if self.tokens == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one token".into()));
        }
        if self.d_shared > self.d_h {
            return Err(Error::InvalidConfig(format!(
                "shared width {} exceeds hidden width {}",
                self.d_shared, self.d_h
            )));
        }
        if self.d_h == 0 || self.input_width == 0 {
            return Err(Error::InvalidConfig("widths must be positive".into()));
        }
        Ok(())
    }

    /// Token rows flowing through the blocks (raw tokens plus CLS on the
    /// image branch).
    pub fn seq_len(&self) -> usize {
        match self.branch {
            BranchKind::Image => self.tokens + 1,
            BranchKind::Text => self.tokens,
        }
    }
}

/// Parameters of one branch: frozen backbone plus optional per-layer adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    /// Embedding matrix, input_width x d_h.
    pub embed: Tensor,
    /// Learnable CLS token, image branch only (1 x d_h).
    pub cls: Option<Tensor>,
    /// Per-layer linear weights, each d_h x d_h.
    pub blocks: Vec<Tensor>,
    /// Per-layer adapters; length equals `layers` when present.
    pub adapters: Option<Vec<AdapterParams>>,
    /// Projection into the shared space, d_h x d_shared.
    pub proj: Tensor,
    pub frozen_backbone: bool,
}

impl EncoderState {
    /// Seeded random backbone with adapters installed at every layer.
    pub fn init(
        config: EncoderConfig,
        adapter: Option<(usize, usize, f64)>, // (r, n, alpha)
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, scale: f64| -> Tensor {
            let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let embed_scale = 1.0 / (config.input_width as f64).sqrt();
        let block_scale = 1.0 / (config.d_h as f64).sqrt();
        let embed = uniform(config.input_width, config.d_h, embed_scale);
        let cls = match config.branch {
            BranchKind::Image => Some(uniform(1, config.d_h, block_scale)),
            BranchKind::Text => None,
        };
        let blocks = (0..config.layers)
            .map(|_| uniform(config.d_h, config.d_h, block_scale))
            .collect();
        let proj = uniform(config.d_h, config.d_shared, block_scale);
        let adapters = match adapter {
            Some((r, n, alpha)) => {
                let mut list = Vec::with_capacity(config.layers);
                for layer in 0..config.layers {
                    list.push(AdapterParams::init(
                        adapter::Orientation::OneDownManyUps,
                        config.d_h,
                        r,
                        n,
                        alpha,
                        seed ^ (0xada0 + layer as u64),
                    )?);
                }
                Some(list)
            }
            None => None,
        };
        Ok(Self {
            config,
            embed,
            cls,
            blocks,
            adapters,
            proj,
            frozen_backbone: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.embed.shape() != [self.config.input_width, self.config.d_h] {
            return Err(Error::ShapeMismatch("embedding matrix shape".into()));
        }
        match (self.config.branch, &self.cls) {
            (BranchKind::Image, Some(cls)) if cls.shape() == [1, self.config.d_h] => {}
            (BranchKind::Text, None) => {}
            _ => return Err(Error::InvalidConfig("CLS token presence must match branch".into())),
        }
        if self.blocks.len() != self.config.layers {
            return Err(Error::InvalidConfig("block count != layers".into()));
        }
        if let Some(adapters) = &self.adapters {
            if adapters.len() != self.config.layers {
                return Err(Error::InvalidConfig("adapter count != layers".into()));
            }
            for a in adapters {
                a.validate()?;
                if a.d_h != self.config.d_h {
                    return Err(Error::ShapeMismatch("adapter width != encoder width".into()));
                }
            }
        }
        if self.proj.shape() != [self.config.d_h, self.config.d_shared] {
            return Err(Error::ShapeMismatch("projection matrix shape".into()));
        }
        Ok(())
    }
}

/// Raw tokens -> layer-0 representations (embedding, plus CLS on the image
/// branch).
pub fn embed(raw: &Tensor, state: &EncoderState) -> Result<Tensor> {
    if !raw.is_matrix() || raw.rows() != state.config.tokens || raw.cols() != state.config.input_width {
        return Err(Error::ShapeMismatch(format!(
            "raw tokens {:?}, want [{}, {}]",
            raw.shape(),
            state.config.tokens,
            state.config.input_width
        )));
    }
    let embedded = raw.matmul(&state.embed)?;
    match &state.cls {
        Some(cls) => {
            let mut data = Vec::with_capacity((raw.rows() + 1) * state.config.d_h);
            data.extend_from_slice(cls.data());
            data.extend_from_slice(embedded.data());
            Ok(Tensor::from_parts(vec![raw.rows() + 1, state.config.d_h], data))
        }
        None => Ok(embedded),
    }
}

fn layer_norm_rows(x: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    let mut mus = Vec::with_capacity(m);
    let mut sigmas = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mut mu = 0.0;
        for &v in row {
            mu += v;
        }
        mu /= n as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mu) * (v - mu);
        }
        var /= n as f64;
        let sigma = (var + LAYER_NORM_EPS).sqrt();
        for j in 0..n {
            *out.at_mut(i, j) = (x.at(i, j) - mu) / sigma;
        }
        mus.push(mu);
        sigmas.push(sigma);
    }
    (out, mus, sigmas)
}

/// dL/dx for y = (x - mu) / sigma per row, given dL/dy.
fn layer_norm_backward(dy: &Tensor, normalized: &Tensor, sigmas: &[f64]) -> Tensor {
    let (m, n) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let mut mean_dy = 0.0;
        let mut mean_dy_xhat = 0.0;
        for j in 0..n {
            mean_dy += dy.at(i, j);
            mean_dy_xhat += dy.at(i, j) * normalized.at(i, j);
        }
        mean_dy /= n as f64;
        mean_dy_xhat /= n as f64;
        for j in 0..n {
            *dx.at_mut(i, j) =
                (dy.at(i, j) - mean_dy - normalized.at(i, j) * mean_dy_xhat) / sigmas[i];
        }
    }
    dx
}

/// Intermediates of one block evaluation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Tensor,
    normalized: Tensor,
    sigmas: Vec<f64>,
    pre_relu: Tensor,
}

/// Block forward: `x_t + a_t + mean_s(a_s)` with `a = relu(layer_norm(x) W)`.
pub fn block_forward(x: &Tensor, weight: &Tensor) -> Result<(Tensor, BlockCache)> {
    let (normalized, _mus, sigmas) = layer_norm_rows(x);
    let pre_relu = normalized.matmul(weight)?;
    let activated = pre_relu.relu();
    let (tokens, d_h) = (x.rows(), x.cols());
    let mut pooled = vec![0.0; d_h];
    for t in 0..tokens {
        for j in 0..d_h {
            pooled[j] += activated.at(t, j);
        }
    }
    for p in &mut pooled {
        *p /= tokens as f64;
    }
    let mut out = x.add(&activated)?;
    for t in 0..tokens {
        for j in 0..d_h {
            *out.at_mut(t, j) += pooled[j];
        }
    }
    Ok((
        out,
        BlockCache {
            input: x.clone(),
            normalized,
            sigmas,
            pre_relu,
        },
    ))
}

/// Block backward: returns (dL/dx, dL/dW).
pub fn block_backward(upstream: &Tensor, cache: &BlockCache, weight: &Tensor) -> Result<(Tensor, Tensor)> {
    let (tokens, d_h) = (upstream.rows(), upstream.cols());
    // activation receives the direct term plus the pooled term (which feeds
    // every row)
    let mut pooled_grad = vec![0.0; d_h];
    for t in 0..tokens {
        for j in 0..d_h {
            pooled_grad[j] += upstream.at(t, j);
        }
    }
    for g in &mut pooled_grad {
        *g /= tokens as f64;
    }
    let mut relu_grad = upstream.clone();
    for t in 0..tokens {
        for j in 0..d_h {
            *relu_grad.at_mut(t, j) += pooled_grad[j];
        }
    }
    for (g, &p) in relu_grad.data_mut().iter_mut().zip(cache.pre_relu.data().iter()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    let weight_grad = cache.normalized.transpose().matmul(&relu_grad)?;
    let norm_grad = relu_grad.matmul(&weight.transpose())?;
    let ln_grad = layer_norm_backward(&norm_grad, &cache.normalized, &cache.sigmas);
    let input_grad = upstream.add(&ln_grad)?;
    Ok((input_grad, weight_grad))
}

/// Full cache of one encode pass, consumed by `encode_backward`.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub layer0: Tensor,
    pub blocks: Vec<BlockCache>,
    /// Adapter caches, present when adapters ran.
    pub adapters: Vec<Option<AdapterCache>>,
    /// Raw adapter outputs (pre-alpha), one per layer when adapters ran.
    pub deltas: Vec<Option<Tensor>>,
    /// Per-layer per-token gates, same presence.
    pub gates: Vec<Option<Tensor>>,
    /// Final token matrix entering the projection.
    pub final_tokens: Tensor,
    /// Row index projected into the shared space.
    pub projected_row: usize,
}

/// Encode raw tokens into the shared space.
///
/// With `adapters_enabled` the per-layer update is
/// `block(h) + alpha * adapter(h)`; otherwise adapters are skipped entirely.
pub fn encode(raw: &Tensor, state: &EncoderState, adapters_enabled: bool) -> Result<(Tensor, EncodeCache)> {
    state.validate()?;
    let layer0 = embed(raw, state)?;
    let mut h = layer0.clone();
    let mut blocks = Vec::with_capacity(state.config.layers);
    let mut adapter_caches = Vec::with_capacity(state.config.layers);
    let mut deltas = Vec::with_capacity(state.config.layers);
    let mut gates = Vec::with_capacity(state.config.layers);
    for layer in 0..state.config.layers {
        let (block_out, block_cache) = block_forward(&h, &state.blocks[layer])?;
        let mut next = block_out;
        match (adapters_enabled, state.adapters.as_ref()) {
            (true, Some(list)) => {
                let fwd = adapter::forward(&h, &list[layer])?;
                next.add_scaled(&fwd.delta, list[layer].alpha);
                adapter_caches.push(Some(fwd.cache));
                deltas.push(Some(fwd.delta));
                gates.push(Some(fwd.gates));
            }
            _ => {
                adapter_caches.push(None);
                deltas.push(None);
                gates.push(None);
            }
        }
        blocks.push(block_cache);
        h = next;
    }
    let projected_row = match state.config.branch {
        BranchKind::Image => 0,
        BranchKind::Text => h.rows() - 1,
    };
    let row = Tensor::matrix(1, state.config.d_h, h.row(projected_row).to_vec())?;
    let vector = row.matmul(&state.proj)?;
    let vector = Tensor::vector(vector.data().to_vec())?;
    Ok((
        vector,
        EncodeCache {
            layer0,
            blocks,
            adapters: adapter_caches,
            deltas,
            gates,
            final_tokens: h,
            projected_row,
        },
    ))
}

/// Gradients produced by one encode backward pass.
#[derive(Debug)]
pub struct EncoderGrads {
    /// Per-layer adapter gradients (None where no adapter ran).
    pub adapters: Vec<Option<AdapterGrads>>,
    /// Per-layer block weight gradients (frozen in training, exposed for
    /// gradient verification).
    pub blocks: Vec<Tensor>,
    /// Gradient at the layer-0 representations.
    pub layer0: Tensor,
}

/// Reverse-mode through an encode pass.
///
/// * `vector_grad` — dL/d(shared-space vector).
/// * `delta_extra` — optional per-layer additional dL/d(delta) terms (the
///   dampening loss differentiates the raw adapter outputs directly).
/// * `gate_extra` — optional per-layer additional dL/d(gates) terms (the
///   load-balancing loss differentiates the gates directly).
pub fn encode_backward(
    vector_grad: &Tensor,
    delta_extra: Option<&[Option<Tensor>]>,
    gate_extra: Option<&[Option<Tensor>]>,
    cache: &EncodeCache,
    state: &EncoderState,
) -> Result<EncoderGrads> {
    let d_h = state.config.d_h;
    if vector_grad.len() != state.config.d_shared {
        return Err(Error::ShapeMismatch("vector gradient width".into()));
    }
    // through the projection: only the projected row receives signal
    let vg = Tensor::matrix(1, state.config.d_shared, vector_grad.data().to_vec())?;
    let row_grad = vg.matmul(&state.proj.transpose())?;
    let mut h_grad = Tensor::zeros(vec![cache.final_tokens.rows(), d_h]);
    for j in 0..d_h {
        *h_grad.at_mut(cache.projected_row, j) = row_grad.at(0, j);
    }

    let mut adapter_grads: Vec<Option<AdapterGrads>> = Vec::with_capacity(state.config.layers);
    adapter_grads.resize_with(state.config.layers, || None);
    let mut block_grads: Vec<Tensor> = Vec::with_capacity(state.config.layers);
    block_grads.resize_with(state.config.layers, || Tensor::zeros(vec![d_h, d_h]));

    for layer in (0..state.config.layers).rev() {
        let (block_in_grad, block_w_grad) =
            block_backward(&h_grad, &cache.blocks[layer], &state.blocks[layer])?;
        block_grads[layer] = block_w_grad;
        let mut input_grad = block_in_grad;
        if let Some(adapter_cache) = &cache.adapters[layer] {
            let params = &state.adapters.as_ref().expect("adapters present")[layer];
            // upstream for the delta: residual path (x alpha) plus any direct term
            let mut delta_grad = h_grad.scale(params.alpha);
            if let Some(extra) = delta_extra.and_then(|e| e[layer].as_ref()) {
                delta_grad = delta_grad.add(extra)?;
            }
            let gate_term = gate_extra.and_then(|e| e[layer].as_ref());
            let grads = adapter::adapter_backward(&delta_grad, gate_term, adapter_cache, params)?;
            input_grad = input_grad.add(&grads.input)?;
            adapter_grads[layer] = Some(grads);
        }
        h_grad = input_grad;
    }

    Ok(EncoderGrads {
        adapters: adapter_grads,
        blocks: block_grads,
        layer0: h_grad,
    })
}

/// Cosine/temperature classifier head.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// Temperature; probabilities are `softmax_c(cos(x, w_c) / tau)`.
    pub tau: f64,
    pub learn_tau: bool,
    /// Class embeddings in the shared space, N_c x d.
    pub class_embeddings: Tensor,
}

impl ClassifierHead {
    pub fn new(tau: f64, learn_tau: bool, class_embeddings: Tensor) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau={tau} must be positive")));
        }
        if class_embeddings.rows() == 0 {
            return Err(Error::InvalidConfig("head needs at least one class".into()));
        }
        for c in 0..class_embeddings.rows() {
            if class_embeddings.row(c).iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateInput(format!("class {c} embedding is zero")));
            }
        }
        Ok(Self {
            tau,
            learn_tau,
            class_embeddings,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_embeddings.rows()
    }
}

/// Classification probabilities `softmax_c(cos(x, w_c) / tau)`.
pub fn classify(x: &Tensor, head: &ClassifierHead) -> Result<Tensor> {
    let cosines = class_cosines(x, head)?;
    cosines.scale(1.0 / head.tau).softmax(0)
}

pub(crate) fn class_cosines(x: &Tensor, head: &ClassifierHead) -> Result<Tensor> {
    let n_c = head.num_classes();
    let mut cos = Vec::with_capacity(n_c);
    for c in 0..n_c {
        let w = Tensor::vector(head.class_embeddings.row(c).to_vec())?;
        cos.push(cosine_similarity(x, &w)?);
    }
    Tensor::vector(cos)
}

/// Confidence score: the maximum class probability.
pub fn confidence(probabilities: &Tensor) -> f64 {
    probabilities.data().iter().copied().fold(0.0, f64::max)
}
