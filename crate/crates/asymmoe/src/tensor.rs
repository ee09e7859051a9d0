//! Dense `f64` tensors and the elementary differentiable operations used by
//! every other module.
//!
//! Everything here computes in 64-bit with a fixed, documented reduction order:
//! sums always run left-to-right over the storage, so repeated runs with the
//! same inputs are bit-identical. There is no reassociation, no SIMD shortcut,
//! no parallel reduce.

use crate::error::{Error, Result};

/// Relative threshold below which a singular value counts as zero in
/// [`numerical_rank`]: a singular value survives if it exceeds
/// `SV_RANK_THRESHOLD * sigma_max`. Structural zeros of the adapter span
/// sit at ~1e-14 relative, real directions are many orders above.
pub const SV_RANK_THRESHOLD: f64 = 1e-9;

/// A dense row-major tensor of `f64` values.
///
/// Invariant: `data.len()` equals the product of `shape`, and every element is
/// finite. Construction through [`Tensor::new`] enforces both.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the shape/length agreement and rejecting
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {}",
                data[bad], bad
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by library ops. Finiteness
    /// holds by construction at the scales this crate works at; debug builds
    /// still verify it.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor value");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape, vec![0.0; len])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() on non-matrix shape {:?}", self.shape);
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on non-matrix shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        let c = self.cols();
        &mut self.data[row * c + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Standard matrix product with a deterministic (left-to-right over the
    /// inner dimension) summation order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() {
            return Err(Error::ShapeMismatch(format!(
                "matmul expects matrices, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += self.data[i * k + p] * other.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Tensor {
        assert!(self.is_matrix(), "transpose() on non-matrix");
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_parts(vec![n, m], out)
    }

    /// Elementwise `max(0, v)`.
    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    /// Numerically stabilized softmax along `axis` (0 for a vector; 0 or 1
    /// for a matrix). Each slice along the axis is max-subtracted before
    /// exponentiation and sums to 1 within 1e-12.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        match self.shape.len() {
            1 => {
                if axis != 0 {
                    return Err(Error::Usage(format!("softmax axis {} on 1-D tensor", axis)));
                }
                if self.data.is_empty() {
                    return Err(Error::DegenerateInput("softmax over empty axis".into()));
                }
                let mut out = vec![0.0; self.data.len()];
                softmax_slice(&self.data, &mut out);
                Ok(Tensor::from_parts(self.shape.clone(), out))
            }
            2 => {
                let (m, n) = (self.rows(), self.cols());
                if (axis == 0 && m == 0) || (axis == 1 && n == 0) {
                    return Err(Error::DegenerateInput("softmax over empty axis".into()));
                }
                let mut out = vec![0.0; m * n];
                match axis {
                    1 => {
                        for i in 0..m {
                            softmax_slice(&self.data[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
                        }
                    }
                    0 => {
                        let mut col = vec![0.0; m];
                        let mut soft = vec![0.0; m];
                        for j in 0..n {
                            for i in 0..m {
                                col[i] = self.data[i * n + j];
                            }
                            softmax_slice(&col, &mut soft);
                            for i in 0..m {
                                out[i * n + j] = soft[i];
                            }
                        }
                    }
                    _ => return Err(Error::Usage(format!("softmax axis {} on 2-D tensor", axis))),
                }
                Ok(Tensor::from_parts(self.shape.clone(), out))
            }
            d => Err(Error::Usage(format!("softmax unsupported for {}-D tensors", d))),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|&v| v * s).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// In-place `self += s * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dot: {} vs {} elements",
                self.data.len(),
                other.data.len()
            )));
        }
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            acc += a * b;
        }
        Ok(acc)
    }

    /// L2 norm over all elements.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn softmax_slice(input: &[f64], out: &mut [f64]) {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(input.iter()) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Identity matrix of size `n`.
pub fn identity(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::from_parts(vec![n, n], data)
}

/// Cosine similarity `x . w / (|x| |w|)` between two equal-length vectors.
///
/// Rejects zero-norm inputs: the value is undefined there.
pub fn cosine_similarity(x: &Tensor, w: &Tensor) -> Result<f64> {
    if x.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine_similarity: {} vs {} elements",
            x.len(),
            w.len()
        )));
    }
    let nx = x.l2_norm();
    let nw = w.l2_norm();
    if nx == 0.0 || nw == 0.0 {
        return Err(Error::DegenerateInput("cosine_similarity of zero-norm vector".into()));
    }
    Ok(x.dot(w)? / (nx * nw))
}

/// Singular values of a 2-D tensor, descending, via one-sided Jacobi
/// orthogonalization of the columns.
///
/// Small dense matrices only; the sweep loop converges quadratically and is
/// fully deterministic (fixed pivot order, no data-dependent branching beyond
/// the rotation threshold).
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    assert!(m.is_matrix(), "singular_values expects a matrix");
    // Work on the orientation with fewer columns.
    let a = if m.rows() >= m.cols() { m.clone() } else { m.transpose() };
    let rows = a.rows();
    let cols = a.cols();
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a.at(i, j)).collect())
        .collect();

    const MAX_SWEEPS: usize = 64;
    const TOL: f64 = 1e-14;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    app += col[p][i] * col[p][i];
                    aqq += col[q][i] * col[q][i];
                    apq += col[p][i] * col[q][i];
                }
                if apq.abs() <= TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let vp = col[p][i];
                    let vq = col[q][i];
                    col[p][i] = c * vp - s * vq;
                    col[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigmas: Vec<f64> = col
        .iter()
        .map(|c| {
            let mut acc = 0.0;
            for v in c {
                acc += v * v;
            }
            acc.sqrt()
        })
        .collect();
    sigmas.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    sigmas
}

/// Number of singular values above `rel_threshold * sigma_max`. Zero for an
/// all-zero matrix.
pub fn numerical_rank(m: &Tensor, rel_threshold: f64) -> usize {
    let sigmas = singular_values(m);
    let max = sigmas.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return 0;
    }
    sigmas.iter().filter(|&&s| s > rel_threshold * max).count()
}
