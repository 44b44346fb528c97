//! Dense float32 tensors, row-major, plus the pure forward ops the toy
//! transformer is built from.

use crate::error::{Error, Result};

pub const RMS_NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as 2-d (scalars/vectors count as one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Size of the last dimension (the per-row width for 2-d tensors).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

/// C = A · B for A [m, k] and B [k, n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (kb, n) = dims2(b, "matmul rhs")?;
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims {k} vs {kb}"),
        });
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// C = A · Bᵀ for A [m, k] and B [n, k]. Linear layers store weights as
/// [out, in], so this is the forward map for `x · Wᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul_nt lhs")?;
    let (n, kb) = dims2(b, "matmul_nt rhs")?;
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            detail: format!("inner dims {k} vs {kb}"),
        });
    }
    let mut out = vec![0.0f32; m * n];
    matmul_nt_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

fn dims2(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        [n] => Ok((1, *n)),
        other => Err(Error::ShapeMismatch {
            op: what,
            detail: format!("expected 2-d tensor, got shape {other:?}"),
        }),
    }
}

/// out[m,n] = a[m,k] · b[k,n], accumulating into a zeroed buffer.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ. The dot product runs four independent
/// accumulators so it is not latency-bound on the FP add chain.
pub(crate) fn matmul_nt_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0f32;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]. Used by matmul backward.
pub(crate) fn matmul_tn_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stabilized softmax over a slice, in place.
pub(crate) fn softmax_slice(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a vector. Outputs are positive and sum to 1 within 1e-6.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("softmax input")?;
    let mut data = x.data().to_vec();
    softmax_slice(&mut data);
    Tensor::new(x.shape().to_vec(), data)
}

/// RMS normalization over the last dimension followed by a per-channel gain.
pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            detail: format!("gain shape {:?} vs last dim {d}", gain.shape()),
        });
    }
    let mut out = x.data().to_vec();
    rms_norm_into(x.data(), gain.data(), d, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn rms_norm_into(x: &[f32], gain: &[f32], d: usize, out: &mut [f32]) {
    for (x_row, o_row) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let inv = rms_inv(x_row);
        for ((o, &xv), &g) in o_row.iter_mut().zip(x_row).zip(gain) {
            *o = xv * inv * g;
        }
    }
}

pub(crate) fn rms_inv(row: &[f32]) -> f32 {
    let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
    1.0 / (ms + RMS_NORM_EPS).sqrt()
}

/// Mean over positions of −log softmax(logits)[target].
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<f32> {
    let (t, vocab) = dims2(logits, "cross_entropy")?;
    if targets.len() != t {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{} logit rows vs {} targets", t, targets.len()),
        });
    }
    let mut total = 0.0f32;
    for (row, &tgt) in logits.data().chunks_exact(vocab).zip(targets) {
        if tgt as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                token: tgt,
                vocab,
            });
        }
        total += row_neg_log_prob(row, tgt as usize);
    }
    let loss = total / t as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok(loss)
}

pub(crate) fn row_neg_log_prob(row: &[f32], target: usize) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let log_sum: f32 = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
    log_sum - (row[target] - max)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            op: "sub",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale(a: &Tensor, c: f32) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|v| v * c).collect(),
    }
}

pub fn axpy(acc: &mut Tensor, c: f32, x: &Tensor) {
    debug_assert!(acc.same_shape(x));
    for (a, &v) in acc.data.iter_mut().zip(&x.data) {
        *a += c * v;
    }
}

/// Cosine similarity of two equal-length flat vectors. Returns `None` when
/// either vector has zero norm (degenerate input).
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Option<f32> {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += f64::from(x) * f64::from(y);
        na += f64::from(x) * f64::from(x);
        nb += f64::from(y) * f64::from(y);
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na.sqrt() * nb.sqrt())) as f32)
    }
}

/// Indices of the k largest values; equal values break toward the lower index.
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Softmax over the top-k scores only; all other positions are exactly zero.
/// Returns a dense probability vector with exactly k nonzero entries.
pub fn top_k_softmax(scores: &[f32], k: usize) -> Vec<f32> {
    let selected = top_k_indices(scores, k);
    let mut logits: Vec<f32> = selected.iter().map(|&i| scores[i]).collect();
    softmax_slice(&mut logits);
    let mut out = vec![0.0f32; scores.len()];
    for (&i, &p) in selected.iter().zip(&logits) {
        out[i] = p;
    }
    out
}
