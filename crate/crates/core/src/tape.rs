//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value plus whatever
//! saved state its backward rule needs (attention keeps its softmax rows,
//! top-k keeps the selected index sets). `backward` seeds the scalar loss
//! with 1 and walks the tape once in reverse, accumulating gradients into
//! every node that transitively depends on a parameter leaf. Constants never
//! receive gradients, and parameters untouched by the forward pass read back
//! as exact zeros.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcastRow {
        a: Var,
        bias: Var,
    },
    Scale {
        a: Var,
        c: f32,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Silu {
        a: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    MatmulNT {
        a: Var,
        b: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
    },
    Rope {
        x: Var,
        n_heads: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        /// Softmax rows saved for backward, head-major: [h][i][j], j <= i.
        probs: Vec<f32>,
    },
    Embed {
        table: Var,
        tokens: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        /// Full softmax rows saved for backward.
        probs: Vec<f32>,
    },
    TopKSoftmaxRows {
        scores: Var,
        selected: Vec<Vec<usize>>,
    },
    WeightedCombine {
        weights: Var,
        inputs: Vec<Var>,
    },
    MeanRows {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterCombine {
        alpha: Var,
        parts: Vec<ScatterPart>,
    },
}

/// One expert's contribution to a scatter-combine: its output rows `y` map
/// back to positions `rows` of the combined tensor, weighted by the alpha
/// column `expert`.
#[derive(Debug)]
pub struct ScatterPart {
    pub y: Var,
    pub expert: usize,
    pub rows: Vec<usize>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or a zero tensor of `shape` when the forward pass
    /// never used it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from gradient computation (frozen weights, fixed inputs).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        value.ensure_finite(op_name(&op))?;
        Ok(self.push(value, op, requires_grad))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let grad = self.wants(a) || self.wants(b);
        self.push_checked(value, Op::Add { a, b }, grad)
    }

    /// `a[t, d] + bias[d]`, bias broadcast over rows.
    pub fn add_broadcast_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        let d = av.last_dim();
        if bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast_row",
                detail: format!("bias {:?} vs last dim {d}", bv.shape()),
            });
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.wants(a) || self.wants(bias);
        self.push_checked(value, Op::AddBroadcastRow { a, bias }, grad)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = tensor::scale(self.value(a), c);
        let grad = self.wants(a);
        self.push_checked(value, Op::Scale { a, c }, grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if !av.same_shape(bv) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.wants(a) || self.wants(b);
        self.push_checked(value, Op::Mul { a, b }, grad)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * sigmoid(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let grad = self.wants(a);
        self.push_checked(value, Op::Silu { a }, grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let grad = self.wants(a) || self.wants(b);
        self.push_checked(value, Op::Matmul { a, b }, grad)
    }

    /// `a[m, k] · b[n, k]ᵀ`; the forward map of a linear layer stored [out, in].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        let grad = self.wants(a) || self.wants(b);
        self.push_checked(value, Op::MatmulNT { a, b }, grad)
    }

    /// `x · wᵀ + b` in one call.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        self.add_broadcast_row(y, b)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let value = tensor::rms_norm(self.value(x), self.value(gain))?;
        let grad = self.wants(x) || self.wants(gain);
        self.push_checked(value, Op::RmsNorm { x, gain }, grad)
    }

    /// Rotary position embedding over rows 0..t, pairwise within each head.
    pub fn rope(&mut self, x: Var, n_heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let head_dim = check_heads(d, n_heads, true)?;
        let mut data = xv.data().to_vec();
        for (pos, row) in data.chunks_exact_mut(d).enumerate() {
            for h in 0..n_heads {
                let head = &mut row[h * head_dim..(h + 1) * head_dim];
                rotate_head(head, pos, 1.0);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let grad = self.wants(x);
        self.push_checked(value, Op::Rope { x, n_heads }, grad)
    }

    /// Multi-head scaled dot-product attention with a causal mask. Inputs are
    /// [t, d] with heads laid out contiguously along the last dimension.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if !qv.same_shape(kv) || !qv.same_shape(vv) {
            return Err(Error::ShapeMismatch {
                op: "causal_attention",
                detail: format!(
                    "q {:?} k {:?} v {:?}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            });
        }
        let t = qv.rows();
        let d = qv.last_dim();
        let head_dim = check_heads(d, n_heads, false)?;
        let inv_scale = 1.0 / (head_dim as f32).sqrt();

        let mut out = vec![0.0f32; t * d];
        let mut probs = vec![0.0f32; n_heads * t * t];
        let mut scores = vec![0.0f32; t];
        for h in 0..n_heads {
            let col = h * head_dim;
            for i in 0..t {
                let q_row = &qv.data()[i * d + col..i * d + col + head_dim];
                for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                    let k_row = &kv.data()[j * d + col..j * d + col + head_dim];
                    *s = tensor::dot(q_row, k_row) * inv_scale;
                }
                tensor::softmax_slice(&mut scores[..=i]);
                let p_row = &mut probs[h * t * t + i * t..h * t * t + i * t + i + 1];
                p_row.copy_from_slice(&scores[..=i]);
                let o_row = &mut out[i * d + col..i * d + col + head_dim];
                for (j, &p) in p_row.iter().enumerate() {
                    let v_row = &vv.data()[j * d + col..j * d + col + head_dim];
                    for (o, &val) in o_row.iter_mut().zip(v_row) {
                        *o += p * val;
                    }
                }
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        let grad = self.wants(q) || self.wants(k) || self.wants(v);
        self.push_checked(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
            grad,
        )
    }

    /// Row lookup into an embedding table: tokens [t] over table [vocab, d]
    /// give [t, d]. Backward scatter-adds into the used rows only.
    pub fn embed(&mut self, table: Var, tokens: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = match tv.shape() {
            [v, d] => (*v, *d),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "embed",
                    detail: format!("table must be 2-d, got {other:?}"),
                })
            }
        };
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            if tok as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: tok, vocab });
            }
            data.extend_from_slice(&tv.data()[tok as usize * d..(tok as usize + 1) * d]);
        }
        let value = Tensor::new(vec![tokens.len(), d], data)?;
        let grad = self.wants(table);
        self.push_checked(
            value,
            Op::Embed {
                table,
                tokens: tokens.to_vec(),
            },
            grad,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Produces the scalar loss node used to seed backward.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        let t = lv.rows();
        let vocab = lv.last_dim();
        if targets.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{t} logit rows vs {} targets", targets.len()),
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f32;
        for (row, &tgt) in probs.chunks_exact_mut(vocab).zip(targets) {
            if tgt as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: tgt, vocab });
            }
            tensor::softmax_slice(row);
            total -= row[tgt as usize].max(f32::MIN_POSITIVE).ln();
        }
        let value = Tensor::scalar(total / t as f32);
        let grad = self.wants(logits);
        self.push_checked(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            grad,
        )
    }

    /// Row-wise softmax restricted to the k largest scores; the remaining
    /// positions are exactly zero. Ties select the lower index.
    pub fn top_k_softmax_rows(&mut self, scores: Var, k: usize) -> Result<Var> {
        let sv = self.value(scores);
        let n = sv.last_dim();
        if k == 0 || k > n {
            return Err(Error::Config(format!(
                "top-k width {k} invalid for {n} routing scores"
            )));
        }
        let t = sv.rows();
        let mut out = vec![0.0f32; t * n];
        let mut selected = Vec::with_capacity(t);
        for r in 0..t {
            let row = &sv.data()[r * n..(r + 1) * n];
            let idx = tensor::top_k_indices(row, k);
            let mut logits: Vec<f32> = idx.iter().map(|&i| row[i]).collect();
            tensor::softmax_slice(&mut logits);
            for (&i, &p) in idx.iter().zip(&logits) {
                out[r * n + i] = p;
            }
            selected.push(idx);
        }
        let value = Tensor::new(sv.shape().to_vec(), out)?;
        let grad = self.wants(scores);
        self.push_checked(value, Op::TopKSoftmaxRows { scores, selected }, grad)
    }

    /// out[r, :] = Σ_i weights[r, i] · inputs[i][r, :]. A single-row weight
    /// matrix broadcasts over all rows (sequence-level routing). Terms with
    /// an exactly zero weight are skipped, so unselected branches contribute
    /// nothing to the value or to their own gradients.
    pub fn weighted_combine(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Config("weighted_combine needs inputs".into()));
        }
        let wv = self.value(weights);
        let n = wv.last_dim();
        let wr = wv.rows();
        if n != inputs.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_combine",
                detail: format!("{} weight columns vs {} inputs", n, inputs.len()),
            });
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let t = self.value(inputs[0]).rows();
        let d = self.value(inputs[0]).last_dim();
        for &x in inputs {
            if self.value(x).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "weighted_combine",
                    detail: format!("input {:?} vs {:?}", self.value(x).shape(), shape),
                });
            }
        }
        if wr != t && wr != 1 {
            return Err(Error::ShapeMismatch {
                op: "weighted_combine",
                detail: format!("{wr} weight rows vs {t} input rows"),
            });
        }
        let mut out = vec![0.0f32; t * d];
        for (i, &x) in inputs.iter().enumerate() {
            let xv = self.value(x).data();
            for r in 0..t {
                let w = wv.data()[if wr == 1 { i } else { r * n + i }];
                if w == 0.0 {
                    continue;
                }
                let o_row = &mut out[r * d..(r + 1) * d];
                let x_row = &xv[r * d..(r + 1) * d];
                for (o, &v) in o_row.iter_mut().zip(x_row) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let grad = self.wants(weights) || inputs.iter().any(|&x| self.wants(x));
        self.push_checked(
            value,
            Op::WeightedCombine {
                weights,
                inputs: inputs.to_vec(),
            },
            grad,
        )
    }

    /// Mean over rows: [t, d] → [d].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = xv.rows();
        let d = xv.last_dim();
        let mut out = vec![0.0f32; d];
        for row in xv.data().chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= t as f32;
        }
        let value = Tensor::vector(out);
        let grad = self.wants(x);
        self.push_checked(value, Op::MeanRows { x }, grad)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f32 = self.value(x).data().iter().sum();
        let grad = self.wants(x);
        self.push_checked(Tensor::scalar(total), Op::SumAll { x }, grad)
    }

    /// Select rows of `x` by index (duplicates allowed). Backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let t = xv.rows();
        let d = xv.last_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= t {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    detail: format!("row {r} out of {t}"),
                });
            }
            data.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        let grad = self.wants(x);
        self.push_checked(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            grad,
        )
    }

    /// Sparse gated combination over `t` output rows:
    /// out[rows_e[k], :] += alpha[rows_e[k], e] · y_e[k, :] for every part.
    /// A single-row alpha broadcasts (slot `alpha[0, e]`). Positions touched
    /// by no part stay exactly zero, and gradients flow into both the gate
    /// and the contributions.
    pub fn scatter_combine(&mut self, alpha: Var, parts: Vec<ScatterPart>, t: usize) -> Result<Var> {
        let av = self.value(alpha);
        let l = av.last_dim();
        let wr = av.rows();
        if wr != t && wr != 1 {
            return Err(Error::ShapeMismatch {
                op: "scatter_combine",
                detail: format!("{wr} alpha rows vs {t} output rows"),
            });
        }
        if parts.is_empty() {
            return Err(Error::Config("scatter_combine needs parts".into()));
        }
        let d = self.value(parts[0].y).last_dim();
        let mut out = vec![0.0f32; t * d];
        for part in &parts {
            let yv = self.value(part.y);
            if part.expert >= l {
                return Err(Error::ShapeMismatch {
                    op: "scatter_combine",
                    detail: format!("expert {} out of {l}", part.expert),
                });
            }
            if yv.rows() != part.rows.len() || yv.last_dim() != d {
                return Err(Error::ShapeMismatch {
                    op: "scatter_combine",
                    detail: format!(
                        "part shape {:?} vs {} rows of width {d}",
                        yv.shape(),
                        part.rows.len()
                    ),
                });
            }
            for (k, &r) in part.rows.iter().enumerate() {
                if r >= t {
                    return Err(Error::ShapeMismatch {
                        op: "scatter_combine",
                        detail: format!("row {r} out of {t}"),
                    });
                }
                let w = av.data()[if wr == 1 { part.expert } else { r * l + part.expert }];
                if w == 0.0 {
                    continue;
                }
                axpy_into_slice(&mut out[r * d..(r + 1) * d], w, yv.row(k));
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        let grad = self.wants(alpha) || parts.iter().any(|p| self.wants(p.y));
        self.push_checked(value, Op::ScatterCombine { alpha, parts }, grad)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", node.value.shape()),
            });
        }
        node.value.ensure_finite("backward seed")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(node.value.shape().to_vec(), vec![1.0]).unwrap());
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves are skipped"),
            Op::Add { a, b } => {
                for &side in &[*a, *b] {
                    if self.wants(side) {
                        add_into(self.buf(grads, side), g.data());
                    }
                }
            }
            Op::AddBroadcastRow { a, bias } => {
                if self.wants(*a) {
                    add_into(self.buf(grads, *a), g.data());
                }
                if self.wants(*bias) {
                    let d = self.value(*bias).numel();
                    let buf = self.buf(grads, *bias);
                    for row in g.data().chunks_exact(d) {
                        add_into_slice(buf.data_mut(), row);
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.wants(*a) {
                    axpy_into(self.buf(grads, *a), *c, g.data());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = self.value(*b).data().to_vec();
                    mul_add_into(self.buf(grads, *a), g.data(), &bv);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data().to_vec();
                    mul_add_into(self.buf(grads, *b), g.data(), &av);
                }
            }
            Op::Silu { a } => {
                if self.wants(*a) {
                    let buf = self.buf(grads, *a);
                    for ((o, &gv), &x) in buf
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.nodes[a.0].value.data())
                    {
                        let s = sigmoid(x);
                        *o += gv * (s + x * s * (1.0 - s));
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = rows_cols(self.value(*a));
                let n = self.value(*b).last_dim();
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    tensor::matmul_nt_into(g.data(), bv, m, n, k, self.buf(grads, *a).data_mut());
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    tensor::matmul_tn_acc(av, g.data(), m, k, n, self.buf(grads, *b).data_mut());
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = rows_cols(self.value(*a));
                let n = self.value(*b).rows();
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    tensor::matmul_into(g.data(), bv, m, n, k, self.buf(grads, *a).data_mut());
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    tensor::matmul_tn_acc(g.data(), av, m, n, k, self.buf(grads, *b).data_mut());
                }
            }
            Op::RmsNorm { x, gain } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.last_dim();
                if self.wants(*gain) {
                    let buf = self.buf(grads, *gain);
                    for (x_row, g_row) in xv.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                        let inv = tensor::rms_inv(x_row);
                        for ((o, &xi), &gi) in buf.data_mut().iter_mut().zip(x_row).zip(g_row) {
                            *o += gi * xi * inv;
                        }
                    }
                }
                if self.wants(*x) {
                    let buf = self.buf(grads, *x);
                    for ((x_row, g_row), o_row) in xv
                        .data()
                        .chunks_exact(d)
                        .zip(g.data().chunks_exact(d))
                        .zip(buf.data_mut().chunks_exact_mut(d))
                    {
                        let inv = tensor::rms_inv(x_row);
                        let mut dot = 0.0f32;
                        for ((&gi, &gain_i), &xi) in g_row.iter().zip(gv.data()).zip(x_row) {
                            dot += gi * gain_i * xi;
                        }
                        let scale = inv * inv * inv * dot / d as f32;
                        for (((o, &gi), &gain_i), &xi) in
                            o_row.iter_mut().zip(g_row).zip(gv.data()).zip(x_row)
                        {
                            *o += inv * gain_i * gi - scale * xi;
                        }
                    }
                }
            }
            Op::Rope { x, n_heads } => {
                if self.wants(*x) {
                    let d = self.value(*x).last_dim();
                    let head_dim = d / n_heads;
                    let buf = self.buf(grads, *x);
                    for ((pos, g_row), o_row) in g
                        .data()
                        .chunks_exact(d)
                        .enumerate()
                        .zip(buf.data_mut().chunks_exact_mut(d))
                    {
                        let mut row = g_row.to_vec();
                        for h in 0..*n_heads {
                            // transpose of a rotation is the reverse rotation
                            rotate_head(&mut row[h * head_dim..(h + 1) * head_dim], pos, -1.0);
                        }
                        add_into_slice(o_row, &row);
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *n_heads, probs, g, grads);
            }
            Op::Embed { table, tokens } => {
                if self.wants(*table) {
                    let d = self.value(*table).last_dim();
                    let buf = self.buf(grads, *table);
                    for (&tok, g_row) in tokens.iter().zip(g.data().chunks_exact(d)) {
                        let row = &mut buf.data_mut()[tok as usize * d..(tok as usize + 1) * d];
                        add_into_slice(row, g_row);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).last_dim();
                    let gl = g.data()[0] / targets.len() as f32;
                    let buf = self.buf(grads, *logits);
                    for ((p_row, &tgt), o_row) in probs
                        .chunks_exact(vocab)
                        .zip(targets)
                        .zip(buf.data_mut().chunks_exact_mut(vocab))
                    {
                        for (c, (o, &p)) in o_row.iter_mut().zip(p_row).enumerate() {
                            let delta = if c == tgt as usize { 1.0 } else { 0.0 };
                            *o += gl * (p - delta);
                        }
                    }
                }
            }
            Op::TopKSoftmaxRows { scores, selected } => {
                if self.wants(*scores) {
                    let n = self.value(*scores).last_dim();
                    let alpha = self.nodes[id].value.data().to_vec();
                    let buf = self.buf(grads, *scores);
                    for (r, idx) in selected.iter().enumerate() {
                        let mut dot = 0.0f32;
                        for &i in idx {
                            dot += g.data()[r * n + i] * alpha[r * n + i];
                        }
                        for &i in idx {
                            let p = alpha[r * n + i];
                            buf.data_mut()[r * n + i] += p * (g.data()[r * n + i] - dot);
                        }
                    }
                }
            }
            Op::WeightedCombine { weights, inputs } => {
                let wv = self.value(*weights);
                let n = wv.last_dim();
                let wr = wv.rows();
                let d = self.value(inputs[0]).last_dim();
                let t = self.value(inputs[0]).rows();
                if self.wants(*weights) {
                    let values: Vec<&[f32]> =
                        inputs.iter().map(|&x| self.value(x).data()).collect();
                    let buf = self.buf(grads, *weights);
                    for (i, xv) in values.iter().enumerate() {
                        for r in 0..t {
                            let dot =
                                tensor::dot(&g.data()[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d]);
                            let slot = if wr == 1 { i } else { r * n + i };
                            buf.data_mut()[slot] += dot;
                        }
                    }
                }
                for (i, &x) in inputs.iter().enumerate() {
                    if !self.wants(x) {
                        continue;
                    }
                    let w_all: Vec<f32> = (0..t)
                        .map(|r| wv.data()[if wr == 1 { i } else { r * n + i }])
                        .collect();
                    let buf = self.buf(grads, x);
                    for (r, &w) in w_all.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        axpy_into_slice(
                            &mut buf.data_mut()[r * d..(r + 1) * d],
                            w,
                            &g.data()[r * d..(r + 1) * d],
                        );
                    }
                }
            }
            Op::MeanRows { x } => {
                if self.wants(*x) {
                    let t = self.value(*x).rows();
                    let buf = self.buf(grads, *x);
                    let inv = 1.0 / t as f32;
                    for o_row in buf.data_mut().chunks_exact_mut(g.data().len()) {
                        axpy_into_slice(o_row, inv, g.data());
                    }
                }
            }
            Op::SumAll { x } => {
                if self.wants(*x) {
                    let gv = g.data()[0];
                    for o in self.buf(grads, *x).data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let d = self.value(*x).last_dim();
                    let buf = self.buf(grads, *x);
                    for (k, &r) in rows.iter().enumerate() {
                        add_into_slice(
                            &mut buf.data_mut()[r * d..(r + 1) * d],
                            &g.data()[k * d..(k + 1) * d],
                        );
                    }
                }
            }
            Op::ScatterCombine { alpha, parts } => {
                let av = self.value(*alpha);
                let l = av.last_dim();
                let wr = av.rows();
                let d = self.value(parts[0].y).last_dim();
                for part in parts {
                    let slot_of = |r: usize| if wr == 1 { part.expert } else { r * l + part.expert };
                    if self.wants(*alpha) {
                        let yv = self.value(part.y).data().to_vec();
                        let buf = self.buf(grads, *alpha);
                        for (k, &r) in part.rows.iter().enumerate() {
                            buf.data_mut()[slot_of(r)] +=
                                tensor::dot(&g.data()[r * d..(r + 1) * d], &yv[k * d..(k + 1) * d]);
                        }
                    }
                    if self.wants(part.y) {
                        let weights: Vec<f32> =
                            part.rows.iter().map(|&r| av.data()[slot_of(r)]).collect();
                        let buf = self.buf(grads, part.y);
                        for ((k, &r), &w) in part.rows.iter().enumerate().zip(&weights) {
                            if w == 0.0 {
                                continue;
                            }
                            axpy_into_slice(
                                &mut buf.data_mut()[k * d..(k + 1) * d],
                                w,
                                &g.data()[r * d..(r + 1) * d],
                            );
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: &[f32],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let qv = self.value(q);
        let t = qv.rows();
        let d = qv.last_dim();
        let head_dim = d / n_heads;
        let inv_scale = 1.0 / (head_dim as f32).sqrt();
        let shape = qv.shape().to_vec();

        let mut dq = Tensor::zeros(shape.clone());
        let mut dk = Tensor::zeros(shape.clone());
        let mut dv = Tensor::zeros(shape);
        let (q_data, k_data, v_data) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dp = vec![0.0f32; t];
        for h in 0..n_heads {
            let col = h * head_dim;
            for i in 0..t {
                let g_row = &g.data()[i * d + col..i * d + col + head_dim];
                let p_row = &probs[h * t * t + i * t..h * t * t + i * t + i + 1];
                // dV_j += P_ij · dO_i ; dP_ij = dO_i · V_j
                for j in 0..=i {
                    let v_row = &v_data[j * d + col..j * d + col + head_dim];
                    dp[j] = tensor::dot(g_row, v_row);
                    axpy_into_slice(
                        &mut dv.data_mut()[j * d + col..j * d + col + head_dim],
                        p_row[j],
                        g_row,
                    );
                }
                // softmax jacobian: dS = P ⊙ (dP − Σ_j dP_j P_j)
                let mut row_dot = 0.0f32;
                for j in 0..=i {
                    row_dot += dp[j] * p_row[j];
                }
                let q_row = &q_data[i * d + col..i * d + col + head_dim];
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - row_dot) * inv_scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k_row = &k_data[j * d + col..j * d + col + head_dim];
                    axpy_into_slice(
                        &mut dq.data_mut()[i * d + col..i * d + col + head_dim],
                        ds,
                        k_row,
                    );
                    axpy_into_slice(
                        &mut dk.data_mut()[j * d + col..j * d + col + head_dim],
                        ds,
                        q_row,
                    );
                }
            }
        }
        if self.wants(q) {
            add_into(self.buf(grads, q), dq.data());
        }
        if self.wants(k) {
            add_into(self.buf(grads, k), dk.data());
        }
        if self.wants(v) {
            add_into(self.buf(grads, v), dv.data());
        }
    }

    #[allow(clippy::mut_from_ref)]
    fn buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::AddBroadcastRow { .. } => "add_broadcast_row",
        Op::Scale { .. } => "scale",
        Op::Mul { .. } => "mul",
        Op::Silu { .. } => "silu",
        Op::Matmul { .. } => "matmul",
        Op::MatmulNT { .. } => "matmul_nt",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Rope { .. } => "rope",
        Op::CausalAttention { .. } => "causal_attention",
        Op::Embed { .. } => "embed",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::TopKSoftmaxRows { .. } => "top_k_softmax_rows",
        Op::WeightedCombine { .. } => "weighted_combine",
        Op::MeanRows { .. } => "mean_rows",
        Op::SumAll { .. } => "sum_all",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterCombine { .. } => "scatter_combine",
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn check_heads(d: usize, n_heads: usize, need_even_pairs: bool) -> Result<usize> {
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::ShapeMismatch {
            op: "attention_heads",
            detail: format!("width {d} not divisible into {n_heads} heads"),
        });
    }
    let head_dim = d / n_heads;
    if need_even_pairs && head_dim % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "rope",
            detail: format!("head dim {head_dim} must be even"),
        });
    }
    Ok(head_dim)
}

const ROPE_BASE: f32 = 10000.0;

/// Rotate (even, odd) pairs of one head row by `dir` · pos · base^(−2p/hd).
fn rotate_head(head: &mut [f32], pos: usize, dir: f32) {
    let hd = head.len();
    for p in 0..hd / 2 {
        let freq = ROPE_BASE.powf(-((2 * p) as f32) / hd as f32);
        let theta = dir * pos as f32 * freq;
        let (sin, cos) = theta.sin_cos();
        let a = head[2 * p];
        let b = head[2 * p + 1];
        head[2 * p] = a * cos - b * sin;
        head[2 * p + 1] = a * sin + b * cos;
    }
}

fn add_into(buf: &mut Tensor, g: &[f32]) {
    add_into_slice(buf.data_mut(), g);
}

fn add_into_slice(buf: &mut [f32], g: &[f32]) {
    for (o, &v) in buf.iter_mut().zip(g) {
        *o += v;
    }
}

fn axpy_into(buf: &mut Tensor, c: f32, g: &[f32]) {
    axpy_into_slice(buf.data_mut(), c, g);
}

fn axpy_into_slice(buf: &mut [f32], c: f32, g: &[f32]) {
    for (o, &v) in buf.iter_mut().zip(g) {
        *o += c * v;
    }
}

fn mul_add_into(buf: &mut Tensor, g: &[f32], other: &[f32]) {
    for ((o, &gv), &x) in buf.data_mut().iter_mut().zip(g).zip(other) {
        *o += gv * x;
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}
