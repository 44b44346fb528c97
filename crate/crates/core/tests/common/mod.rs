//! Independent f64 reference implementation of the model forward passes,
//! written against the documented math rather than the production code.
//! Integration tests diff production losses/gradients against it.

#![allow(dead_code)]

use std::collections::BTreeMap;

use moemerge_core::hetero::HeteroMoeModel;
use moemerge_core::model::{Checkpoint, ModelConfig, BOS_TOKEN};
use moemerge_core::moe::MoeModel;

pub type Params = BTreeMap<String, Vec<f64>>;

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10000.0;

fn widen(t: &moemerge_core::tensor::Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn params_from_checkpoint(ckpt: &Checkpoint) -> Params {
    ckpt.tensors
        .iter()
        .map(|(name, t)| (name.clone(), widen(t)))
        .collect()
}

/// Flattened-name f64 copy of a token-routed mixture's parameters.
pub fn moe_params(moe: &MoeModel) -> Params {
    let mut p = Params::new();
    for (name, t) in &moe.shared {
        p.insert(name.clone(), widen(t));
    }
    for (i, set) in moe.experts.iter().enumerate() {
        for (name, t) in set {
            p.insert(format!("expert.{i}.{name}"), widen(t));
        }
    }
    for (j, r) in moe.routers.iter().enumerate() {
        p.insert(format!("router.{j}.weight"), widen(r));
    }
    p
}

/// Flattened-name f64 copy of a mixed-dimension mixture's parameters.
pub fn hetero_params(h: &HeteroMoeModel) -> Params {
    let mut p = Params::new();
    p.insert("shared.embed.weight".into(), widen(&h.embed));
    p.insert("shared.head.weight".into(), widen(&h.head));
    p.insert("router.weight".into(), widen(&h.router));
    for (i, e) in h.experts.iter().enumerate() {
        p.insert(format!("expert.{i}.proj_in.weight"), widen(&e.proj_in_w));
        p.insert(format!("expert.{i}.proj_in.bias"), widen(&e.proj_in_b));
        p.insert(format!("expert.{i}.proj_out.weight"), widen(&e.proj_out_w));
        p.insert(format!("expert.{i}.proj_out.bias"), widen(&e.proj_out_b));
        for (name, t) in &e.trunk {
            p.insert(format!("expert.{i}.{name}"), widen(t));
        }
    }
    p
}

fn softmax(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// y[i][j] = sum_k x[i][k] * w[j*d + k]; the [out, in] linear layer map.
fn matmul_nt(x: &[Vec<f64>], w: &[f64], d_out: usize) -> Vec<Vec<f64>> {
    let d_in = x.first().map_or(0, Vec::len);
    x.iter()
        .map(|row| {
            (0..d_out)
                .map(|j| {
                    let wr = &w[j * d_in..(j + 1) * d_in];
                    row.iter().zip(wr).map(|(a, b)| a * b).sum()
                })
                .collect()
        })
        .collect()
}

fn rms_norm(x: &[Vec<f64>], gain: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

fn rope(x: &mut [Vec<f64>], n_heads: usize) {
    let d = x.first().map_or(0, Vec::len);
    let hd = d / n_heads;
    for (pos, row) in x.iter_mut().enumerate() {
        for h in 0..n_heads {
            let head = &mut row[h * hd..(h + 1) * hd];
            for p in 0..hd / 2 {
                let freq = ROPE_BASE.powf(-((2 * p) as f64) / hd as f64);
                let theta = pos as f64 * freq;
                let (sin, cos) = theta.sin_cos();
                let a = head[2 * p];
                let b = head[2 * p + 1];
                head[2 * p] = a * cos - b * sin;
                head[2 * p + 1] = a * sin + b * cos;
            }
        }
    }
}

fn causal_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    n_heads: usize,
) -> Vec<Vec<f64>> {
    let t = q.len();
    let d = q[0].len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0f64; d]; t];
    for h in 0..n_heads {
        let col = h * hd;
        for i in 0..t {
            let mut scores: Vec<f64> = (0..=i)
                .map(|j| {
                    q[i][col..col + hd]
                        .iter()
                        .zip(&k[j][col..col + hd])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            softmax(&mut scores);
            for (j, &p) in scores.iter().enumerate() {
                for c in 0..hd {
                    out[i][col + c] += p * v[j][col + c];
                }
            }
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn get<'a>(p: &'a Params, name: &str) -> &'a Vec<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn attn_core(p: &Params, prefix: &str, i: usize, x: &[Vec<f64>], n_heads: usize) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let mut q = matmul_nt(x, get(p, &format!("{prefix}layer.{i}.attn.wq")), d);
    let mut k = matmul_nt(x, get(p, &format!("{prefix}layer.{i}.attn.wk")), d);
    let v = matmul_nt(x, get(p, &format!("{prefix}layer.{i}.attn.wv")), d);
    rope(&mut q, n_heads);
    rope(&mut k, n_heads);
    let attn = causal_attention(&q, &k, &v, n_heads);
    matmul_nt(&attn, get(p, &format!("{prefix}layer.{i}.attn.wo")), d)
}

fn ffn_apply(p: &Params, prefix: &str, i: usize, x: &[Vec<f64>], d_ffn: usize) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let gate = matmul_nt(x, get(p, &format!("{prefix}layer.{i}.ffn.w_gate")), d_ffn);
    let up = matmul_nt(x, get(p, &format!("{prefix}layer.{i}.ffn.w_up")), d_ffn);
    let act: Vec<Vec<f64>> = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g.iter().zip(u).map(|(a, b)| silu(*a) * b).collect())
        .collect();
    matmul_nt(&act, get(p, &format!("{prefix}layer.{i}.ffn.w_down")), d)
}

fn add_rows(h: &mut [Vec<f64>], o: &[Vec<f64>]) {
    for (hr, or) in h.iter_mut().zip(o) {
        for (a, b) in hr.iter_mut().zip(or) {
            *a += b;
        }
    }
}

fn embed_rows(table: &[f64], d: usize, tokens: &[u32]) -> Vec<Vec<f64>> {
    tokens
        .iter()
        .map(|&t| table[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect()
}

/// Layer stack plus final norm on already-embedded rows; tensor names are
/// looked up under `prefix` (empty for a dense checkpoint).
fn trunk(p: &Params, prefix: &str, config: &ModelConfig, mut h: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..config.n_layers {
        let normed = rms_norm(&h, get(p, &format!("{prefix}layer.{i}.attn_norm.gain")));
        let attn = attn_core(p, prefix, i, &normed, config.n_heads);
        add_rows(&mut h, &attn);
        let normed = rms_norm(&h, get(p, &format!("{prefix}layer.{i}.ffn_norm.gain")));
        let ffn = ffn_apply(p, prefix, i, &normed, config.d_ffn);
        add_rows(&mut h, &ffn);
    }
    rms_norm(&h, get(p, &format!("{prefix}final_norm.gain")))
}

fn cross_entropy(logits: &[Vec<f64>], targets: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &tgt) in logits.iter().zip(targets) {
        let mut probs = row.clone();
        softmax(&mut probs);
        total -= probs[tgt as usize].ln();
    }
    total / targets.len() as f64
}

fn teacher_forcing_split(tokens: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = vec![BOS_TOKEN];
    input.extend_from_slice(&tokens[..tokens.len() - 1]);
    (input, tokens.to_vec())
}

/// Mean next-token loss of a dense checkpoint's parameters.
pub fn ref_dense_loss(p: &Params, config: &ModelConfig, tokens: &[u32]) -> f64 {
    let (input, targets) = teacher_forcing_split(tokens);
    let emb = embed_rows(get(p, "embed.weight"), config.d_model, &input);
    let h = trunk(p, "", config, emb);
    let logits = matmul_nt(&h, get(p, "head.weight"), config.vocab_size);
    cross_entropy(&logits, &targets)
}

/// k largest by score, ties to the lower index, then softmax over the
/// selected scores only; zeros elsewhere.
pub fn top_k_softmax(scores: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    let mut sel: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    softmax(&mut sel);
    let mut out = vec![0.0; scores.len()];
    for (&i, &w) in idx.iter().zip(&sel) {
        out[i] = w;
    }
    out
}

/// Mixture loss with merged attention and per-layer top-k token routing,
/// matching the flattened names (shared verbatim, expert.{i}., router.{j}.).
pub fn ref_moe_loss(
    p: &Params,
    config: &ModelConfig,
    n_experts: usize,
    top_k: usize,
    tokens: &[u32],
) -> f64 {
    let (input, targets) = teacher_forcing_split(tokens);
    let mut h = embed_rows(get(p, "embed.weight"), config.d_model, &input);
    for j in 0..config.n_layers {
        let normed = rms_norm(&h, get(p, &format!("layer.{j}.attn_norm.gain")));
        let attn = attn_core(p, "", j, &normed, config.n_heads);
        add_rows(&mut h, &attn);

        let scores = matmul_nt(&h, get(p, &format!("router.{j}.weight")), n_experts);
        let normed = rms_norm(&h, get(p, &format!("layer.{j}.ffn_norm.gain")));
        for (r, row) in normed.iter().enumerate() {
            let gates = top_k_softmax(&scores[r], top_k);
            let mut mix = vec![0.0f64; config.d_model];
            for (i, &g) in gates.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let y = ffn_apply(
                    p,
                    &format!("expert.{i}."),
                    j,
                    std::slice::from_ref(row),
                    config.d_ffn,
                );
                for (m, v) in mix.iter_mut().zip(&y[0]) {
                    *m += g * v;
                }
            }
            for (a, b) in h[r].iter_mut().zip(&mix) {
                *a += b;
            }
        }
    }
    let h = rms_norm(&h, get(p, "final_norm.gain"));
    let logits = matmul_nt(&h, get(p, "head.weight"), config.vocab_size);
    cross_entropy(&logits, &targets)
}

/// Smallest margin between the k-th selected router score and the best
/// unselected one over every (layer, token) decision; infinite when all
/// experts are always selected. Finite differences need this positive and
/// comfortably larger than the probe step.
pub fn moe_min_selection_gap(moe: &MoeModel, tokens: &[u32]) -> Option<f64> {
    let l = moe.n_experts();
    if moe.top_k >= l {
        return Some(f64::INFINITY);
    }
    let p = moe_params(moe);
    let config = &moe.config;
    let (input, _) = teacher_forcing_split(tokens);
    let mut h = embed_rows(get(&p, "embed.weight"), config.d_model, &input);
    let mut min_gap = f64::INFINITY;
    for j in 0..config.n_layers {
        let normed = rms_norm(&h, get(&p, &format!("layer.{j}.attn_norm.gain")));
        let attn = attn_core(&p, "", j, &normed, config.n_heads);
        add_rows(&mut h, &attn);

        let scores = matmul_nt(&h, get(&p, &format!("router.{j}.weight")), l);
        let normed = rms_norm(&h, get(&p, &format!("layer.{j}.ffn_norm.gain")));
        for (r, row) in normed.iter().enumerate() {
            let mut sorted = scores[r].clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            min_gap = min_gap.min(sorted[moe.top_k - 1] - sorted[moe.top_k]);
            let gates = top_k_softmax(&scores[r], moe.top_k);
            let mut mix = vec![0.0f64; config.d_model];
            for (i, &g) in gates.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let y = ffn_apply(
                    &p,
                    &format!("expert.{i}."),
                    j,
                    std::slice::from_ref(row),
                    config.d_ffn,
                );
                for (m, v) in mix.iter_mut().zip(&y[0]) {
                    *m += g * v;
                }
            }
            for (a, b) in h[r].iter_mut().zip(&mix) {
                *a += b;
            }
        }
    }
    Some(min_gap)
}

/// Margin between the k-th selected and best unselected sequence-routing
/// score of a mixed-dimension mixture.
pub fn hetero_selection_gap(h: &HeteroMoeModel, tokens: &[u32]) -> Option<f64> {
    let l = h.experts.len();
    if h.top_k >= l {
        return Some(f64::INFINITY);
    }
    let p = hetero_params(h);
    let d = h.d_shared();
    let (input, _) = teacher_forcing_split(tokens);
    let emb = embed_rows(get(&p, "shared.embed.weight"), d, &input);
    let t = emb.len();
    let mean: Vec<f64> = (0..d)
        .map(|c| emb.iter().map(|row| row[c]).sum::<f64>() / t as f64)
        .collect();
    let scores = matmul_nt(std::slice::from_ref(&mean), get(&p, "router.weight"), l);
    let mut sorted = scores[0].clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Some(sorted[h.top_k - 1] - sorted[h.top_k])
}

fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64], d_out: usize) -> Vec<Vec<f64>> {
    let mut y = matmul_nt(x, w, d_out);
    for row in &mut y {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    y
}

/// Mixed-dimension mixture loss: shared embed/head at d_shared, sequence
/// routing from mean embeddings, per-expert projectors around each trunk.
pub fn ref_hetero_loss(
    p: &Params,
    expert_configs: &[ModelConfig],
    d_shared: usize,
    vocab: usize,
    top_k: usize,
    tokens: &[u32],
) -> f64 {
    let (input, targets) = teacher_forcing_split(tokens);
    let emb = embed_rows(get(p, "shared.embed.weight"), d_shared, &input);
    let t = emb.len();
    let mean: Vec<f64> = (0..d_shared)
        .map(|c| emb.iter().map(|row| row[c]).sum::<f64>() / t as f64)
        .collect();
    let scores = matmul_nt(
        std::slice::from_ref(&mean),
        get(p, "router.weight"),
        expert_configs.len(),
    );
    let alpha = top_k_softmax(&scores[0], top_k);

    let mut combined = vec![vec![0.0f64; d_shared]; t];
    for (i, config) in expert_configs.iter().enumerate() {
        if alpha[i] == 0.0 {
            continue;
        }
        let prefix = format!("expert.{i}.");
        let x = affine(
            &emb,
            get(p, &format!("{prefix}proj_in.weight")),
            get(p, &format!("{prefix}proj_in.bias")),
            config.d_model,
        );
        let h = trunk(p, &prefix, config, x);
        let r = affine(
            &h,
            get(p, &format!("{prefix}proj_out.weight")),
            get(p, &format!("{prefix}proj_out.bias")),
            d_shared,
        );
        for (c, rr) in combined.iter_mut().zip(&r) {
            for (a, b) in c.iter_mut().zip(rr) {
                *a += alpha[i] * b;
            }
        }
    }
    let logits = matmul_nt(&combined, get(p, "shared.head.weight"), vocab);
    cross_entropy(&logits, &targets)
}

/// Central finite differences of `loss` over every parameter component.
pub fn central_fd(
    params: &mut Params,
    eps: f64,
    mut loss: impl FnMut(&Params) -> f64,
) -> Params {
    let names: Vec<String> = params.keys().cloned().collect();
    let mut grads = Params::new();
    for name in names {
        let n = params[&name].len();
        let mut g = vec![0.0f64; n];
        for i in 0..n {
            let orig = params.get_mut(&name).unwrap()[i];
            params.get_mut(&name).unwrap()[i] = orig + eps;
            let plus = loss(params);
            params.get_mut(&name).unwrap()[i] = orig - eps;
            let minus = loss(params);
            params.get_mut(&name).unwrap()[i] = orig;
            g[i] = (plus - minus) / (2.0 * eps);
        }
        grads.insert(name, g);
    }
    grads
}

/// Aggregate relative error between a production gradient map (f32 tensors)
/// and a reference map: ||ad - fd|| / ||fd|| over the concatenation of all
/// shared names.
pub fn aggregate_rel_err(
    ad: &BTreeMap<String, moemerge_core::tensor::Tensor>,
    fd: &Params,
) -> f64 {
    let mut diff2 = 0.0f64;
    let mut norm2 = 0.0f64;
    for (name, fg) in fd {
        match ad.get(name) {
            Some(ag) => {
                assert_eq!(ag.numel(), fg.len(), "size mismatch on {name}");
                for (a, f) in ag.data().iter().zip(fg) {
                    let d = f64::from(*a) - f;
                    diff2 += d * d;
                    norm2 += f * f;
                }
            }
            // never-evaluated parameters carry no production gradient;
            // the reference must agree they are zero
            None => {
                for f in fg {
                    diff2 += f * f;
                    norm2 += f * f;
                }
            }
        }
    }
    (diff2 / norm2).sqrt()
}
