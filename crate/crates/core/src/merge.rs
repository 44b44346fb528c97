//! Task-vector arithmetic and dense merging.
//!
//! A task vector is the per-tensor delta expert − base. Merging trims the
//! deltas (randomly for Dare, by magnitude with sign election for Ties),
//! sums them, and adds the result back to the base scaled by lambda;
//! plain averaging replaces the filtered tensors with the expert mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::rng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Average,
    Dare,
    Ties,
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MergeMethod::Average => "average",
            MergeMethod::Dare => "dare",
            MergeMethod::Ties => "ties",
        };
        f.write_str(s)
    }
}

/// How to merge: method, retain percentage p, scale lambda, Dare seed, and
/// glob patterns over canonical tensor names selecting what gets merged.
/// An empty filter list selects every tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    #[serde(default = "default_retain")]
    pub retain_percent: f32,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tensor_filter: Vec<String>,
}

fn default_retain() -> f32 {
    80.0
}

fn default_lambda() -> f32 {
    1.0 / 3.0
}

impl MergeRecipe {
    pub fn new(method: MergeMethod) -> Self {
        MergeRecipe {
            method,
            retain_percent: default_retain(),
            lambda: default_lambda(),
            seed: 0,
            tensor_filter: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.retain_percent > 0.0 && self.retain_percent <= 100.0) {
            return Err(Error::Config(format!(
                "retain_percent {} outside (0, 100]",
                self.retain_percent
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} invalid", self.lambda)));
        }
        Ok(())
    }

    pub fn matches(&self, name: &str) -> bool {
        self.tensor_filter.is_empty() || self.tensor_filter.iter().any(|p| glob_match(p, name))
    }

    /// Same recipe with the filter widened to every tensor.
    pub fn over_all_tensors(&self) -> Self {
        MergeRecipe {
            tensor_filter: Vec::new(),
            ..self.clone()
        }
    }
}

/// `*` matches any (possibly empty) substring; everything else is literal.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.ends_with(part);
        } else if part.is_empty() {
            continue;
        } else {
            match rest.find(part) {
                Some(at) => rest = &rest[at + part.len()..],
                None => return false,
            }
        }
    }
    true
}

/// Per-tensor deltas of one expert against its base, keyed like the
/// checkpoints they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, Tensor>,
    pub expert_id: String,
    pub base_id: String,
}

fn provenance_id(ckpt: &Checkpoint) -> String {
    ckpt.metadata
        .get("domain")
        .or_else(|| ckpt.metadata.get("kind"))
        .cloned()
        .unwrap_or_default()
}

pub(crate) fn ensure_same_schema(base: &Checkpoint, other: &Checkpoint) -> Result<()> {
    if base.config != other.config {
        return Err(Error::Validation(format!(
            "config mismatch: {:?} vs {:?}",
            base.config, other.config
        )));
    }
    for (name, t) in &base.tensors {
        match other.tensors.get(name) {
            Some(o) if o.shape() == t.shape() => {}
            Some(o) => {
                return Err(Error::Validation(format!(
                    "tensor {name} shape {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                )))
            }
            None => return Err(Error::Validation(format!("missing tensor {name}"))),
        }
    }
    if base.tensors.len() != other.tensors.len() {
        return Err(Error::Validation("tensor sets differ".into()));
    }
    Ok(())
}

/// τ = expert − base, tensor by tensor.
pub fn task_vector(base: &Checkpoint, expert: &Checkpoint) -> Result<TaskVector> {
    ensure_same_schema(base, expert)?;
    let mut deltas = BTreeMap::new();
    for (name, b) in &base.tensors {
        deltas.insert(name.clone(), tensor::sub(&expert.tensors[name], b)?);
    }
    Ok(TaskVector {
        deltas,
        expert_id: provenance_id(expert),
        base_id: provenance_id(base),
    })
}

/// Apply an explicit keep mask: kept entries scale by 100/p, dropped entries
/// become exact zeros.
pub(crate) fn dare_apply(values: &[f32], keep: impl Fn(usize) -> bool, retain_percent: f32) -> Vec<f32> {
    let rescale = 100.0 / retain_percent;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep(i) { v * rescale } else { 0.0 })
        .collect()
}

/// Randomly zero each entry with probability (100−p)%, rescaling survivors
/// by 100/p. The Bernoulli draw is keyed by (seed, tensor name, flat index),
/// so the result is independent of iteration order and parallelism.
pub fn dare_trim(tau: &TaskVector, retain_percent: f32, seed: u64) -> Result<TaskVector> {
    if !(retain_percent > 0.0 && retain_percent <= 100.0) {
        return Err(Error::Config(format!(
            "retain_percent {retain_percent} outside (0, 100]"
        )));
    }
    let threshold = retain_percent / 100.0;
    let mut deltas = BTreeMap::new();
    for (name, t) in &tau.deltas {
        let kept = dare_apply(
            t.data(),
            |i| rng::keyed_uniform(seed, name, i as u64) < threshold,
            retain_percent,
        );
        deltas.insert(name.clone(), Tensor::new(t.shape().to_vec(), kept)?);
    }
    Ok(TaskVector {
        deltas,
        expert_id: tau.expert_id.clone(),
        base_id: tau.base_id.clone(),
    })
}

/// Zero the ⌊(100−p)% · n⌋ smallest-magnitude entries of one tensor.
/// Magnitude ties drop the lower flat index first.
pub(crate) fn ties_trim_values(values: &[f32], retain_percent: f32) -> Vec<f32> {
    let n = values.len();
    let drop_count = ((100.0 - retain_percent) as f64 / 100.0 * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .abs()
            .partial_cmp(&values[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = values.to_vec();
    for &i in order.iter().take(drop_count) {
        out[i] = 0.0;
    }
    out
}

/// Trim every task vector, elect a sign per scalar position by total kept
/// magnitude (ties elect positive), then sum only the kept values that agree
/// with the elected sign.
pub fn ties_trim_elect_merge(taus: &[TaskVector], retain_percent: f32) -> Result<TaskVector> {
    if taus.is_empty() {
        return Err(Error::Config("ties merge needs at least one task vector".into()));
    }
    if !(retain_percent > 0.0 && retain_percent <= 100.0) {
        return Err(Error::Config(format!(
            "retain_percent {retain_percent} outside (0, 100]"
        )));
    }
    let first = &taus[0];
    for tau in &taus[1..] {
        for (name, t) in &first.deltas {
            match tau.deltas.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                _ => return Err(Error::Validation(format!("task vector schema differs at {name}"))),
            }
        }
        if tau.deltas.len() != first.deltas.len() {
            return Err(Error::Validation("task vector schemas differ".into()));
        }
    }

    let mut deltas = BTreeMap::new();
    for (name, t) in &first.deltas {
        let trimmed: Vec<Vec<f32>> = taus
            .iter()
            .map(|tau| ties_trim_values(tau.deltas[name].data(), retain_percent))
            .collect();
        let mut merged = vec![0.0f32; t.numel()];
        for (pos, slot) in merged.iter_mut().enumerate() {
            let mut pos_mass = 0.0f32;
            let mut neg_mass = 0.0f32;
            for tv in &trimmed {
                let v = tv[pos];
                if v > 0.0 {
                    pos_mass += v;
                } else {
                    neg_mass -= v;
                }
            }
            // tie (including all-zero) elects positive
            let elect_positive = pos_mass >= neg_mass;
            let mut sum = 0.0f32;
            for tv in &trimmed {
                let v = tv[pos];
                if (elect_positive && v > 0.0) || (!elect_positive && v < 0.0) {
                    sum += v;
                }
            }
            *slot = sum;
        }
        deltas.insert(name.clone(), Tensor::new(t.shape().to_vec(), merged)?);
    }
    Ok(TaskVector {
        deltas,
        expert_id: "ties-merged".to_string(),
        base_id: first.base_id.clone(),
    })
}

/// Merged tensor map: names matching the recipe filter are merged, the rest
/// are the base values untouched. Average takes the unweighted expert mean;
/// Dare and Ties build τ_m from trimmed task vectors and apply
/// θ_m = θ_b + λ·τ_m. Each expert's Dare mask draws from a seed derived
/// from (recipe.seed, expert index) so drops are independent across experts.
pub fn merge_params(
    base: &Checkpoint,
    experts: &[Checkpoint],
    recipe: &MergeRecipe,
) -> Result<BTreeMap<String, Tensor>> {
    recipe.validate()?;
    if experts.is_empty() {
        return Err(Error::Config("merge needs at least one expert".into()));
    }
    for expert in experts {
        ensure_same_schema(base, expert)?;
    }

    let merged_delta: Option<TaskVector> = match recipe.method {
        MergeMethod::Average => None,
        MergeMethod::Dare => {
            let mut sum: Option<TaskVector> = None;
            for (i, expert) in experts.iter().enumerate() {
                let tau = task_vector(base, expert)?;
                let trimmed = dare_trim(&tau, recipe.retain_percent, rng::derive_seed(recipe.seed, i as u64))?;
                sum = Some(match sum {
                    None => trimmed,
                    Some(mut acc) => {
                        for (name, t) in trimmed.deltas {
                            tensor::axpy(acc.deltas.get_mut(&name).expect("same schema"), 1.0, &t);
                        }
                        acc
                    }
                });
            }
            sum
        }
        MergeMethod::Ties => {
            let taus: Vec<TaskVector> = experts
                .iter()
                .map(|e| task_vector(base, e))
                .collect::<Result<_>>()?;
            Some(ties_trim_elect_merge(&taus, recipe.retain_percent)?)
        }
    };

    let mut out = BTreeMap::new();
    for (name, b) in &base.tensors {
        if !recipe.matches(name) {
            out.insert(name.clone(), b.clone());
            continue;
        }
        let merged = match &merged_delta {
            None => {
                // unweighted expert mean
                let mut acc = Tensor::zeros(b.shape().to_vec());
                for expert in experts {
                    tensor::axpy(&mut acc, 1.0, &expert.tensors[name]);
                }
                tensor::scale(&acc, 1.0 / experts.len() as f32)
            }
            Some(tau_m) => {
                let mut acc = b.clone();
                tensor::axpy(&mut acc, recipe.lambda, &tau_m.deltas[name]);
                acc
            }
        };
        out.insert(name.clone(), merged);
    }
    Ok(out)
}

/// Merge every tensor into a single dense checkpoint with the base's schema.
pub fn dense_merge(
    base: &Checkpoint,
    experts: &[Checkpoint],
    recipe: &MergeRecipe,
) -> Result<Checkpoint> {
    let tensors = merge_params(base, experts, &recipe.over_all_tensors())?;
    let mut metadata = BTreeMap::new();
    metadata.insert("kind".to_string(), "dense".to_string());
    metadata.insert("merge_method".to_string(), recipe.method.to_string());
    metadata.insert("merge_experts".to_string(), experts.len().to_string());
    Checkpoint::new(base.config.clone(), tensors, metadata)
}

/// Per-layer cosine similarity between two task vectors, over concatenated
/// attention projections (`layer.{i}.attn.*`) and concatenated FFN matrices
/// (`layer.{i}.ffn.*`). Zero-norm sides report 0 with the degenerate flag.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub attn: f32,
    pub ffn: f32,
    pub attn_degenerate: bool,
    pub ffn_degenerate: bool,
}

pub fn task_vector_similarity(a: &TaskVector, b: &TaskVector) -> Result<Vec<LayerSimilarity>> {
    for (name, t) in &a.deltas {
        match b.deltas.get(name) {
            Some(o) if o.shape() == t.shape() => {}
            _ => return Err(Error::Validation(format!("task vector schema differs at {name}"))),
        }
    }
    if a.deltas.len() != b.deltas.len() {
        return Err(Error::Validation("task vector schemas differ".into()));
    }
    let mut layers: Vec<usize> = a
        .deltas
        .keys()
        .filter_map(|name| {
            name.strip_prefix("layer.")
                .and_then(|rest| rest.split('.').next())
                .and_then(|idx| idx.parse::<usize>().ok())
        })
        .collect();
    layers.sort_unstable();
    layers.dedup();

    let concat = |tau: &TaskVector, prefix: &str| -> Vec<f32> {
        // BTreeMap iteration gives a stable name order for concatenation
        tau.deltas
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    };

    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let attn_prefix = format!("layer.{layer}.attn.");
        let ffn_prefix = format!("layer.{layer}.ffn.");
        let (attn, attn_degenerate) =
            match tensor::cosine_similarity(&concat(a, &attn_prefix), &concat(b, &attn_prefix)) {
                Some(c) => (c, false),
                None => (0.0, true),
            };
        let (ffn, ffn_degenerate) =
            match tensor::cosine_similarity(&concat(a, &ffn_prefix), &concat(b, &ffn_prefix)) {
                Some(c) => (c, false),
                None => (0.0, true),
            };
        out.push(LayerSimilarity {
            layer,
            attn,
            ffn,
            attn_degenerate,
            ffn_degenerate,
        });
    }
    Ok(out)
}
