//! Homogeneous mixture-of-experts.
//!
//! Same-architecture experts share merged non-FFN tensors (and attention,
//! unless separated) while keeping per-expert FFNs. A per-layer linear
//! router gates tokens across experts; alternatively, sequence-level
//! heuristic weights computed from the original dense experts (reciprocal
//! perplexity or gradient/task-vector cosine) replace the router.
//! Non-selected experts are never evaluated.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, FormatError, Result};
use crate::merge::{self, MergeRecipe, TaskVector};
use crate::model::{
    self, AttnVars, Checkpoint, FfnVars, ModelConfig,
};
use crate::moef::{self, Container};
use crate::tape::{ScatterPart, Tape, Var};
use crate::tensor::{self, Tensor};

pub const MOE_KIND: &str = "moe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Merged,
    Separate,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Merged => "merged",
            AttentionMode::Separate => "separate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "merged" => Ok(AttentionMode::Merged),
            "separate" => Ok(AttentionMode::Separate),
            other => Err(Error::Config(format!("unknown attention mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Trained per-layer token router.
    Learned,
    /// Same forward as Learned but the router is untrained; kept as a
    /// distinct label so reports can tell the baselines apart.
    Random,
    /// Sequence-level weights from reciprocal expert perplexities.
    Ppl,
    /// Sequence-level weights from gradient/task-vector cosines.
    Grad,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Learned => "learned",
            RoutingMode::Random => "random",
            RoutingMode::Ppl => "ppl",
            RoutingMode::Grad => "grad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(RoutingMode::Learned),
            "random" => Ok(RoutingMode::Random),
            "ppl" => Ok(RoutingMode::Ppl),
            "grad" => Ok(RoutingMode::Grad),
            other => Err(Error::Config(format!("unknown routing mode {other}"))),
        }
    }

    pub fn needs_heuristic_weights(self) -> bool {
        matches!(self, RoutingMode::Ppl | RoutingMode::Grad)
    }
}

/// True for tensor names owned by each expert rather than the shared trunk.
fn is_expert_scoped(name: &str, attention_mode: AttentionMode) -> bool {
    let ffn = name.starts_with("layer.") && name.contains(".ffn.");
    let attn = name.starts_with("layer.") && name.contains(".attn.");
    ffn || (attention_mode == AttentionMode::Separate && attn)
}

/// Merged trunk plus per-expert tensor sets and per-layer routers.
/// Expert maps are keyed by the dense tensor names they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub config: ModelConfig,
    pub shared: BTreeMap<String, Tensor>,
    pub experts: Vec<BTreeMap<String, Tensor>>,
    pub routers: Vec<Tensor>,
    pub top_k: usize,
    pub attention_mode: AttentionMode,
    pub routing_mode: RoutingMode,
}

impl MoeModel {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Structural checks. A single-expert mixture is allowed here so that
    /// collapse-to-dense equivalence can be exercised; user-facing assembly
    /// paths reject it separately.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let l = self.n_experts();
        if l == 0 {
            return Err(Error::Validation("mixture has no experts".into()));
        }
        if self.top_k == 0 || self.top_k > l {
            return Err(Error::Validation(format!(
                "top_k {} outside 1..={l}",
                self.top_k
            )));
        }
        if self.routers.len() != self.config.n_layers {
            return Err(Error::Validation(format!(
                "{} routers for {} layers",
                self.routers.len(),
                self.config.n_layers
            )));
        }
        for (j, r) in self.routers.iter().enumerate() {
            if r.shape() != [l, self.config.d_model] {
                return Err(Error::Validation(format!(
                    "router {j} shape {:?}, want [{l}, {}]",
                    r.shape(),
                    self.config.d_model
                )));
            }
        }
        for (name, shape) in self.config.tensor_schema() {
            if is_expert_scoped(&name, self.attention_mode) {
                for (i, e) in self.experts.iter().enumerate() {
                    match e.get(&name) {
                        Some(t) if t.shape() == shape => {}
                        _ => {
                            return Err(Error::Validation(format!(
                                "expert {i} missing or misshaped {name}"
                            )))
                        }
                    }
                }
                if self.shared.contains_key(&name) {
                    return Err(Error::Validation(format!("{name} must not be shared")));
                }
            } else {
                match self.shared.get(&name) {
                    Some(t) if t.shape() == shape => {}
                    _ => {
                        return Err(Error::Validation(format!(
                            "shared trunk missing or misshaped {name}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let shared: usize = self.shared.values().map(Tensor::numel).sum();
        let experts: usize = self
            .experts
            .iter()
            .flat_map(|e| e.values().map(Tensor::numel))
            .sum();
        let routers: usize = self.routers.iter().map(Tensor::numel).sum();
        shared + experts + routers
    }
}

/// Build an MoE from one base and l same-architecture experts: FFN tensors
/// (and attention in separate mode) are copied verbatim per expert, every
/// other tensor is merged by the recipe over the full set of experts, and
/// routers start from a seeded normal (std 0.02). The recipe's own tensor
/// filter is ignored; which tensors merge is structural here.
pub fn assemble_moe(
    base: &Checkpoint,
    experts: &[Checkpoint],
    recipe: &MergeRecipe,
    attention_mode: AttentionMode,
    top_k: usize,
    router_seed: u64,
) -> Result<MoeModel> {
    if experts.is_empty() {
        return Err(Error::Config("mixture needs at least one expert".into()));
    }
    if top_k == 0 || top_k > experts.len() {
        return Err(Error::Config(format!(
            "top_k {top_k} outside 1..={}",
            experts.len()
        )));
    }
    let merged = merge::merge_params(base, experts, &recipe.over_all_tensors())?;

    let mut shared = BTreeMap::new();
    for (name, t) in merged {
        if !is_expert_scoped(&name, attention_mode) {
            shared.insert(name, t);
        }
    }
    let expert_sets: Vec<BTreeMap<String, Tensor>> = experts
        .iter()
        .map(|e| {
            e.tensors
                .iter()
                .filter(|(name, _)| is_expert_scoped(name, attention_mode))
                .map(|(name, t)| (name.clone(), t.clone()))
                .collect()
        })
        .collect();
    let routers = (0..base.config.n_layers)
        .map(|j| {
            model::init_normal(
                &[experts.len(), base.config.d_model],
                router_seed,
                &format!("router.{j}.weight"),
            )
        })
        .collect();

    let moe = MoeModel {
        config: base.config.clone(),
        shared,
        experts: expert_sets,
        routers,
        top_k,
        attention_mode,
        routing_mode: RoutingMode::Learned,
    };
    moe.validate()?;
    Ok(moe)
}

/// One expert's FFN weights viewed together.
pub struct FfnTensors<'a> {
    pub w_gate: &'a Tensor,
    pub w_up: &'a Tensor,
    pub w_down: &'a Tensor,
}

fn ffn_eval(f: &FfnTensors, v: &[f32]) -> Result<Vec<f32>> {
    let x = Tensor::matrix(1, v.len(), v.to_vec())?;
    let mut gate = tensor::matmul_nt(&x, f.w_gate)?;
    for g in gate.data_mut() {
        *g /= 1.0 + (-*g).exp();
    }
    let up = tensor::matmul_nt(&x, f.w_up)?;
    let mut act = gate;
    for (a, u) in act.data_mut().iter_mut().zip(up.data()) {
        *a *= u;
    }
    Ok(tensor::matmul_nt(&act, f.w_down)?.into_data())
}

/// Single-token mixture FFN: softmax over the K largest router logits gates
/// the selected experts' FFN outputs; everything else contributes nothing
/// and is not evaluated.
pub fn moe_ffn_forward(
    router: &Tensor,
    ffns: &[FfnTensors],
    v: &[f32],
    k: usize,
) -> Result<Vec<f32>> {
    let l = ffns.len();
    if router.shape() != [l, v.len()] {
        return Err(Error::ShapeMismatch {
            op: "moe_ffn_forward",
            detail: format!("router {:?} for {l} experts of dim {}", router.shape(), v.len()),
        });
    }
    if k == 0 || k > l {
        return Err(Error::Config(format!("top_k {k} outside 1..={l}")));
    }
    let scores: Vec<f32> = (0..l).map(|i| tensor::dot(router.row(i), v)).collect();
    let gates = tensor::top_k_softmax(&scores, k);
    let mut out = vec![0.0f32; v.len()];
    for (i, &g) in gates.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let y = ffn_eval(&ffns[i], v)?;
        for (o, yv) in out.iter_mut().zip(&y) {
            *o += g * yv;
        }
    }
    Ok(out)
}

/// Sequence-level weights from expert confidence: α = softmax over the K
/// largest reciprocal perplexities of the original dense experts.
pub fn ppl_route(experts: &[Checkpoint], tokens: &[u32], k: usize) -> Result<Vec<f32>> {
    if experts.is_empty() || k == 0 || k > experts.len() {
        return Err(Error::Config(format!(
            "top_k {k} outside 1..={}",
            experts.len()
        )));
    }
    let mut reciprocals = Vec::with_capacity(experts.len());
    for e in experts {
        reciprocals.push(1.0 / model::perplexity(e, tokens)?);
    }
    Ok(tensor::top_k_softmax(&reciprocals, k))
}

/// Flatten a gradient or task-vector map into one vector, name-sorted.
fn flatten_sorted(map: &BTreeMap<String, Tensor>) -> Vec<f32> {
    map.values().flat_map(|t| t.data().iter().copied()).collect()
}

/// Sequence-level weights from update direction: one cross-entropy backward
/// pass on the base model gives g_inf; α = softmax over the K largest
/// cosines between g_inf and each expert's task vector.
pub fn grad_route(
    base: &Checkpoint,
    task_vectors: &[TaskVector],
    tokens: &[u32],
    k: usize,
) -> Result<Vec<f32>> {
    if task_vectors.is_empty() || k == 0 || k > task_vectors.len() {
        return Err(Error::Config(format!(
            "top_k {k} outside 1..={}",
            task_vectors.len()
        )));
    }
    model::validate_sequence(tokens, base.config.vocab_size, base.config.max_seq_len)?;
    let (input, targets) = model::teacher_forcing_split(tokens);
    let mut tape = Tape::new();
    let vars = model::bind_checkpoint(&mut tape, base, &|_| true);
    let logits = model::dense_logits(&mut tape, &vars, &base.config, &input)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let mut grads = tape.backward(loss)?;
    let mut grad_map = BTreeMap::new();
    for (name, var) in &vars {
        let shape = base.tensors[name].shape().to_vec();
        grad_map.insert(name.clone(), grads.take_or_zeros(*var, &shape));
    }
    let g = flatten_sorted(&grad_map);

    let mut cosines = Vec::with_capacity(task_vectors.len());
    for (i, tau) in task_vectors.iter().enumerate() {
        if tau.deltas.len() != grad_map.len()
            || tau.deltas.keys().zip(grad_map.keys()).any(|(a, b)| a != b)
        {
            return Err(Error::Validation(format!(
                "task vector {i} does not match the base schema"
            )));
        }
        let flat = flatten_sorted(&tau.deltas);
        match tensor::cosine_similarity(&g, &flat) {
            Some(c) => cosines.push(c),
            None => {
                return Err(Error::DegenerateInput(format!(
                    "zero norm in gradient routing (gradient or task vector {i})"
                )))
            }
        }
    }
    Ok(tensor::top_k_softmax(&cosines, k))
}

/// One routing decision: the dense weight row over all experts, tagged with
/// layer/token for learned routing or untagged for per-sequence heuristics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingDecision {
    pub layer: Option<usize>,
    pub token: Option<usize>,
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoutingTrace {
    pub decisions: Vec<RoutingDecision>,
}

/// Mean routing weight per expert over every recorded decision.
pub fn routing_probability(trace: &RoutingTrace) -> Result<Vec<f32>> {
    let first = trace
        .decisions
        .first()
        .ok_or_else(|| Error::Validation("empty routing trace".into()))?;
    let l = first.weights.len();
    let mut mean = vec![0.0f32; l];
    for d in &trace.decisions {
        if d.weights.len() != l {
            return Err(Error::Validation("trace weight widths differ".into()));
        }
        for (m, w) in mean.iter_mut().zip(&d.weights) {
            *m += w;
        }
    }
    let n = trace.decisions.len() as f32;
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

/// Tape bindings for every mixture tensor, trainability decided per
/// flattened container name (`router.{j}.weight`, `expert.{i}.<name>`,
/// shared names verbatim).
pub struct MoeBound {
    pub shared: BTreeMap<String, Var>,
    pub experts: Vec<BTreeMap<String, Var>>,
    pub routers: Vec<Var>,
}

pub fn bind_moe(tape: &mut Tape, moe: &MoeModel, trainable: &dyn Fn(&str) -> bool) -> MoeBound {
    let mut bind = |name: String, tensor: &Tensor| -> Var {
        if trainable(&name) {
            tape.param(tensor.clone())
        } else {
            tape.constant(tensor.clone())
        }
    };
    let shared = moe
        .shared
        .iter()
        .map(|(name, t)| (name.clone(), bind(name.clone(), t)))
        .collect();
    let experts = moe
        .experts
        .iter()
        .enumerate()
        .map(|(i, set)| {
            set.iter()
                .map(|(name, t)| (name.clone(), bind(format!("expert.{i}.{name}"), t)))
                .collect()
        })
        .collect();
    let routers = moe
        .routers
        .iter()
        .enumerate()
        .map(|(j, t)| bind(format!("router.{j}.weight"), t))
        .collect();
    MoeBound {
        shared,
        experts,
        routers,
    }
}

fn lookup(map: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    map.get(name)
        .copied()
        .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))
}

struct Heuristic {
    selected: Vec<usize>,
    weights: Var,
}

/// Mixture trunk on an existing tape. Learned and random modes route each
/// token through a per-layer linear router over the residual stream entering
/// the FFN block; heuristic modes apply the supplied sequence-level α at
/// every layer, to attention too when attention is separate.
pub fn moe_logits_on_tape(
    tape: &mut Tape,
    moe: &MoeModel,
    bound: &MoeBound,
    input: &[u32],
    alpha: Option<&[f32]>,
) -> Result<(Var, RoutingTrace)> {
    model::validate_sequence(input, moe.config.vocab_size, moe.config.max_seq_len)?;
    let l = moe.n_experts();
    let t = input.len();

    let heuristic = match (moe.routing_mode.needs_heuristic_weights(), alpha) {
        (false, None) => None,
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "{} routing does not take heuristic weights",
                moe.routing_mode.as_str()
            )))
        }
        (true, None) => {
            return Err(Error::Config(format!(
                "{} routing requires heuristic weights",
                moe.routing_mode.as_str()
            )))
        }
        (true, Some(a)) => {
            if a.len() != l {
                return Err(Error::Config(format!(
                    "{} heuristic weights for {l} experts",
                    a.len()
                )));
            }
            if a.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Config("heuristic weights must be finite and nonnegative".into()));
            }
            let selected: Vec<usize> = (0..l).filter(|&i| a[i] > 0.0).collect();
            if selected.is_empty() {
                return Err(Error::Config("heuristic weights are all zero".into()));
            }
            let row: Vec<f32> = selected.iter().map(|&i| a[i]).collect();
            let weights = tape.constant(Tensor::matrix(1, selected.len(), row)?);
            Some(Heuristic { selected, weights })
        }
    };
    if moe.attention_mode == AttentionMode::Separate && heuristic.is_none() {
        return Err(Error::Config(
            "separate attention requires heuristic routing weights".into(),
        ));
    }

    let mut trace = RoutingTrace::default();
    if let Some(a) = alpha {
        trace.decisions.push(RoutingDecision {
            layer: None,
            token: None,
            weights: a.to_vec(),
        });
    }

    let mut h = tape.embed(lookup(&bound.shared, "embed.weight")?, input)?;
    for j in 0..moe.config.n_layers {
        let attn_norm = lookup(&bound.shared, &format!("layer.{j}.attn_norm.gain"))?;
        match moe.attention_mode {
            AttentionMode::Merged => {
                let attn = AttnVars {
                    wq: lookup(&bound.shared, &format!("layer.{j}.attn.wq"))?,
                    wk: lookup(&bound.shared, &format!("layer.{j}.attn.wk"))?,
                    wv: lookup(&bound.shared, &format!("layer.{j}.attn.wv"))?,
                    wo: lookup(&bound.shared, &format!("layer.{j}.attn.wo"))?,
                    norm_gain: attn_norm,
                    n_heads: moe.config.n_heads,
                };
                h = model::attention_block(tape, h, &attn)?;
            }
            AttentionMode::Separate => {
                let heur = heuristic.as_ref().expect("checked above");
                let normed = tape.rms_norm(h, attn_norm)?;
                let mut outs = Vec::with_capacity(heur.selected.len());
                for &s in &heur.selected {
                    let attn = AttnVars {
                        wq: lookup(&bound.experts[s], &format!("layer.{j}.attn.wq"))?,
                        wk: lookup(&bound.experts[s], &format!("layer.{j}.attn.wk"))?,
                        wv: lookup(&bound.experts[s], &format!("layer.{j}.attn.wv"))?,
                        wo: lookup(&bound.experts[s], &format!("layer.{j}.attn.wo"))?,
                        norm_gain: attn_norm,
                        n_heads: moe.config.n_heads,
                    };
                    outs.push(model::attn_core(tape, normed, &attn)?);
                }
                let combined = tape.weighted_combine(heur.weights, &outs)?;
                h = tape.add(h, combined)?;
            }
        }

        let ffn_norm = lookup(&bound.shared, &format!("layer.{j}.ffn_norm.gain"))?;
        let expert_ffn = |bound: &MoeBound, i: usize| -> Result<FfnVars> {
            Ok(FfnVars {
                w_gate: lookup(&bound.experts[i], &format!("layer.{j}.ffn.w_gate"))?,
                w_up: lookup(&bound.experts[i], &format!("layer.{j}.ffn.w_up"))?,
                w_down: lookup(&bound.experts[i], &format!("layer.{j}.ffn.w_down"))?,
            })
        };
        match &heuristic {
            None => {
                let scores = tape.matmul_nt(h, bound.routers[j])?;
                let gates = tape.top_k_softmax_rows(scores, moe.top_k)?;
                let gate_rows = tape.value(gates).clone();
                for tok in 0..t {
                    trace.decisions.push(RoutingDecision {
                        layer: Some(j),
                        token: Some(tok),
                        weights: gate_rows.row(tok).to_vec(),
                    });
                }
                let normed = tape.rms_norm(h, ffn_norm)?;
                let mut parts = Vec::new();
                for i in 0..l {
                    let rows: Vec<usize> = (0..t)
                        .filter(|&r| gate_rows.data()[r * l + i] > 0.0)
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let sub = tape.gather_rows(normed, &rows)?;
                    let y = model::ffn_apply(tape, sub, &expert_ffn(bound, i)?)?;
                    parts.push(ScatterPart {
                        y,
                        expert: i,
                        rows,
                    });
                }
                let out = tape.scatter_combine(gates, parts, t)?;
                h = tape.add(h, out)?;
            }
            Some(heur) => {
                let normed = tape.rms_norm(h, ffn_norm)?;
                let mut outs = Vec::with_capacity(heur.selected.len());
                for &s in &heur.selected {
                    outs.push(model::ffn_apply(tape, normed, &expert_ffn(bound, s)?)?);
                }
                let combined = tape.weighted_combine(heur.weights, &outs)?;
                h = tape.add(h, combined)?;
            }
        }
    }
    let h = tape.rms_norm(h, lookup(&bound.shared, "final_norm.gain")?)?;
    let logits = tape.matmul_nt(h, lookup(&bound.shared, "head.weight")?)?;
    Ok((logits, trace))
}

/// Logits for every position of `input`, shape [t, vocab], plus the trace
/// of all routing decisions made along the way.
pub fn moe_forward(
    moe: &MoeModel,
    input: &[u32],
    alpha: Option<&[f32]>,
) -> Result<(Tensor, RoutingTrace)> {
    let mut tape = Tape::new();
    let bound = bind_moe(&mut tape, moe, &|_| false);
    let (logits, trace) = moe_logits_on_tape(&mut tape, moe, &bound, input, alpha)?;
    Ok((tape.value(logits).clone(), trace))
}

/// Next-token loss node for training/eval on an existing tape: BOS-shifted
/// input scored against every real token.
pub fn moe_lm_loss_on_tape(
    tape: &mut Tape,
    moe: &MoeModel,
    bound: &MoeBound,
    tokens: &[u32],
    alpha: Option<&[f32]>,
) -> Result<(Var, RoutingTrace)> {
    model::validate_sequence(tokens, moe.config.vocab_size, moe.config.max_seq_len)?;
    let (input, targets) = model::teacher_forcing_split(tokens);
    let (logits, trace) = moe_logits_on_tape(tape, moe, bound, &input, alpha)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok((loss, trace))
}

pub fn moe_lm_loss(moe: &MoeModel, tokens: &[u32], alpha: Option<&[f32]>) -> Result<f32> {
    let mut tape = Tape::new();
    let bound = bind_moe(&mut tape, moe, &|_| false);
    let (loss, _) = moe_lm_loss_on_tape(&mut tape, moe, &bound, tokens, alpha)?;
    Ok(tape.value(loss).item())
}

pub fn moe_perplexity(moe: &MoeModel, tokens: &[u32], alpha: Option<&[f32]>) -> Result<f32> {
    Ok(moe_lm_loss(moe, tokens, alpha)?.exp())
}

/// Flatten to a container: shared names verbatim, `expert.{i}.<name>` for
/// per-expert tensors, `router.{j}.weight`, structure in metadata, trunk
/// config in the header.
pub fn moe_to_container(moe: &MoeModel) -> Result<Container> {
    moe.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, t) in &moe.shared {
        tensors.insert(name.clone(), t.clone());
    }
    for (i, set) in moe.experts.iter().enumerate() {
        for (name, t) in set {
            tensors.insert(format!("expert.{i}.{name}"), t.clone());
        }
    }
    for (j, r) in moe.routers.iter().enumerate() {
        tensors.insert(format!("router.{j}.weight"), r.clone());
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("kind".to_string(), MOE_KIND.to_string());
    metadata.insert("experts".to_string(), moe.n_experts().to_string());
    metadata.insert("top_k".to_string(), moe.top_k.to_string());
    metadata.insert(
        "attention_mode".to_string(),
        moe.attention_mode.as_str().to_string(),
    );
    metadata.insert(
        "routing_mode".to_string(),
        moe.routing_mode.as_str().to_string(),
    );
    Ok(Container {
        config: Some(moe.config.clone()),
        metadata,
        tensors,
    })
}

fn meta_usize(c: &Container, key: &str) -> Result<usize> {
    c.metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| {
            Error::Format(FormatError::SchemaMismatch(format!(
                "missing or non-numeric metadata {key}"
            )))
        })
}

pub fn moe_from_container(container: &Container) -> Result<MoeModel> {
    let schema_err =
        |msg: String| -> Error { Error::Format(FormatError::SchemaMismatch(msg)) };
    match container.metadata.get("kind") {
        Some(k) if k == MOE_KIND => {}
        other => {
            return Err(schema_err(format!(
                "container kind {:?} is not {MOE_KIND}",
                other
            )))
        }
    }
    let config = container
        .config
        .clone()
        .ok_or_else(|| schema_err("mixture container without trunk config".into()))?;
    let n_experts = meta_usize(container, "experts")?;
    let top_k = meta_usize(container, "top_k")?;
    let attention_mode = AttentionMode::parse(
        container
            .metadata
            .get("attention_mode")
            .ok_or_else(|| schema_err("missing metadata attention_mode".into()))?,
    )?;
    let routing_mode = RoutingMode::parse(
        container
            .metadata
            .get("routing_mode")
            .ok_or_else(|| schema_err("missing metadata routing_mode".into()))?,
    )?;

    let mut shared = BTreeMap::new();
    let mut experts: Vec<BTreeMap<String, Tensor>> = vec![BTreeMap::new(); n_experts];
    let mut routers: Vec<Option<Tensor>> = vec![None; config.n_layers];
    for (name, t) in &container.tensors {
        if let Some(rest) = name.strip_prefix("expert.") {
            let (idx, tensor_name) = rest
                .split_once('.')
                .ok_or_else(|| schema_err(format!("malformed expert tensor name {name}")))?;
            let i: usize = idx
                .parse()
                .map_err(|_| schema_err(format!("malformed expert index in {name}")))?;
            if i >= n_experts {
                return Err(schema_err(format!("expert index {i} out of range in {name}")));
            }
            experts[i].insert(tensor_name.to_string(), t.clone());
        } else if let Some(rest) = name.strip_prefix("router.") {
            let idx = rest
                .strip_suffix(".weight")
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| schema_err(format!("malformed router tensor name {name}")))?;
            if idx >= config.n_layers {
                return Err(schema_err(format!("router index {idx} out of range")));
            }
            routers[idx] = Some(t.clone());
        } else {
            shared.insert(name.clone(), t.clone());
        }
    }
    let routers: Vec<Tensor> = routers
        .into_iter()
        .enumerate()
        .map(|(j, r)| r.ok_or_else(|| schema_err(format!("missing router.{j}.weight"))))
        .collect::<Result<_>>()?;

    let moe = MoeModel {
        config,
        shared,
        experts,
        routers,
        top_k,
        attention_mode,
        routing_mode,
    };
    moe.validate()
        .map_err(|e| schema_err(format!("container does not describe a valid mixture: {e}")))?;
    Ok(moe)
}

pub fn save_moe(path: &Path, moe: &MoeModel) -> Result<()> {
    moef::save_container(path, &moe_to_container(moe)?)
}

pub fn load_moe(path: &Path) -> Result<MoeModel> {
    moe_from_container(&moef::load_container(path)?)
}
