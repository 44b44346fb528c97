//! Mixed-architecture mixture-of-experts.
//!
//! Experts may differ in hidden dimension and layer count. They share one
//! embedding and head at the maximum dimension d_m (zero-padded average of
//! the experts' own), and each expert wraps its verbatim trunk in an affine
//! Proj-in (d_m → d_i) and Proj-out (d_i → d_m). A single router picks K
//! experts per sequence from the mean input embedding; the selected
//! representations are combined as Σ α_i r_i and fed to the shared head.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::{self, Checkpoint, ModelConfig};
use crate::moe::{RoutingDecision, RoutingTrace};
use crate::moef::{self, Container};
use crate::tape::{ScatterPart, Tape, Var};
use crate::tensor::{self, Tensor};

pub const HETERO_KIND: &str = "hetero_moe";

/// One expert: its original trunk (layers + final norm, no embed/head) and
/// the affine projectors bridging the shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroExpert {
    pub config: ModelConfig,
    pub trunk: BTreeMap<String, Tensor>,
    pub proj_in_w: Tensor,
    pub proj_in_b: Tensor,
    pub proj_out_w: Tensor,
    pub proj_out_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroMoeModel {
    pub embed: Tensor,
    pub head: Tensor,
    pub router: Tensor,
    pub experts: Vec<HeteroExpert>,
    pub top_k: usize,
}

/// Trunk tensor names for one architecture: the full dense schema minus the
/// embedding and head, which the mixture replaces with shared ones.
fn trunk_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    config
        .tensor_schema()
        .into_iter()
        .filter(|(name, _)| name != "embed.weight" && name != "head.weight")
        .collect()
}

impl HeteroMoeModel {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_shared(&self) -> usize {
        self.embed.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    /// The longest sequence every expert can process.
    pub fn max_seq_len(&self) -> usize {
        self.experts
            .iter()
            .map(|e| e.config.max_seq_len)
            .min()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
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
        let d_m = self.d_shared();
        let vocab = self.vocab_size();
        let max_dim = self
            .experts
            .iter()
            .map(|e| e.config.d_model)
            .max()
            .unwrap_or(0);
        if d_m != max_dim {
            return Err(Error::Validation(format!(
                "shared dim {d_m} is not the max expert dim {max_dim}"
            )));
        }
        if self.head.shape() != [vocab, d_m] {
            return Err(Error::Validation(format!(
                "head shape {:?}, want [{vocab}, {d_m}]",
                self.head.shape()
            )));
        }
        if self.router.shape() != [l, d_m] {
            return Err(Error::Validation(format!(
                "router shape {:?}, want [{l}, {d_m}]",
                self.router.shape()
            )));
        }
        for (i, e) in self.experts.iter().enumerate() {
            e.config.validate()?;
            if e.config.vocab_size != vocab {
                return Err(Error::Validation(format!(
                    "expert {i} vocabulary {} differs from shared {vocab}",
                    e.config.vocab_size
                )));
            }
            let d_i = e.config.d_model;
            if e.proj_in_w.shape() != [d_i, d_m] || e.proj_in_b.shape() != [d_i] {
                return Err(Error::Validation(format!("expert {i} proj_in shape")));
            }
            if e.proj_out_w.shape() != [d_m, d_i] || e.proj_out_b.shape() != [d_m] {
                return Err(Error::Validation(format!("expert {i} proj_out shape")));
            }
            let schema = trunk_schema(&e.config);
            if e.trunk.len() != schema.len() {
                return Err(Error::Validation(format!(
                    "expert {i} trunk has {} tensors, want {}",
                    e.trunk.len(),
                    schema.len()
                )));
            }
            for (name, shape) in schema {
                match e.trunk.get(&name) {
                    Some(t) if t.shape() == shape => {}
                    _ => {
                        return Err(Error::Validation(format!(
                            "expert {i} trunk missing or misshaped {name}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let shared = self.embed.numel() + self.head.numel() + self.router.numel();
        let experts: usize = self
            .experts
            .iter()
            .map(|e| {
                e.trunk.values().map(Tensor::numel).sum::<usize>()
                    + e.proj_in_w.numel()
                    + e.proj_in_b.numel()
                    + e.proj_out_w.numel()
                    + e.proj_out_b.numel()
            })
            .sum();
        shared + experts
    }
}

/// Zero-pad each matrix on the hidden axis to `d_m` columns, then average
/// elementwise. Padding never alters existing coordinates.
fn pad_average(mats: &[&Tensor], d_m: usize) -> Result<Tensor> {
    let rows = mats[0].shape()[0];
    let mut out = Tensor::zeros(vec![rows, d_m]);
    let scale = 1.0 / mats.len() as f32;
    for m in mats {
        let d_i = m.shape()[1];
        if m.shape()[0] != rows || d_i > d_m {
            return Err(Error::ShapeMismatch {
                op: "pad_average",
                detail: format!("{:?} into [{rows}, {d_m}]", m.shape()),
            });
        }
        for r in 0..rows {
            let src = m.row(r);
            let dst = &mut out.data_mut()[r * d_m..r * d_m + d_i];
            for (o, v) in dst.iter_mut().zip(src) {
                *o += v * scale;
            }
        }
    }
    Ok(out)
}

/// Shared embedding and head: each expert's is zero-padded on the hidden
/// axis to the maximum dimension, then averaged elementwise.
pub fn build_shared_embed_head(experts: &[Checkpoint]) -> Result<(Tensor, Tensor)> {
    if experts.is_empty() {
        return Err(Error::Config("mixture needs at least one expert".into()));
    }
    let vocab = experts[0].config.vocab_size;
    for (i, e) in experts.iter().enumerate() {
        if e.config.vocab_size != vocab {
            return Err(Error::Validation(format!(
                "expert {i} vocabulary {} differs from expert 0's {vocab}",
                e.config.vocab_size
            )));
        }
    }
    let d_m = experts.iter().map(|e| e.config.d_model).max().unwrap();
    let embeds: Vec<&Tensor> = experts.iter().map(|e| &e.tensors["embed.weight"]).collect();
    let heads: Vec<&Tensor> = experts.iter().map(|e| &e.tensors["head.weight"]).collect();
    Ok((pad_average(&embeds, d_m)?, pad_average(&heads, d_m)?))
}

/// Copy trunks verbatim, build the padded-average embedding/head, and seed
/// the projectors (normal std 0.02 weights, zero bias) and router. The same
/// seed always produces a bit-identical assembly.
pub fn assemble_hetero_moe(
    experts: &[Checkpoint],
    top_k: usize,
    seed: u64,
) -> Result<HeteroMoeModel> {
    if experts.is_empty() {
        return Err(Error::Config("mixture needs at least one expert".into()));
    }
    if top_k == 0 || top_k > experts.len() {
        return Err(Error::Config(format!(
            "top_k {top_k} outside 1..={}",
            experts.len()
        )));
    }
    for e in experts {
        e.validate_schema()?;
    }
    let (embed, head) = build_shared_embed_head(experts)?;
    let d_m = embed.shape()[1];
    let router = model::init_normal(&[experts.len(), d_m], seed, "router.weight");
    let experts = experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let d_i = e.config.d_model;
            HeteroExpert {
                config: e.config.clone(),
                trunk: e
                    .tensors
                    .iter()
                    .filter(|(name, _)| *name != "embed.weight" && *name != "head.weight")
                    .map(|(name, t)| (name.clone(), t.clone()))
                    .collect(),
                proj_in_w: model::init_normal(
                    &[d_i, d_m],
                    seed,
                    &format!("expert.{i}.proj_in.weight"),
                ),
                proj_in_b: Tensor::zeros(vec![d_i]),
                proj_out_w: model::init_normal(
                    &[d_m, d_i],
                    seed,
                    &format!("expert.{i}.proj_out.weight"),
                ),
                proj_out_b: Tensor::zeros(vec![d_m]),
            }
        })
        .collect();
    let model = HeteroMoeModel {
        embed,
        head,
        router,
        experts,
        top_k,
    };
    model.validate()?;
    Ok(model)
}

/// Sequence-level routing: α = softmax over the K largest of
/// θ_r · mean(e_1…e_t). One decision per sequence.
pub fn sequence_route(router: &Tensor, embeddings: &Tensor, k: usize) -> Result<Vec<f32>> {
    let (t, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    let l = router.shape()[0];
    if router.shape() != [l, d] || t == 0 {
        return Err(Error::ShapeMismatch {
            op: "sequence_route",
            detail: format!("router {:?}, embeddings {:?}", router.shape(), embeddings.shape()),
        });
    }
    if k == 0 || k > l {
        return Err(Error::Config(format!("top_k {k} outside 1..={l}")));
    }
    let mut mean = vec![0.0f32; d];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(embeddings.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= t as f32;
    }
    let scores: Vec<f32> = (0..l).map(|i| tensor::dot(router.row(i), &mean)).collect();
    Ok(tensor::top_k_softmax(&scores, k))
}

/// Tape bindings, trainability decided per flattened container name
/// (`shared.embed.weight`, `router.weight`, `expert.{i}.proj_in.weight`,
/// `expert.{i}.<trunk name>`, …).
pub struct HeteroExpertBound {
    pub trunk: BTreeMap<String, Var>,
    pub proj_in_w: Var,
    pub proj_in_b: Var,
    pub proj_out_w: Var,
    pub proj_out_b: Var,
}

pub struct HeteroBound {
    pub embed: Var,
    pub head: Var,
    pub router: Var,
    pub experts: Vec<HeteroExpertBound>,
}

pub fn bind_hetero(
    tape: &mut Tape,
    model: &HeteroMoeModel,
    trainable: &dyn Fn(&str) -> bool,
) -> HeteroBound {
    let mut bind = |name: String, tensor: &Tensor| -> Var {
        if trainable(&name) {
            tape.param(tensor.clone())
        } else {
            tape.constant(tensor.clone())
        }
    };
    let embed = bind("shared.embed.weight".into(), &model.embed);
    let head = bind("shared.head.weight".into(), &model.head);
    let router = bind("router.weight".into(), &model.router);
    let experts = model
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| HeteroExpertBound {
            trunk: e
                .trunk
                .iter()
                .map(|(name, t)| (name.clone(), bind(format!("expert.{i}.{name}"), t)))
                .collect(),
            proj_in_w: bind(format!("expert.{i}.proj_in.weight"), &e.proj_in_w),
            proj_in_b: bind(format!("expert.{i}.proj_in.bias"), &e.proj_in_b),
            proj_out_w: bind(format!("expert.{i}.proj_out.weight"), &e.proj_out_w),
            proj_out_b: bind(format!("expert.{i}.proj_out.bias"), &e.proj_out_b),
        })
        .collect();
    HeteroBound {
        embed,
        head,
        router,
        experts,
    }
}

/// Mixture forward on an existing tape. Pipeline per selected expert:
/// proj_in(shared embeddings) → the expert's own trunk and final norm →
/// proj_out → α-weighted sum → shared head. Unselected experts are never
/// evaluated; the α-weighted combination runs in fixed expert-index order.
pub fn hetero_logits_on_tape(
    tape: &mut Tape,
    model: &HeteroMoeModel,
    bound: &HeteroBound,
    input: &[u32],
) -> Result<(Var, RoutingTrace)> {
    model::validate_sequence(input, model.vocab_size(), model.max_seq_len())?;
    let t = input.len();
    let emb = tape.embed(bound.embed, input)?;
    let mean = tape.mean_rows(emb)?;
    let scores = tape.matmul_nt(mean, bound.router)?;
    let gates = tape.top_k_softmax_rows(scores, model.top_k)?;
    let alpha = tape.value(gates).data().to_vec();

    let mut parts = Vec::new();
    for (i, e) in model.experts.iter().enumerate() {
        if alpha[i] == 0.0 {
            continue;
        }
        let eb = &bound.experts[i];
        let x = tape.affine(emb, eb.proj_in_w, eb.proj_in_b)?;
        let h = model::trunk_layers(tape, &eb.trunk, &e.config, x)?;
        let r = tape.affine(h, eb.proj_out_w, eb.proj_out_b)?;
        parts.push(ScatterPart {
            y: r,
            expert: i,
            rows: (0..t).collect(),
        });
    }
    let combined = tape.scatter_combine(gates, parts, t)?;
    let logits = tape.matmul_nt(combined, bound.head)?;
    let trace = RoutingTrace {
        decisions: vec![RoutingDecision {
            layer: None,
            token: None,
            weights: alpha,
        }],
    };
    Ok((logits, trace))
}

/// Logits for every position of `input`, shape [t, vocab], plus the single
/// sequence-level routing decision.
pub fn hetero_forward(model: &HeteroMoeModel, input: &[u32]) -> Result<(Tensor, RoutingTrace)> {
    let mut tape = Tape::new();
    let bound = bind_hetero(&mut tape, model, &|_| false);
    let (logits, trace) = hetero_logits_on_tape(&mut tape, model, &bound, input)?;
    Ok((tape.value(logits).clone(), trace))
}

/// Next-token loss node on an existing tape: BOS-shifted input scored
/// against every real token.
pub fn hetero_lm_loss_on_tape(
    tape: &mut Tape,
    model: &HeteroMoeModel,
    bound: &HeteroBound,
    tokens: &[u32],
) -> Result<(Var, RoutingTrace)> {
    model::validate_sequence(tokens, model.vocab_size(), model.max_seq_len())?;
    let (input, targets) = model::teacher_forcing_split(tokens);
    let (logits, trace) = hetero_logits_on_tape(tape, model, bound, &input)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok((loss, trace))
}

pub fn hetero_lm_loss(model: &HeteroMoeModel, tokens: &[u32]) -> Result<f32> {
    let mut tape = Tape::new();
    let bound = bind_hetero(&mut tape, model, &|_| false);
    let (loss, _) = hetero_lm_loss_on_tape(&mut tape, model, &bound, tokens)?;
    Ok(tape.value(loss).item())
}

pub fn hetero_perplexity(model: &HeteroMoeModel, tokens: &[u32]) -> Result<f32> {
    Ok(hetero_lm_loss(model, tokens)?.exp())
}

/// Flatten to a container. Per-expert architecture goes in metadata: the
/// spec'd `dims`/`layers` arrays plus one full config per expert, which the
/// loader cross-checks against them.
pub fn hetero_to_container(model: &HeteroMoeModel) -> Result<Container> {
    model.validate()?;
    let mut tensors = BTreeMap::new();
    tensors.insert("shared.embed.weight".to_string(), model.embed.clone());
    tensors.insert("shared.head.weight".to_string(), model.head.clone());
    tensors.insert("router.weight".to_string(), model.router.clone());
    for (i, e) in model.experts.iter().enumerate() {
        tensors.insert(format!("expert.{i}.proj_in.weight"), e.proj_in_w.clone());
        tensors.insert(format!("expert.{i}.proj_in.bias"), e.proj_in_b.clone());
        tensors.insert(format!("expert.{i}.proj_out.weight"), e.proj_out_w.clone());
        tensors.insert(format!("expert.{i}.proj_out.bias"), e.proj_out_b.clone());
        for (name, t) in &e.trunk {
            tensors.insert(format!("expert.{i}.{name}"), t.clone());
        }
    }
    let dims: Vec<usize> = model.experts.iter().map(|e| e.config.d_model).collect();
    let layers: Vec<usize> = model.experts.iter().map(|e| e.config.n_layers).collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("kind".to_string(), HETERO_KIND.to_string());
    metadata.insert("experts".to_string(), model.n_experts().to_string());
    metadata.insert("top_k".to_string(), model.top_k.to_string());
    metadata.insert("dims".to_string(), serde_json::to_string(&dims)?);
    metadata.insert("layers".to_string(), serde_json::to_string(&layers)?);
    for (i, e) in model.experts.iter().enumerate() {
        metadata.insert(format!("expert.{i}.config"), serde_json::to_string(&e.config)?);
    }
    Ok(Container {
        config: None,
        metadata,
        tensors,
    })
}

pub fn hetero_from_container(container: &Container) -> Result<HeteroMoeModel> {
    let schema_err = |msg: String| -> Error { Error::Format(FormatError::SchemaMismatch(msg)) };
    match container.metadata.get("kind") {
        Some(k) if k == HETERO_KIND => {}
        other => {
            return Err(schema_err(format!(
                "container kind {:?} is not {HETERO_KIND}",
                other
            )))
        }
    }
    let meta = |key: &str| -> Result<&String> {
        container
            .metadata
            .get(key)
            .ok_or_else(|| schema_err(format!("missing metadata {key}")))
    };
    let n_experts: usize = meta("experts")?
        .parse()
        .map_err(|_| schema_err("non-numeric metadata experts".into()))?;
    let top_k: usize = meta("top_k")?
        .parse()
        .map_err(|_| schema_err("non-numeric metadata top_k".into()))?;
    let dims: Vec<usize> = serde_json::from_str(meta("dims")?)
        .map_err(|e| schema_err(format!("bad metadata dims: {e}")))?;
    let layers: Vec<usize> = serde_json::from_str(meta("layers")?)
        .map_err(|e| schema_err(format!("bad metadata layers: {e}")))?;
    if dims.len() != n_experts || layers.len() != n_experts {
        return Err(schema_err(format!(
            "dims/layers lengths {}/{} for {n_experts} experts",
            dims.len(),
            layers.len()
        )));
    }

    let tensor = |name: &str| -> Result<Tensor> {
        container
            .tensors
            .get(name)
            .cloned()
            .ok_or_else(|| schema_err(format!("missing tensor {name}")))
    };
    let mut experts = Vec::with_capacity(n_experts);
    for i in 0..n_experts {
        let config: ModelConfig = serde_json::from_str(meta(&format!("expert.{i}.config"))?)
            .map_err(|e| schema_err(format!("bad expert {i} config: {e}")))?;
        if config.d_model != dims[i] || config.n_layers != layers[i] {
            return Err(schema_err(format!(
                "expert {i} config dims/layers disagree with metadata arrays"
            )));
        }
        let prefix = format!("expert.{i}.");
        let trunk: BTreeMap<String, Tensor> = container
            .tensors
            .iter()
            .filter_map(|(name, t)| {
                name.strip_prefix(&prefix).and_then(|rest| {
                    if rest.starts_with("proj_in.") || rest.starts_with("proj_out.") {
                        None
                    } else {
                        Some((rest.to_string(), t.clone()))
                    }
                })
            })
            .collect();
        experts.push(HeteroExpert {
            config,
            trunk,
            proj_in_w: tensor(&format!("expert.{i}.proj_in.weight"))?,
            proj_in_b: tensor(&format!("expert.{i}.proj_in.bias"))?,
            proj_out_w: tensor(&format!("expert.{i}.proj_out.weight"))?,
            proj_out_b: tensor(&format!("expert.{i}.proj_out.bias"))?,
        });
    }
    let model = HeteroMoeModel {
        embed: tensor("shared.embed.weight")?,
        head: tensor("shared.head.weight")?,
        router: tensor("router.weight")?,
        experts,
        top_k,
    };
    model
        .validate()
        .map_err(|e| schema_err(format!("container does not describe a valid mixture: {e}")))?;
    Ok(model)
}

pub fn save_hetero(path: &Path, model: &HeteroMoeModel) -> Result<()> {
    moef::save_container(path, &hetero_to_container(model)?)
}

pub fn load_hetero(path: &Path) -> Result<HeteroMoeModel> {
    hetero_from_container(&moef::load_container(path)?)
}
