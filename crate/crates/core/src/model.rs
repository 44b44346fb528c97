//! Toy decoder-only language model: RMS-norm, rotary attention, SiLU-gated
//! FFN, untied embedding and head. Forward passes run on the autodiff tape so
//! training and evaluation share one code path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Reserved begin-of-sequence id. Scoring prepends it so the first real token
/// has a context to be conditioned on.
pub const BOS_TOKEN: u32 = 0;

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.n_layers >= 1
            && self.d_model >= 1
            && self.n_heads >= 1
            && self.d_ffn >= 1
            && self.vocab_size >= 1
            && self.max_seq_len >= 1;
        if !all_positive {
            return Err(Error::Config("model config fields must all be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary embeddings",
                self.d_model / self.n_heads
            )));
        }
        Ok(())
    }

    /// Canonical (name, shape) pairs for every tensor the config implies,
    /// in name-sorted order. Merging and the checkpoint format key tensors
    /// by these names; the set is exact, with nothing optional.
    pub fn tensor_schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.d_ffn;
        let v = self.vocab_size;
        let mut schema = vec![
            ("embed.weight".to_string(), vec![v, d]),
            ("final_norm.gain".to_string(), vec![d]),
            ("head.weight".to_string(), vec![v, d]),
        ];
        for i in 0..self.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                schema.push((format!("layer.{i}.attn.{w}"), vec![d, d]));
            }
            schema.push((format!("layer.{i}.attn_norm.gain"), vec![d]));
            schema.push((format!("layer.{i}.ffn.w_gate"), vec![f, d]));
            schema.push((format!("layer.{i}.ffn.w_up"), vec![f, d]));
            schema.push((format!("layer.{i}.ffn.w_down"), vec![d, f]));
            schema.push((format!("layer.{i}.ffn_norm.gain"), vec![d]));
        }
        schema.sort_by(|a, b| a.0.cmp(&b.0));
        schema
    }
}

/// A dense model: config, the exact tensor set the config implies, and
/// free-form provenance metadata (kind, seed, training domain).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let ckpt = Checkpoint {
            config,
            tensors,
            metadata,
        };
        ckpt.validate_schema()?;
        Ok(ckpt)
    }

    /// The tensor set must match the config's schema exactly: no missing
    /// names, no extras, no shape drift.
    pub fn validate_schema(&self) -> Result<()> {
        self.config.validate()?;
        let schema = self.config.tensor_schema();
        for (name, shape) in &schema {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::Validation(format!("missing tensor {name}")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Validation(format!(
                        "tensor {name} has shape {:?}, schema wants {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != schema.len() {
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| !schema.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::Validation(format!(
                "unexpected tensors outside schema: {extra:?}"
            )));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))
    }
}

/// Deterministic initialization: weights from a per-tensor seeded normal
/// (std 0.02), norm gains at 1 so early activations keep their scale.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.tensor_schema() {
        let t = if name.ends_with(".gain") {
            Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?
        } else {
            init_normal(&shape, seed, &name)
        };
        tensors.insert(name, t);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("kind".to_string(), "dense".to_string());
    metadata.insert("seed".to_string(), seed.to_string());
    Checkpoint::new(config.clone(), tensors, metadata)
}

pub(crate) fn init_normal(shape: &[usize], seed: u64, name: &str) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let mut rng = rng::stream(seed, name);
    let normal = Normal::new(0.0f32, INIT_STD).expect("std is finite");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(&mut rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data length")
}

pub fn validate_sequence(tokens: &[u32], vocab: usize, max_len: usize) -> Result<()> {
    if tokens.is_empty() || tokens.len() > max_len {
        return Err(Error::BadSequenceLength {
            len: tokens.len(),
            max: max_len,
        });
    }
    for &t in tokens {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { token: t, vocab });
        }
    }
    Ok(())
}

/// Parameters of one attention block, already bound to tape vars.
pub(crate) struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub norm_gain: Var,
    pub n_heads: usize,
}

/// q/k/v projections, rotary q/k, causal attention, and the output
/// projection on an already-normalized input. No norm, no residual.
pub(crate) fn attn_core(tape: &mut Tape, x: Var, p: &AttnVars) -> Result<Var> {
    let q = tape.matmul_nt(x, p.wq)?;
    let k = tape.matmul_nt(x, p.wk)?;
    let v = tape.matmul_nt(x, p.wv)?;
    let q = tape.rope(q, p.n_heads)?;
    let k = tape.rope(k, p.n_heads)?;
    let attn = tape.causal_attention(q, k, v, p.n_heads)?;
    tape.matmul_nt(attn, p.wo)
}

/// Pre-norm attention with rotary q/k and a residual connection.
pub(crate) fn attention_block(tape: &mut Tape, h: Var, p: &AttnVars) -> Result<Var> {
    let x = tape.rms_norm(h, p.norm_gain)?;
    let o = attn_core(tape, x, p)?;
    tape.add(h, o)
}

/// Parameters of one gated FFN, already bound to tape vars.
pub(crate) struct FfnVars {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// silu(x·w_gateᵀ) ⊙ (x·w_upᵀ) · w_downᵀ on an already-normalized input.
pub(crate) fn ffn_apply(tape: &mut Tape, x: Var, p: &FfnVars) -> Result<Var> {
    let gate = tape.matmul_nt(x, p.w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul_nt(x, p.w_up)?;
    let act = tape.mul(gate, up)?;
    tape.matmul_nt(act, p.w_down)
}

/// Pre-norm FFN with a residual connection.
pub(crate) fn ffn_block(tape: &mut Tape, h: Var, norm_gain: Var, p: &FfnVars) -> Result<Var> {
    let x = tape.rms_norm(h, norm_gain)?;
    let out = ffn_apply(tape, x, p)?;
    tape.add(h, out)
}

/// Bind every checkpoint tensor onto the tape. Names matching `trainable`
/// become parameters, the rest constants.
pub(crate) fn bind_checkpoint(
    tape: &mut Tape,
    ckpt: &Checkpoint,
    trainable: &dyn Fn(&str) -> bool,
) -> BTreeMap<String, Var> {
    let mut vars = BTreeMap::new();
    for (name, tensor) in &ckpt.tensors {
        let var = if trainable(name) {
            tape.param(tensor.clone())
        } else {
            tape.constant(tensor.clone())
        };
        vars.insert(name.clone(), var);
    }
    vars
}

/// The layer stack shared by dense and mixture trunks: n_layers ×
/// (attention + FFN) followed by the final norm, on an already-embedded
/// input. Returns normalized hidden states [t, d_model].
pub(crate) fn trunk_layers(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &ModelConfig,
    input: Var,
) -> Result<Var> {
    let v = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))
    };
    let mut h = input;
    for i in 0..config.n_layers {
        let attn = AttnVars {
            wq: v(&format!("layer.{i}.attn.wq"))?,
            wk: v(&format!("layer.{i}.attn.wk"))?,
            wv: v(&format!("layer.{i}.attn.wv"))?,
            wo: v(&format!("layer.{i}.attn.wo"))?,
            norm_gain: v(&format!("layer.{i}.attn_norm.gain"))?,
            n_heads: config.n_heads,
        };
        h = attention_block(tape, h, &attn)?;
        let ffn = FfnVars {
            w_gate: v(&format!("layer.{i}.ffn.w_gate"))?,
            w_up: v(&format!("layer.{i}.ffn.w_up"))?,
            w_down: v(&format!("layer.{i}.ffn.w_down"))?,
        };
        h = ffn_block(tape, h, v(&format!("layer.{i}.ffn_norm.gain"))?, &ffn)?;
    }
    tape.rms_norm(h, v("final_norm.gain")?)
}

/// Full dense trunk: embed → layer stack → final norm.
pub(crate) fn dense_hidden(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &ModelConfig,
    tokens: &[u32],
) -> Result<Var> {
    let embed = vars
        .get("embed.weight")
        .copied()
        .ok_or_else(|| Error::Validation("missing tensor embed.weight".into()))?;
    let h = tape.embed(embed, tokens)?;
    trunk_layers(tape, vars, config, h)
}

pub(crate) fn dense_logits(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &ModelConfig,
    tokens: &[u32],
) -> Result<Var> {
    let h = dense_hidden(tape, vars, config, tokens)?;
    let head = vars
        .get("head.weight")
        .copied()
        .ok_or_else(|| Error::Validation("missing tensor head.weight".into()))?;
    tape.matmul_nt(h, head)
}

/// Input/target split for next-token scoring: the model reads BOS followed by
/// all but the last token and is scored against every real token.
pub fn teacher_forcing_split(tokens: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(tokens.len());
    input.push(BOS_TOKEN);
    input.extend_from_slice(&tokens[..tokens.len() - 1]);
    (input, tokens.to_vec())
}

/// Logits for every position of `input`, shape [t, vocab].
pub fn forward(ckpt: &Checkpoint, input: &[u32]) -> Result<Tensor> {
    validate_sequence(input, ckpt.config.vocab_size, ckpt.config.max_seq_len)?;
    let mut tape = Tape::new();
    let vars = bind_checkpoint(&mut tape, ckpt, &|_| false);
    let logits = dense_logits(&mut tape, &vars, &ckpt.config, input)?;
    Ok(tape.value(logits).clone())
}

/// Mean next-token negative log-likelihood of the sequence.
pub fn lm_loss(ckpt: &Checkpoint, tokens: &[u32]) -> Result<f32> {
    validate_sequence(tokens, ckpt.config.vocab_size, ckpt.config.max_seq_len)?;
    let (input, targets) = teacher_forcing_split(tokens);
    let mut tape = Tape::new();
    let vars = bind_checkpoint(&mut tape, ckpt, &|_| false);
    let logits = dense_logits(&mut tape, &vars, &ckpt.config, &input)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(tape.value(loss).item())
}

/// exp(mean NLL); every token is scored, the first against BOS context.
pub fn perplexity(ckpt: &Checkpoint, tokens: &[u32]) -> Result<f32> {
    Ok(lm_loss(ckpt, tokens)?.exp())
}

/// Greedy (temperature 0) or temperature sampling from repeated forwards.
/// Stops early when the sequence reaches max_seq_len.
pub fn generate(
    ckpt: &Checkpoint,
    prompt: &[u32],
    max_new: usize,
    temperature: f32,
    seed: u64,
) -> Result<Vec<u32>> {
    generate_with(
        |tokens| forward(ckpt, tokens),
        ckpt.config.vocab_size,
        ckpt.config.max_seq_len,
        prompt,
        max_new,
        temperature,
        seed,
    )
}

/// Shared decoding loop over any full-sequence logits function. The model
/// is fed BOS plus the tokens so far, matching the scoring convention, and
/// the last logit row picks the next token.
pub(crate) fn generate_with<F>(
    mut logits_fn: F,
    vocab_size: usize,
    max_seq_len: usize,
    prompt: &[u32],
    max_new: usize,
    temperature: f32,
    seed: u64,
) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Tensor>,
{
    validate_sequence(prompt, vocab_size, max_seq_len)?;
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(Error::Config(format!("temperature {temperature} invalid")));
    }
    let mut tokens = prompt.to_vec();
    let mut rng = rng::stream(seed, "generate");
    for _ in 0..max_new {
        if tokens.len() + 1 > max_seq_len {
            break;
        }
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(BOS_TOKEN);
        input.extend_from_slice(&tokens);
        let logits = logits_fn(&input)?;
        let last = logits.row(logits.rows() - 1);
        let next = if temperature == 0.0 {
            argmax_lowest(last) as u32
        } else {
            sample_scaled(last, temperature, &mut rng) as u32
        };
        tokens.push(next);
    }
    Ok(tokens)
}

/// Argmax with ties broken toward the lower index.
pub(crate) fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_scaled(row: &[f32], temperature: f32, rng: &mut impl rand::Rng) -> usize {
    let mut probs: Vec<f32> = row.iter().map(|&v| v / temperature).collect();
    tensor::softmax_slice(&mut probs);
    let draw: f32 = rng.gen();
    let mut acc = 0.0f32;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}
