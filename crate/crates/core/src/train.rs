//! Training: AdamW over named parameter maps, weighted corpus sampling,
//! and one loop that drives dense, mixture, and mixed-dimension models.
//!
//! Every batch sequence builds its own tape; gradients are averaged in
//! batch order so runs are bit-reproducible regardless of thread count.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DomainCorpus;
use crate::error::{Error, Result};
use crate::hetero::{self, HeteroMoeModel};
use crate::model::{self, Checkpoint};
use crate::moe::{self, MoeModel};
use crate::moef;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{self as tensor_ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    All,
    RouterOnly,
}

impl Trainable {
    pub fn selects(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::RouterOnly => name.starts_with("router."),
        }
    }
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable::All
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trainable: Trainable,
}

fn default_lr() -> f32 {
    3e-4
}

fn default_weight_decay() -> f32 {
    0.01
}

fn default_batch_size() -> usize {
    8
}

fn default_val_every() -> usize {
    100
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            val_every: default_val_every(),
            seed,
            trainable: Trainable::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} invalid", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} invalid",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-corpus sampling probabilities; must lie on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixtureWeights(pub Vec<f32>);

impl MixtureWeights {
    pub fn uniform(n: usize) -> Self {
        MixtureWeights(vec![1.0 / n as f32; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let sum: f64 = self.0.iter().map(|&w| f64::from(w)).sum();
        // f32 weights carry ~1e-8 relative error each; 1e-6 absorbs that
        // while still rejecting genuinely unnormalized inputs
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("mixture weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Weighted draw over corpora, then uniform over that corpus's sequences.
/// Deterministic per seed.
pub struct MixtureSampler {
    corpora: Vec<DomainCorpus>,
    cumulative: Vec<f32>,
    rng: ChaCha8Rng,
}

impl MixtureSampler {
    pub fn new(corpora: Vec<DomainCorpus>, weights: &MixtureWeights, seed: u64) -> Result<Self> {
        if corpora.len() != weights.0.len() {
            return Err(Error::Config(format!(
                "{} corpora but {} mixture weights",
                corpora.len(),
                weights.0.len()
            )));
        }
        weights.validate()?;
        if corpora.iter().any(|c| c.sequences.is_empty()) {
            return Err(Error::Config("empty corpus in mixture".into()));
        }
        let mut cumulative = Vec::with_capacity(weights.0.len());
        let mut acc = 0.0f32;
        for &w in &weights.0 {
            acc += w;
            cumulative.push(acc);
        }
        Ok(MixtureSampler {
            corpora,
            cumulative,
            rng: rng::stream(seed, "mixture.sampler"),
        })
    }

    pub fn draw_corpus_index(&mut self) -> usize {
        let u: f32 = self.rng.gen();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    pub fn next_sequence(&mut self) -> Vec<u32> {
        let c = self.draw_corpus_index();
        let corpus = &self.corpora[c];
        let s = self.rng.gen_range(0..corpus.sequences.len());
        corpus.sequences[s].clone()
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<Vec<u32>> {
        (0..n).map(|_| self.next_sequence()).collect()
    }
}

/// Decoupled-weight-decay Adam over named tensors. Moment buffers are
/// created on first sight of each name.
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: usize,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once before the per-tensor
    /// updates of a batch so bias correction sees a consistent t.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one AdamW update to a single named tensor.
    pub fn update(&mut self, name: &str, g: &Tensor, theta: &mut Tensor) -> Result<()> {
        if g.numel() != theta.numel() {
            return Err(Error::Validation(format!(
                "gradient for {name} has {} values, parameter has {}",
                g.numel(),
                theta.numel()
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.numel()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.numel()]);
        for ((t, g), (m, v)) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *t -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *t);
        }
        Ok(())
    }
}

/// Any trainable/evaluable model, dispatched by checkpoint metadata kind.
pub enum AnyModel {
    Dense(Checkpoint),
    Moe(MoeModel),
    Hetero(HeteroMoeModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Dense(_) => "dense",
            AnyModel::Moe(_) => "moe",
            AnyModel::Hetero(_) => "hetero_moe",
        }
    }

    pub fn load(path: &Path) -> Result<AnyModel> {
        let container = moef::load_container(path)?;
        match container.metadata.get("kind").map(String::as_str) {
            Some(moe::MOE_KIND) => Ok(AnyModel::Moe(moe::moe_from_container(&container)?)),
            Some(hetero::HETERO_KIND) => {
                Ok(AnyModel::Hetero(hetero::hetero_from_container(&container)?))
            }
            _ => Ok(AnyModel::Dense(moef::checkpoint_from_container(container)?)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyModel::Dense(c) => moef::save_checkpoint(path, c),
            AnyModel::Moe(m) => moe::save_moe(path, m),
            AnyModel::Hetero(m) => hetero::save_hetero(path, m),
        }
    }

    /// Mean next-token loss; learned routing only (heuristic-mode mixtures
    /// need per-sequence weights the model alone cannot supply).
    pub fn lm_loss(&self, tokens: &[u32]) -> Result<f32> {
        match self {
            AnyModel::Dense(c) => model::lm_loss(c, tokens),
            AnyModel::Moe(m) => moe::moe_lm_loss(m, tokens, None),
            AnyModel::Hetero(m) => hetero::hetero_lm_loss(m, tokens),
        }
    }

    /// Resolve a flattened parameter name to its live tensor.
    fn named_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self {
            AnyModel::Dense(c) => c.tensors.get_mut(name),
            AnyModel::Moe(m) => {
                if let Some(rest) = name.strip_prefix("expert.") {
                    let (i, rest) = rest.split_once('.')?;
                    m.experts.get_mut(i.parse::<usize>().ok()?)?.get_mut(rest)
                } else if let Some(rest) = name.strip_prefix("router.") {
                    let j = rest.strip_suffix(".weight")?.parse::<usize>().ok()?;
                    m.routers.get_mut(j)
                } else {
                    m.shared.get_mut(name)
                }
            }
            AnyModel::Hetero(m) => match name {
                "shared.embed.weight" => Some(&mut m.embed),
                "shared.head.weight" => Some(&mut m.head),
                "router.weight" => Some(&mut m.router),
                _ => {
                    let rest = name.strip_prefix("expert.")?;
                    let (i, rest) = rest.split_once('.')?;
                    let e = m.experts.get_mut(i.parse::<usize>().ok()?)?;
                    match rest {
                        "proj_in.weight" => Some(&mut e.proj_in_w),
                        "proj_in.bias" => Some(&mut e.proj_in_b),
                        "proj_out.weight" => Some(&mut e.proj_out_w),
                        "proj_out.bias" => Some(&mut e.proj_out_b),
                        trunk_name => e.trunk.get_mut(trunk_name),
                    }
                }
            },
        }
    }

    /// Sequence loss and per-parameter gradients under flattened names
    /// (dense names verbatim; mixtures prefix expert.{i}. / router.).
    /// Frozen or unreached parameters have no entry.
    pub fn loss_grads(
        &self,
        tokens: &[u32],
        trainable: Trainable,
    ) -> Result<(f32, BTreeMap<String, Tensor>)> {
        let (loss, vars, tape) = self.seq_loss_graph(tokens, trainable)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in vars {
            if let Some(g) = grads.get(var) {
                out.insert(name, g.clone());
            }
        }
        Ok((value, out))
    }

    /// Sequence loss plus the tape it lives on and the name→Var binding,
    /// so the caller can run backward and map gradients to tensors.
    fn seq_loss_graph(
        &self,
        tokens: &[u32],
        trainable: Trainable,
    ) -> Result<(Var, BTreeMap<String, Var>, Tape)> {
        let pred = |name: &str| trainable.selects(name);
        let mut tape = Tape::new();
        let (loss, vars): (Var, BTreeMap<String, Var>) = match self {
            AnyModel::Dense(c) => {
                model::validate_sequence(tokens, c.config.vocab_size, c.config.max_seq_len)?;
                let vars = model::bind_checkpoint(&mut tape, c, &pred);
                let (input, targets) = model::teacher_forcing_split(tokens);
                let logits = model::dense_logits(&mut tape, &vars, &c.config, &input)?;
                (tape.cross_entropy(logits, &targets)?, vars)
            }
            AnyModel::Moe(m) => {
                let bound = moe::bind_moe(&mut tape, m, &pred);
                let (loss, _) = moe::moe_lm_loss_on_tape(&mut tape, m, &bound, tokens, None)?;
                let mut vars = BTreeMap::new();
                for (name, var) in &bound.shared {
                    vars.insert(name.clone(), *var);
                }
                for (i, set) in bound.experts.iter().enumerate() {
                    for (name, var) in set {
                        vars.insert(format!("expert.{i}.{name}"), *var);
                    }
                }
                for (j, var) in bound.routers.iter().enumerate() {
                    vars.insert(format!("router.{j}.weight"), *var);
                }
                (loss, vars)
            }
            AnyModel::Hetero(m) => {
                let bound = hetero::bind_hetero(&mut tape, m, &pred);
                let (loss, _) = hetero::hetero_lm_loss_on_tape(&mut tape, m, &bound, tokens)?;
                let mut vars = BTreeMap::new();
                vars.insert("shared.embed.weight".to_string(), bound.embed);
                vars.insert("shared.head.weight".to_string(), bound.head);
                vars.insert("router.weight".to_string(), bound.router);
                for (i, eb) in bound.experts.iter().enumerate() {
                    vars.insert(format!("expert.{i}.proj_in.weight"), eb.proj_in_w);
                    vars.insert(format!("expert.{i}.proj_in.bias"), eb.proj_in_b);
                    vars.insert(format!("expert.{i}.proj_out.weight"), eb.proj_out_w);
                    vars.insert(format!("expert.{i}.proj_out.bias"), eb.proj_out_b);
                    for (name, var) in &eb.trunk {
                        vars.insert(format!("expert.{i}.{name}"), *var);
                    }
                }
                (loss, vars)
            }
        };
        Ok((loss, vars, tape))
    }

    fn has_router(&self) -> bool {
        !matches!(self, AnyModel::Dense(_))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub step_losses: Vec<f32>,
    /// (step, validation loss), recorded before training and every
    /// `val_every` steps when a validation batch is supplied.
    pub val_losses: Vec<(usize, f32)>,
    pub tokens_seen: usize,
    pub wall_clock_secs: f64,
}

fn validation_loss(model: &AnyModel, batch: &[Vec<u32>]) -> Result<f32> {
    let mut total = 0.0;
    for seq in batch {
        total += model.lm_loss(seq)?;
    }
    Ok(total / batch.len() as f32)
}

/// AdamW training loop. Each step draws a batch from the sampler, averages
/// per-sequence gradients in batch order, and applies one update.
/// `router_only` leaves every non-router tensor bit-identical; a non-finite
/// loss aborts with the offending step.
pub fn train(
    model: &mut AnyModel,
    sampler: &mut MixtureSampler,
    config: &TrainConfig,
    val_batch: Option<&[Vec<u32>]>,
) -> Result<TrainReport> {
    config.validate()?;
    if config.trainable == Trainable::RouterOnly && !model.has_router() {
        return Err(Error::Config(
            "router_only training needs a model with a router".into(),
        ));
    }
    if let AnyModel::Moe(m) = model {
        if m.routing_mode.needs_heuristic_weights() {
            return Err(Error::Config(format!(
                "cannot train a mixture in {} routing mode",
                m.routing_mode.as_str()
            )));
        }
    }

    let started = Instant::now();
    let mut report = TrainReport {
        step_losses: Vec::with_capacity(config.steps),
        val_losses: Vec::new(),
        tokens_seen: 0,
        wall_clock_secs: 0.0,
    };
    if config.steps == 0 {
        return Ok(report);
    }
    if let Some(batch) = val_batch {
        report.val_losses.push((0, validation_loss(model, batch)?));
    }

    let mut opt = AdamW::new(config.lr, config.weight_decay);
    for step in 1..=config.steps {
        let batch = sampler.next_batch(config.batch_size);
        report.tokens_seen += batch.iter().map(Vec::len).sum::<usize>();

        // per-sequence tapes run in parallel; the fold below stays in batch
        // order so gradient sums are bitwise reproducible
        let per_seq: Vec<Result<(f32, BTreeMap<String, Tensor>)>> = batch
            .par_iter()
            .map(|seq| model.loss_grads(seq, config.trainable))
            .collect();

        let mut batch_loss = 0.0f32;
        let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let scale = 1.0 / config.batch_size as f32;
        // a non-finite intermediate anywhere in forward/backward is the
        // first observable sign of divergence; surface it as such
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                loss: f32::NAN,
            },
            other => other,
        };
        for item in per_seq {
            let (loss, grads) = item.map_err(diverged)?;
            batch_loss += loss * scale;
            for (name, g) in grads {
                match grad_acc.get_mut(&name) {
                    Some(acc) => tensor_ops::axpy(acc, scale, &g),
                    None => {
                        grad_acc.insert(name, tensor_ops::scale(&g, scale));
                    }
                }
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: batch_loss,
            });
        }
        report.step_losses.push(batch_loss);

        opt.begin_step();
        for (name, g) in &grad_acc {
            let theta = model
                .named_mut(name)
                .ok_or_else(|| Error::Validation(format!("gradient for unknown tensor {name}")))?;
            opt.update(name, g, theta)?;
        }

        if let Some(batch) = val_batch {
            if step % config.val_every == 0 || step == config.steps {
                report.val_losses.push((step, validation_loss(model, batch)?));
            }
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
