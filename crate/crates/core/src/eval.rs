//! Evaluation: per-domain perplexity and exact-match scoring over held-out
//! corpora, routing statistics, and side-by-side model comparison driven by
//! a scenario config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{gen_corpus, gen_eval_prompts, Domain, DomainCorpus, EvalPrompt};
use crate::error::{Error, Result};
use crate::hetero;
use crate::merge::{task_vector, TaskVector};
use crate::model::{self, Checkpoint};
use crate::moe::{self, routing_probability, MoeModel, RoutingMode};
use crate::tape::Tape;
use crate::train::AnyModel;

/// Original dense expert checkpoints (and their shared base) that heuristic
/// routing consults at evaluation time. Task vectors are precomputed once.
pub struct HeuristicContext {
    pub base: Checkpoint,
    pub experts: Vec<Checkpoint>,
    task_vectors: Vec<TaskVector>,
}

impl HeuristicContext {
    pub fn new(base: Checkpoint, experts: Vec<Checkpoint>) -> Result<Self> {
        let task_vectors = experts
            .iter()
            .map(|e| task_vector(&base, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(HeuristicContext {
            base,
            experts,
            task_vectors,
        })
    }

    /// Per-sequence routing weights for a heuristic mode, dense over all
    /// experts with exactly k nonzero entries.
    pub fn alpha(&self, mode: RoutingMode, tokens: &[u32], k: usize) -> Result<Vec<f32>> {
        match mode {
            RoutingMode::Ppl => moe::ppl_route(&self.experts, tokens, k),
            RoutingMode::Grad => moe::grad_route(&self.base, &self.task_vectors, tokens, k),
            RoutingMode::Learned | RoutingMode::Random => Err(Error::Config(format!(
                "{} routing computes no per-sequence weights",
                mode.as_str()
            ))),
        }
    }
}

/// How much held-out data evaluation looks at per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default = "default_sequences")]
    pub sequences: usize,
    /// Exact-match prompts per answer-span domain; 0 skips exact match.
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_sequences() -> usize {
    32
}

fn default_prompts() -> usize {
    32
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            sequences: default_sequences(),
            prompts: default_prompts(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain: Domain,
    /// Corpus perplexity: exp of the token-weighted mean negative
    /// log-likelihood over the held-out sequences.
    pub perplexity: f32,
    /// Fraction of prompts whose greedy continuation reproduces the answer
    /// span exactly; only domains with an answer span report it.
    pub exact_match: Option<f32>,
    /// Mean per-expert routing probability; mixtures only.
    pub routing: Option<Vec<f32>>,
    pub sequences: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub domains: Vec<DomainEval>,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn domain(&self, d: Domain) -> Option<&DomainEval> {
        self.domains.iter().find(|e| e.domain == d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table, one row per domain.
    pub fn table(&self) -> String {
        let mut rows = vec![table_header()];
        for d in &self.domains {
            rows.push(table_row(&self.model, d));
        }
        align_rows(&rows)
    }
}

fn table_header() -> Vec<String> {
    ["model", "domain", "ppl", "exact", "tokens", "routing"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn table_row(model: &str, d: &DomainEval) -> Vec<String> {
    vec![
        model.to_string(),
        d.domain.to_string(),
        format!("{:.3}", d.perplexity),
        d.exact_match
            .map_or_else(|| "-".to_string(), |m| format!("{m:.3}")),
        d.tokens.to_string(),
        d.routing.as_ref().map_or_else(
            || "-".to_string(),
            |r| {
                r.iter()
                    .map(|w| format!("{w:.3}"))
                    .collect::<Vec<_>>()
                    .join("/")
            },
        ),
    ]
}

/// Left-align each column to its widest cell, two spaces between columns.
fn align_rows(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            line.push_str(cell);
            if i + 1 < row.len() {
                for _ in 0..widths[i] - cell.len() + 2 {
                    line.push(' ');
                }
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Sequence loss and the routing weights the model used for it.
fn seq_nll(
    model: &AnyModel,
    tokens: &[u32],
    ctx: Option<&HeuristicContext>,
) -> Result<(f32, Option<Vec<f32>>)> {
    match model {
        AnyModel::Dense(c) => Ok((model::lm_loss(c, tokens)?, None)),
        AnyModel::Moe(m) => {
            let alpha = heuristic_alpha(m, tokens, ctx)?;
            let mut tape = Tape::new();
            let bound = moe::bind_moe(&mut tape, m, &|_| false);
            let (loss, trace) =
                moe::moe_lm_loss_on_tape(&mut tape, m, &bound, tokens, alpha.as_deref())?;
            let weights = routing_probability(&trace)?;
            Ok((tape.value(loss).item(), Some(weights)))
        }
        AnyModel::Hetero(m) => {
            let mut tape = Tape::new();
            let bound = hetero::bind_hetero(&mut tape, m, &|_| false);
            let (loss, trace) = hetero::hetero_lm_loss_on_tape(&mut tape, m, &bound, tokens)?;
            let weights = routing_probability(&trace)?;
            Ok((tape.value(loss).item(), Some(weights)))
        }
    }
}

/// Heuristic modes compute weights once per sequence from the original
/// dense experts; learned/random modes return None (router handles it).
fn heuristic_alpha(
    m: &MoeModel,
    tokens: &[u32],
    ctx: Option<&HeuristicContext>,
) -> Result<Option<Vec<f32>>> {
    if !m.routing_mode.needs_heuristic_weights() {
        return Ok(None);
    }
    let ctx = ctx.ok_or_else(|| {
        Error::Config(format!(
            "{} routing needs the original expert checkpoints",
            m.routing_mode.as_str()
        ))
    })?;
    Ok(Some(ctx.alpha(m.routing_mode, tokens, m.top_k)?))
}

/// Greedy continuation of a prompt under any model kind. Heuristic routing
/// weights are computed once from the prompt and reused for every step.
pub fn greedy_continuation(
    model: &AnyModel,
    prompt: &[u32],
    max_new: usize,
    ctx: Option<&HeuristicContext>,
) -> Result<Vec<u32>> {
    let full = match model {
        AnyModel::Dense(c) => model::generate(c, prompt, max_new, 0.0, 0)?,
        AnyModel::Moe(m) => {
            let alpha = heuristic_alpha(m, prompt, ctx)?;
            model::generate_with(
                |input| moe::moe_forward(m, input, alpha.as_deref()).map(|(l, _)| l),
                m.config.vocab_size,
                m.config.max_seq_len,
                prompt,
                max_new,
                0.0,
                0,
            )?
        }
        AnyModel::Hetero(m) => model::generate_with(
            |input| hetero::hetero_forward(m, input).map(|(l, _)| l),
            m.vocab_size(),
            m.max_seq_len(),
            prompt,
            max_new,
            0.0,
            0,
        )?,
    };
    Ok(full[prompt.len()..].to_vec())
}

fn exact_match_rate(
    model: &AnyModel,
    prompts: &[EvalPrompt],
    ctx: Option<&HeuristicContext>,
) -> Result<f32> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool>> = prompts
        .par_iter()
        .map(|p| {
            let got = greedy_continuation(model, &p.prompt, p.answer.len(), ctx)?;
            Ok(got == p.answer)
        })
        .collect();
    let mut n_hit = 0usize;
    for h in hits {
        if h? {
            n_hit += 1;
        }
    }
    Ok(n_hit as f32 / prompts.len() as f32)
}

/// Score one model over held-out corpora: token-weighted perplexity per
/// domain, exact match on answer-span domains, and mean routing weights.
/// Read-only on the model; deterministic for a fixed spec.
pub fn evaluate(
    label: &str,
    model: &AnyModel,
    corpora: &[DomainCorpus],
    spec: &EvalSpec,
    ctx: Option<&HeuristicContext>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let mut domains = Vec::with_capacity(corpora.len());
    for corpus in corpora {
        let seqs: Vec<&Vec<u32>> = corpus.sequences.iter().take(spec.sequences).collect();
        if seqs.is_empty() {
            return Err(Error::Validation(format!(
                "no held-out sequences for domain {}",
                corpus.domain
            )));
        }
        // Per sequence: mean nll, token count, routing means if the model routes.
        type SeqScore = (f32, usize, Option<Vec<f32>>);
        let scored: Vec<Result<SeqScore>> = seqs
            .par_iter()
            .map(|s| {
                let (nll, routing) = seq_nll(model, s, ctx)?;
                Ok((nll, s.len(), routing))
            })
            .collect();
        let mut total_nll = 0.0f64;
        let mut total_tokens = 0usize;
        let mut routing_sum: Option<Vec<f32>> = None;
        for item in scored {
            let (nll, len, routing) = item?;
            total_nll += f64::from(nll) * len as f64;
            total_tokens += len;
            if let Some(r) = routing {
                match &mut routing_sum {
                    Some(acc) => {
                        for (a, w) in acc.iter_mut().zip(&r) {
                            *a += w;
                        }
                    }
                    None => routing_sum = Some(r),
                }
            }
        }
        let routing = routing_sum.map(|mut acc| {
            for a in &mut acc {
                *a /= seqs.len() as f32;
            }
            acc
        });

        let exact_match = if corpus.domain.has_exact_match() && spec.prompts > 0 {
            let prompts = gen_eval_prompts(corpus.domain, spec.seed, spec.prompts)?;
            Some(exact_match_rate(model, &prompts, ctx)?)
        } else {
            None
        };

        domains.push(DomainEval {
            domain: corpus.domain,
            perplexity: (total_nll / total_tokens as f64).exp() as f32,
            exact_match,
            routing,
            sequences: seqs.len(),
            tokens: total_tokens,
        });
    }
    Ok(EvalReport {
        model: label.to_string(),
        domains,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Held-out corpus generation settings for a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorporaSpec {
    pub domains: Vec<Domain>,
    pub seed: u64,
    #[serde(default = "default_sequences")]
    pub sequences: usize,
}

impl CorporaSpec {
    pub fn build(&self) -> Vec<DomainCorpus> {
        self.domains
            .iter()
            .map(|&d| gen_corpus(d, self.seed, self.sequences))
            .collect()
    }
}

/// Checkpoint paths for heuristic routing context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicPaths {
    pub base: PathBuf,
    pub experts: Vec<PathBuf>,
}

/// One self-contained comparison scenario: which checkpoints to score,
/// what data to score them on, and how any fine-tuning stage was run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Label -> checkpoint path; labels become table rows in sorted order.
    pub models: BTreeMap<String, PathBuf>,
    pub corpora: CorporaSpec,
    /// Domain -> training mixture weight (consumed by fine-tuning, carried
    /// here so one file describes the whole scenario).
    #[serde(default)]
    pub mixture: BTreeMap<String, f32>,
    #[serde(default)]
    pub train: Option<crate::train::TrainConfig>,
    #[serde(default)]
    pub eval: EvalSpec,
    /// Original dense checkpoints for ppl/grad-routed mixtures.
    #[serde(default)]
    pub heuristic: Option<HeuristicPaths>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
}

impl Comparison {
    /// One aligned table over all models: a row per model per domain.
    pub fn table(&self) -> String {
        let mut rows = vec![table_header()];
        for report in &self.reports {
            for d in &report.domains {
                rows.push(table_row(&report.model, d));
            }
        }
        align_rows(&rows)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn load_checkpoint_at(path: &Path) -> Result<Checkpoint> {
    let container = crate::moef::load_container(path)?;
    crate::moef::checkpoint_from_container(container)
}

/// Evaluate every model in the scenario on the same held-out corpora.
/// Missing checkpoints fail up front; labels are scored in sorted order so
/// identical scenarios produce identical tables.
pub fn compare_baselines(config: &ScenarioConfig) -> Result<Comparison> {
    for path in config.models.values() {
        if !path.exists() {
            return Err(Error::Validation(format!(
                "missing checkpoint {}",
                path.display()
            )));
        }
    }
    let ctx = match &config.heuristic {
        Some(h) => {
            let base = load_checkpoint_at(&h.base)?;
            let experts = h
                .experts
                .iter()
                .map(|p| load_checkpoint_at(p))
                .collect::<Result<Vec<_>>>()?;
            Some(HeuristicContext::new(base, experts)?)
        }
        None => None,
    };
    let corpora = config.corpora.build();
    let mut reports = Vec::with_capacity(config.models.len());
    for (label, path) in &config.models {
        let model = AnyModel::load(path)?;
        reports.push(evaluate(label, &model, &corpora, &config.eval, ctx.as_ref())?);
    }
    Ok(Comparison { reports })
}
