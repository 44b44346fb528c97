//! Pipeline entry point: train experts, merge them (dense, token-routed,
//! mixed-dimension), route prompts, fine-tune, evaluate, analyze, inspect.
//!
//! Conventions shared by every verb: flags are validated before any file is
//! touched, input files are never mutated, outputs go only to explicitly
//! named paths, every randomized verb takes a `--seed` that is echoed in the
//! run header together with all numeric defaults, and failures exit nonzero
//! with a machine-readable error category on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use moemerge_core::corpus::{self, gen_corpus, Domain, DomainCorpus};
use moemerge_core::eval::{
    compare_baselines, evaluate, Comparison, EvalSpec, HeuristicContext, ScenarioConfig,
};
use moemerge_core::hetero::assemble_hetero_moe;
use moemerge_core::merge::{
    dense_merge, task_vector, task_vector_similarity, MergeMethod, MergeRecipe,
};
use moemerge_core::model::{build_model, ModelConfig};
use moemerge_core::moe::{assemble_moe, grad_route, ppl_route, AttentionMode};
use moemerge_core::moef;
use moemerge_core::train::{
    train, AnyModel, MixtureSampler, MixtureWeights, TrainConfig, Trainable,
};
use moemerge_core::{Error, Result};

fn main() -> ExitCode {
    // Die quietly instead of panicking when stdout closes early, e.g.
    // `moemerge inspect model.moef | head`.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("error [config]: thread pool already initialized");
            return ExitCode::from(exit_code("config"));
        }
    }
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error [{category}]: {e}");
            ExitCode::from(exit_code(category))
        }
    }
}

/// Stable nonzero exit code per error category; clap itself exits 2 on
/// unknown verbs and bad flags.
fn exit_code(category: &str) -> u8 {
    match category {
        "io" => 10,
        "format" => 11,
        "json" => 12,
        "config" => 13,
        "validation" => 14,
        "token" => 15,
        "sequence" => 16,
        "shape" => 17,
        "numeric" => 18,
        "degenerate" => 19,
        "diverged" => 20,
        _ => 1,
    }
}

#[derive(Parser)]
#[command(name = "moemerge", version, about = "Merge dense experts into mixture models")]
struct Cli {
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Initialize a fresh base model checkpoint.
    InitBase(InitBaseArgs),
    /// Continually pretrain a dense checkpoint on one domain.
    CptExpert(CptExpertArgs),
    /// Merge experts into a single dense checkpoint.
    MergeDense(MergeDenseArgs),
    /// Assemble a token-routed mixture from same-architecture experts.
    MergeMoe(MergeMoeArgs),
    /// Assemble a sequence-routed mixture from mixed-dimension experts.
    MergeHetero(MergeHeteroArgs),
    /// Fine-tune any checkpoint kind on a domain mixture.
    Finetune(FinetuneArgs),
    /// Compute fine-tuning-free routing weights for a prompt.
    Route(RouteArgs),
    /// Score a model (or a whole scenario) on held-out corpora.
    Eval(EvalArgs),
    /// Per-layer cosine similarity of two experts' task vectors.
    AnalyzeSimilarity(AnalyzeSimilarityArgs),
    /// Mean routing probability per expert over held-out corpora.
    AnalyzeRouting(AnalyzeRoutingArgs),
    /// Print a checkpoint's config, metadata and tensor schema.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Average,
    Dare,
    Ties,
}

impl From<MethodArg> for MergeMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Average => MergeMethod::Average,
            MethodArg::Dare => MergeMethod::Dare,
            MethodArg::Ties => MergeMethod::Ties,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Merged,
    Separate,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeuristicArg {
    Ppl,
    Grad,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainableArg {
    All,
    Router,
}

fn parse_domain(s: &str) -> std::result::Result<Domain, String> {
    Domain::parse(s).map_err(|e| e.to_string())
}

/// Recipe flags shared by the merge verbs. Defaults: retain 80, lambda 1/3.
#[derive(Args)]
struct RecipeArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Percent of task-vector entries kept when trimming.
    #[arg(long, default_value_t = 80.0)]
    retain: f32,
    /// Scale applied to the merged task vector.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    lambda: f32,
    /// Drives the random drop masks; echoed for reproducibility.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RecipeArgs {
    fn recipe(&self) -> MergeRecipe {
        let mut recipe = MergeRecipe::new(self.method.into());
        recipe.retain_percent = self.retain;
        recipe.lambda = self.lambda;
        recipe.seed = self.seed;
        recipe
    }

    fn header_fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("method", MergeMethod::from(self.method).to_string()),
            ("retain", format!("{}", self.retain)),
            ("lambda", format!("{}", self.lambda)),
            ("seed", format!("{}", self.seed)),
        ]
    }
}

/// Training flags shared by cpt-expert and finetune. Defaults mirror the
/// library's TrainConfig.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f32,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f32,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Training sequences generated per domain.
    #[arg(long, default_value_t = 256)]
    sequences: usize,
    /// Drives corpus generation, batch order and any drop masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self, trainable: Trainable) -> TrainConfig {
        let mut config = TrainConfig::new(self.steps, self.seed);
        config.lr = self.lr;
        config.weight_decay = self.weight_decay;
        config.batch_size = self.batch_size;
        config.trainable = trainable;
        config
    }

    fn header_fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", format!("{}", self.steps)),
            ("lr", format!("{}", self.lr)),
            ("weight-decay", format!("{}", self.weight_decay)),
            ("batch-size", format!("{}", self.batch_size)),
            ("sequences", format!("{}", self.sequences)),
            ("seed", format!("{}", self.seed)),
        ]
    }
}

#[derive(Args)]
struct InitBaseArgs {
    /// JSON model config; omitted = 4 layers, d_model 64, 4 heads,
    /// d_ffn 128, vocab 64, max_seq_len 32.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CptExpertArgs {
    /// Dense checkpoint to continue pretraining from.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_domain)]
    domain: Domain,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeDenseArgs {
    #[arg(long)]
    base: PathBuf,
    /// At least two expert checkpoints.
    #[arg(long, num_args = 2.., required = true)]
    experts: Vec<PathBuf>,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeMoeArgs {
    #[arg(long)]
    base: PathBuf,
    /// At least two expert checkpoints.
    #[arg(long, num_args = 2.., required = true)]
    experts: Vec<PathBuf>,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long, value_enum, default_value_t = AttentionArg::Merged)]
    attention: AttentionArg,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeHeteroArgs {
    /// At least two expert checkpoints; widths and depths may differ.
    #[arg(long, num_args = 2.., required = true)]
    experts: Vec<PathBuf>,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// Drives the projector and router initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Checkpoint of any kind: dense, token-routed or mixed-dimension.
    #[arg(long)]
    model: PathBuf,
    /// Training mixture, sampled uniformly.
    #[arg(long, value_parser = parse_domain, value_delimiter = ',',
          default_value = "arith,bracket,facts")]
    domains: Vec<Domain>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_enum, default_value_t = TrainableArg::All)]
    trainable: TrainableArg,
    #[arg(long)]
    out: PathBuf,
    /// Basename for the training report (.json and .txt are appended).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RouteArgs {
    /// Original dense expert checkpoints, in routing order.
    #[arg(long, num_args = 2.., required = true)]
    experts: Vec<PathBuf>,
    #[arg(long, value_enum)]
    heuristic: HeuristicArg,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// Prompt text over the toy alphabet (digits, operators, brackets,
    /// lowercase letters).
    #[arg(long)]
    prompt: String,
    /// Shared base checkpoint; required by the gradient heuristic.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Basename for the weight report (.json and .txt are appended).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Scenario JSON scoring several labeled checkpoints at once;
    /// excludes the single-model flags.
    #[arg(long, conflicts_with_all = ["model", "domains", "sequences", "prompts", "seed", "base", "experts"])]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    model: Option<PathBuf>,
    #[arg(long, value_parser = parse_domain, value_delimiter = ',',
          default_value = "arith,bracket,facts")]
    domains: Vec<Domain>,
    /// Held-out sequences per domain.
    #[arg(long, default_value_t = 32)]
    sequences: usize,
    /// Exact-match prompts per answer-span domain; 0 skips exact match.
    #[arg(long, default_value_t = 32)]
    prompts: usize,
    /// Drives held-out corpus and prompt generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shared base checkpoint, needed when the model routes heuristically.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Original dense experts, needed when the model routes heuristically.
    #[arg(long, num_args = 1..)]
    experts: Vec<PathBuf>,
    /// Basename for the report (.json and .txt are appended).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeSimilarityArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    expert_a: PathBuf,
    #[arg(long)]
    expert_b: PathBuf,
    /// Basename for the report (.json and .txt are appended).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeRoutingArgs {
    /// Mixture checkpoint (token-routed or mixed-dimension).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_domain, value_delimiter = ',',
          default_value = "arith,bracket,facts")]
    domains: Vec<Domain>,
    #[arg(long, default_value_t = 32)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shared base checkpoint, needed when the model routes heuristically.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Original dense experts, needed when the model routes heuristically.
    #[arg(long, num_args = 1..)]
    experts: Vec<PathBuf>,
    /// Basename for the report (.json and .txt are appended).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::InitBase(a) => init_base(a),
        Verb::CptExpert(a) => cpt_expert(a),
        Verb::MergeDense(a) => merge_dense_cmd(a),
        Verb::MergeMoe(a) => merge_moe_cmd(a),
        Verb::MergeHetero(a) => merge_hetero_cmd(a),
        Verb::Finetune(a) => finetune(a),
        Verb::Route(a) => route(a),
        Verb::Eval(a) => eval_cmd(a),
        Verb::AnalyzeSimilarity(a) => analyze_similarity(a),
        Verb::AnalyzeRouting(a) => analyze_routing(a),
        Verb::Inspect(a) => inspect(a),
    }
}

/// Run header: verb name plus every effective setting, defaults included,
/// so any run can be reproduced from its own output.
fn header(verb: &str, fields: &[(&'static str, String)]) {
    let joined: Vec<String> = fields.iter().map(|(k, v)| format!("{k} {v}")).collect();
    println!("moemerge {verb} | {}", joined.join(" | "));
}

/// Write `basename.json` and `basename.txt`.
fn write_report(basename: &Path, json: &str, table: &str) -> Result<()> {
    let mut json_path = basename.as_os_str().to_owned();
    json_path.push(".json");
    let mut txt_path = basename.as_os_str().to_owned();
    txt_path.push(".txt");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&txt_path, table).map_err(|e| Error::io(&txt_path, e))?;
    println!(
        "report written to {} and {}",
        PathBuf::from(&json_path).display(),
        PathBuf::from(&txt_path).display()
    );
    Ok(())
}

/// Left-aligned columns, two spaces apart.
fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

fn load_dense(path: &Path) -> Result<moemerge_core::model::Checkpoint> {
    match AnyModel::load(path)? {
        AnyModel::Dense(c) => Ok(c),
        other => Err(Error::Validation(format!(
            "{} holds a {} model, expected dense",
            path.display(),
            other.kind()
        ))),
    }
}

fn load_dense_set(paths: &[PathBuf]) -> Result<Vec<moemerge_core::model::Checkpoint>> {
    paths.iter().map(|p| load_dense(p)).collect()
}

/// Uniform mixture over one corpus per domain; corpus i is seeded with
/// seed + 1 + i so the domains draw distinct streams.
fn mixture_corpora(domains: &[Domain], seed: u64, sequences: usize) -> Vec<DomainCorpus> {
    domains
        .iter()
        .enumerate()
        .map(|(i, &d)| gen_corpus(d, seed + 1 + i as u64, sequences))
        .collect()
}

fn run_train(
    model: &mut AnyModel,
    corpora: Vec<DomainCorpus>,
    config: &TrainConfig,
) -> Result<moemerge_core::train::TrainReport> {
    let weights = MixtureWeights::uniform(corpora.len());
    let mut sampler = MixtureSampler::new(corpora, &weights, config.seed)?;
    train(model, &mut sampler, config, None)
}

fn train_summary_table(report: &moemerge_core::train::TrainReport) -> String {
    let mut rows = vec![vec![
        "steps".to_string(),
        "first loss".to_string(),
        "last loss".to_string(),
        "tokens".to_string(),
        "seconds".to_string(),
    ]];
    rows.push(vec![
        format!("{}", report.step_losses.len()),
        report.step_losses.first().map_or("-".into(), |l| format!("{l:.4}")),
        report.step_losses.last().map_or("-".into(), |l| format!("{l:.4}")),
        format!("{}", report.tokens_seen),
        format!("{:.1}", report.wall_clock_secs),
    ]);
    render_table(&rows)
}

fn init_base(a: InitBaseArgs) -> Result<()> {
    let config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<ModelConfig>(&text)?
        }
        None => ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: 64,
            max_seq_len: 32,
        },
    };
    header(
        "init-base",
        &[
            ("layers", format!("{}", config.n_layers)),
            ("d-model", format!("{}", config.d_model)),
            ("heads", format!("{}", config.n_heads)),
            ("d-ffn", format!("{}", config.d_ffn)),
            ("vocab", format!("{}", config.vocab_size)),
            ("max-seq-len", format!("{}", config.max_seq_len)),
            ("seed", format!("{}", a.seed)),
        ],
    );
    let ckpt = build_model(&config, a.seed)?;
    moef::save_checkpoint(&a.out, &ckpt)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cpt_expert(a: CptExpertArgs) -> Result<()> {
    let mut fields = vec![("domain", a.domain.as_str().to_string())];
    fields.extend(a.train.header_fields());
    header("cpt-expert", &fields);

    let ckpt = load_dense(&a.model)?;
    let mut model = AnyModel::Dense(ckpt);
    let corpora = vec![gen_corpus(a.domain, a.train.seed + 1, a.train.sequences)];
    let report = run_train(&mut model, corpora, &a.train.config(Trainable::All))?;
    if let AnyModel::Dense(c) = &mut model {
        c.metadata.insert("cpt_domain".to_string(), a.domain.as_str().to_string());
    }
    model.save(&a.out)?;
    print!("{}", train_summary_table(&report));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn merge_dense_cmd(a: MergeDenseArgs) -> Result<()> {
    header("merge-dense", &a.recipe.header_fields());
    let base = load_dense(&a.base)?;
    let experts = load_dense_set(&a.experts)?;
    let merged = dense_merge(&base, &experts, &a.recipe.recipe())?;
    moef::save_checkpoint(&a.out, &merged)?;
    println!("merged {} experts; wrote {}", experts.len(), a.out.display());
    Ok(())
}

fn merge_moe_cmd(a: MergeMoeArgs) -> Result<()> {
    let mut fields = a.recipe.header_fields();
    fields.push((
        "attention",
        match a.attention {
            AttentionArg::Merged => "merged".to_string(),
            AttentionArg::Separate => "separate".to_string(),
        },
    ));
    fields.push(("top-k", format!("{}", a.top_k)));
    header("merge-moe", &fields);

    let base = load_dense(&a.base)?;
    let experts = load_dense_set(&a.experts)?;
    let mode = match a.attention {
        AttentionArg::Merged => AttentionMode::Merged,
        AttentionArg::Separate => AttentionMode::Separate,
    };
    let moe = assemble_moe(&base, &experts, &a.recipe.recipe(), mode, a.top_k, a.recipe.seed)?;
    AnyModel::Moe(moe).save(&a.out)?;
    println!("assembled {} experts; wrote {}", experts.len(), a.out.display());
    Ok(())
}

fn merge_hetero_cmd(a: MergeHeteroArgs) -> Result<()> {
    header(
        "merge-hetero",
        &[
            ("top-k", format!("{}", a.top_k)),
            ("seed", format!("{}", a.seed)),
        ],
    );
    let experts = load_dense_set(&a.experts)?;
    let model = assemble_hetero_moe(&experts, a.top_k, a.seed)?;
    AnyModel::Hetero(model).save(&a.out)?;
    println!("assembled {} experts; wrote {}", experts.len(), a.out.display());
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let domains: Vec<String> = a.domains.iter().map(|d| d.as_str().to_string()).collect();
    let mut fields = vec![
        ("domains", domains.join(",")),
        (
            "trainable",
            match a.trainable {
                TrainableArg::All => "all".to_string(),
                TrainableArg::Router => "router".to_string(),
            },
        ),
    ];
    fields.extend(a.train.header_fields());
    header("finetune", &fields);

    let trainable = match a.trainable {
        TrainableArg::All => Trainable::All,
        TrainableArg::Router => Trainable::RouterOnly,
    };
    let mut model = AnyModel::load(&a.model)?;
    let corpora = mixture_corpora(&a.domains, a.train.seed, a.train.sequences);
    let report = run_train(&mut model, corpora, &a.train.config(trainable))?;
    model.save(&a.out)?;
    print!("{}", train_summary_table(&report));
    if let Some(basename) = &a.report {
        write_report(basename, &serde_json::to_string_pretty(&report)?, &train_summary_table(&report))?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn route(a: RouteArgs) -> Result<()> {
    header(
        "route",
        &[
            (
                "heuristic",
                match a.heuristic {
                    HeuristicArg::Ppl => "ppl".to_string(),
                    HeuristicArg::Grad => "grad".to_string(),
                },
            ),
            ("top-k", format!("{}", a.top_k)),
            ("prompt", format!("{:?}", a.prompt)),
        ],
    );
    let tokens = corpus::encode(&a.prompt)?;
    let experts = load_dense_set(&a.experts)?;
    let weights = match a.heuristic {
        HeuristicArg::Ppl => ppl_route(&experts, &tokens, a.top_k)?,
        HeuristicArg::Grad => {
            let base_path = a.base.as_ref().ok_or_else(|| {
                Error::Config("the gradient heuristic needs --base".into())
            })?;
            let base = load_dense(base_path)?;
            let taus = experts
                .iter()
                .map(|e| task_vector(&base, e))
                .collect::<Result<Vec<_>>>()?;
            grad_route(&base, &taus, &tokens, a.top_k)?
        }
    };

    let mut rows = vec![vec!["expert".to_string(), "path".to_string(), "weight".to_string()]];
    for (i, (path, w)) in a.experts.iter().zip(&weights).enumerate() {
        rows.push(vec![format!("{i}"), path.display().to_string(), format!("{w:.4}")]);
    }
    let table = render_table(&rows);
    print!("{table}");
    if let Some(basename) = &a.report {
        let json = serde_json::to_string_pretty(&serde_json::json!({
            "prompt": a.prompt,
            "experts": a.experts,
            "weights": weights,
        }))?;
        write_report(basename, &json, &table)?;
    }
    Ok(())
}

/// Build the heuristic routing context from --base/--experts when the loaded
/// model needs one; reject a context-free invocation up front.
fn heuristic_ctx(
    model: &AnyModel,
    base: &Option<PathBuf>,
    experts: &[PathBuf],
) -> Result<Option<HeuristicContext>> {
    let needs = match model {
        AnyModel::Moe(m) => m.routing_mode.needs_heuristic_weights(),
        _ => false,
    };
    if !needs {
        return Ok(None);
    }
    let base_path = base.as_ref().ok_or_else(|| {
        Error::Config("this mixture routes heuristically: pass --base and --experts".into())
    })?;
    if experts.is_empty() {
        return Err(Error::Config(
            "this mixture routes heuristically: pass --base and --experts".into(),
        ));
    }
    Ok(Some(HeuristicContext::new(
        load_dense(base_path)?,
        load_dense_set(experts)?,
    )?))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    if let Some(config_path) = &a.config {
        header("eval", &[("config", config_path.display().to_string())]);
        let scenario = ScenarioConfig::load(config_path)?;
        let comparison = compare_baselines(&scenario)?;
        let table = comparison.table();
        print!("{table}");
        if let Some(basename) = &a.report {
            write_report(basename, &comparison.to_json()?, &table)?;
        }
        return Ok(());
    }

    let model_path = a.model.as_ref().expect("clap requires --model without --config");
    let domain_names: Vec<&str> = a.domains.iter().map(|d| d.as_str()).collect();
    header(
        "eval",
        &[
            ("model", model_path.display().to_string()),
            ("domains", domain_names.join(",")),
            ("sequences", format!("{}", a.sequences)),
            ("prompts", format!("{}", a.prompts)),
            ("seed", format!("{}", a.seed)),
        ],
    );

    let model = AnyModel::load(model_path)?;
    let ctx = heuristic_ctx(&model, &a.base, &a.experts)?;
    let corpora: Vec<DomainCorpus> = a
        .domains
        .iter()
        .map(|&d| gen_corpus(d, a.seed + 1, a.sequences))
        .collect();
    let spec = EvalSpec {
        sequences: a.sequences,
        prompts: a.prompts,
        seed: a.seed,
    };
    let label = model_path
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    let report = evaluate(&label, &model, &corpora, &spec, ctx.as_ref())?;
    let comparison = Comparison { reports: vec![report] };
    let table = comparison.table();
    print!("{table}");
    if let Some(basename) = &a.report {
        write_report(basename, &comparison.to_json()?, &table)?;
    }
    Ok(())
}

fn analyze_similarity(a: AnalyzeSimilarityArgs) -> Result<()> {
    header(
        "analyze-similarity",
        &[
            ("base", a.base.display().to_string()),
            ("expert-a", a.expert_a.display().to_string()),
            ("expert-b", a.expert_b.display().to_string()),
        ],
    );
    let base = load_dense(&a.base)?;
    let tau_a = task_vector(&base, &load_dense(&a.expert_a)?)?;
    let tau_b = task_vector(&base, &load_dense(&a.expert_b)?)?;
    let sims = task_vector_similarity(&tau_a, &tau_b)?;

    let mut rows = vec![vec![
        "layer".to_string(),
        "attn cosine".to_string(),
        "ffn cosine".to_string(),
    ]];
    for s in &sims {
        let mark = |v: f32, degenerate: bool| {
            if degenerate {
                format!("{v:.4} (degenerate)")
            } else {
                format!("{v:.4}")
            }
        };
        rows.push(vec![
            format!("{}", s.layer),
            mark(s.attn, s.attn_degenerate),
            mark(s.ffn, s.ffn_degenerate),
        ]);
    }
    let table = render_table(&rows);
    print!("{table}");
    if let Some(basename) = &a.report {
        write_report(basename, &serde_json::to_string_pretty(&sims)?, &table)?;
    }
    Ok(())
}

fn analyze_routing(a: AnalyzeRoutingArgs) -> Result<()> {
    let domain_names: Vec<&str> = a.domains.iter().map(|d| d.as_str()).collect();
    header(
        "analyze-routing",
        &[
            ("model", a.model.display().to_string()),
            ("domains", domain_names.join(",")),
            ("sequences", format!("{}", a.sequences)),
            ("seed", format!("{}", a.seed)),
        ],
    );
    let model = AnyModel::load(&a.model)?;
    if matches!(model, AnyModel::Dense(_)) {
        return Err(Error::Config(
            "routing analysis needs a mixture model, this checkpoint is dense".into(),
        ));
    }
    let ctx = heuristic_ctx(&model, &a.base, &a.experts)?;
    let corpora: Vec<DomainCorpus> = a
        .domains
        .iter()
        .map(|&d| gen_corpus(d, a.seed + 1, a.sequences))
        .collect();
    let spec = EvalSpec {
        sequences: a.sequences,
        prompts: 0,
        seed: a.seed,
    };
    let label = a
        .model
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    let report = evaluate(&label, &model, &corpora, &spec, ctx.as_ref())?;

    let n_experts = report
        .domains
        .iter()
        .find_map(|d| d.routing.as_ref().map(Vec::len))
        .ok_or_else(|| Error::Validation("the evaluation recorded no routing decisions".into()))?;
    let mut head = vec!["domain".to_string()];
    head.extend((0..n_experts).map(|i| format!("p(expert {i})")));
    let mut rows = vec![head];
    for d in &report.domains {
        let mut row = vec![d.domain.as_str().to_string()];
        match &d.routing {
            Some(probs) => row.extend(probs.iter().map(|p| format!("{p:.4}"))),
            None => row.push("-".to_string()),
        }
        rows.push(row);
    }
    let table = render_table(&rows);
    print!("{table}");
    if let Some(basename) = &a.report {
        write_report(basename, &report.to_json()?, &table)?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let container = moef::load_container(&a.path)?;
    let kind = container
        .metadata
        .get("kind")
        .cloned()
        .unwrap_or_else(|| "dense".to_string());
    println!("moemerge inspect | path {} | kind {kind}", a.path.display());
    if let Some(c) = &container.config {
        println!(
            "config: layers {} d_model {} heads {} d_ffn {} vocab {} max_seq_len {}",
            c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.vocab_size, c.max_seq_len
        );
    }
    for (k, v) in &container.metadata {
        println!("metadata: {k} = {v}");
    }
    let mut rows = vec![vec!["tensor".to_string(), "shape".to_string(), "elements".to_string()]];
    let mut total = 0usize;
    for (name, t) in &container.tensors {
        total += t.numel();
        rows.push(vec![name.clone(), format!("{:?}", t.shape()), format!("{}", t.numel())]);
    }
    print!("{}", render_table(&rows));
    println!("{} tensors, {total} parameters", container.tensors.len());
    Ok(())
}
