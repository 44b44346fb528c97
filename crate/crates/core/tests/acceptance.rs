//! Acceptance suite. Every test prints one `criterion NN PASS/FAIL` line
//! with its measured numbers before asserting, so a full run doubles as a
//! report: `cargo test --test acceptance -- --nocapture --test-threads 1`.
//!
//! Criteria 01-06 are exact property checks. Criteria 07-12 exercise a small
//! trained model family (one base, three domain experts, nine fine-tuned
//! token-routed mixtures, one mixed-dimension mixture). Training is
//! deterministic; finished checkpoints are cached under
//! `target/acceptance-cache`, so only the first run pays for training.
//! Delete that directory to retrain everything from scratch.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use rand::Rng;

use moemerge_core::corpus::{gen_corpus, gen_eval_prompts, Domain, DomainCorpus};
use moemerge_core::error::FormatError;
use moemerge_core::eval::{evaluate, EvalReport, EvalSpec, HeuristicContext};
use moemerge_core::hetero::{
    assemble_hetero_moe, hetero_forward, load_hetero, save_hetero, HeteroMoeModel,
};
use moemerge_core::merge::{
    dense_merge, dare_trim, task_vector, task_vector_similarity, ties_trim_elect_merge,
    MergeMethod, MergeRecipe, TaskVector,
};
use moemerge_core::model::{build_model, forward, perplexity, Checkpoint, ModelConfig};
use moemerge_core::moe::{
    assemble_moe, grad_route, load_moe, moe_forward, ppl_route, save_moe, AttentionMode,
    MoeModel, RoutingMode,
};
use moemerge_core::rng;
use moemerge_core::tensor::{self, Tensor};
use moemerge_core::train::{
    train, AnyModel, MixtureSampler, MixtureWeights, TrainConfig, Trainable,
};
use moemerge_core::moef;

// ---------------------------------------------------------------------------
// pinned tolerances and budgets

/// Monte-Carlo runs and tensor width for the drop/rescale unbiasedness check.
const DROP_SEEDS: u64 = 10_000;
const DROP_ELEMS: usize = 10_000;
const DROP_RETAIN: f32 = 80.0;
/// z-score bound on the Monte-Carlo mean and tolerance on the zero fraction.
const DROP_MEAN_SIGMAS: f64 = 5.0;
const DROP_ZERO_TOL: f64 = 0.01;

const TIES_INSTANCES: usize = 200;

const HETERO_LOGIT_REL_TOL: f32 = 1e-5;
const ROUTER_WEIGHT_TOL: f32 = 1e-4;
const GRAD_FD_EPS: f64 = 1e-3;
const GRAD_FD_REL_TOL: f64 = 1e-2;
const SIMILARITY_BOUND: f32 = 0.5;

/// Trained-fixture budgets. The fine-tune budget is shared by every mixture
/// so the merging methods are compared under identical conditions.
const BASE_STEPS: usize = 600;
const CPT_STEPS: usize = 400;
const FT_STEPS: usize = 300;
const SCRATCH_STEPS: usize = 500;
const HETERO_FT_STEPS: usize = 2000;
const PRETRAIN_LR: f32 = 1e-3;
const FT_LR: f32 = 3e-4;

/// Expert order everywhere: index 0 arith, 1 bracket, 2 facts.
const EXPERT_DOMAINS: [Domain; 3] = [Domain::Arith, Domain::Bracket, Domain::Facts];
const SEEDS: [u64; 3] = [1, 2, 3];

fn verdict(criterion: usize, pass: bool, detail: &str) {
    println!(
        "criterion {criterion:02} {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion:02} failed: {detail}");
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 64,
        n_heads: 4,
        d_ffn: 128,
        vocab_size: 64,
        max_seq_len: 32,
    }
}

fn narrow_config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 48,
        n_heads: 4,
        d_ffn: 96,
        vocab_size: 64,
        max_seq_len: 32,
    }
}

fn probe_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 64,
        max_seq_len: 32,
    }
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn ckpt_bits_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.tensors.len() == b.tensors.len()
        && a.tensors
            .iter()
            .all(|(name, t)| b.tensors.get(name).is_some_and(|o| bits_equal(t, o)))
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// trained fixture family, cached on disk

fn cache_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("..")
            .join("..")
            .join("target")
            .join("acceptance-cache");
        std::fs::create_dir_all(&dir).expect("cache dir is writable");
        dir
    })
}

fn cached_checkpoint(file: &str, build: impl FnOnce() -> Checkpoint) -> Checkpoint {
    let path = cache_dir().join(file);
    if let Ok(c) = moef::load_checkpoint(&path) {
        return c;
    }
    let c = build();
    moef::save_checkpoint(&path, &c).expect("cache write");
    c
}

fn cached_moe(file: &str, build: impl FnOnce() -> MoeModel) -> MoeModel {
    let path = cache_dir().join(file);
    if let Ok(m) = load_moe(&path) {
        return m;
    }
    let m = build();
    save_moe(&path, &m).expect("cache write");
    m
}

fn cached_hetero(file: &str, build: impl FnOnce() -> HeteroMoeModel) -> HeteroMoeModel {
    let path = cache_dir().join(file);
    if let Ok(m) = load_hetero(&path) {
        return m;
    }
    let m = build();
    save_hetero(&path, &m).expect("cache write");
    m
}

fn run_training(
    mut model: AnyModel,
    corpora: Vec<DomainCorpus>,
    steps: usize,
    lr: f32,
    seed: u64,
) -> AnyModel {
    let weights = MixtureWeights::uniform(corpora.len());
    let mut sampler = MixtureSampler::new(corpora, &weights, seed).expect("sampler");
    let mut config = TrainConfig::new(steps, seed);
    config.lr = lr;
    train(&mut model, &mut sampler, &config, None).expect("training converges");
    model
}

fn train_dense(start: Checkpoint, corpora: Vec<DomainCorpus>, steps: usize, seed: u64) -> Checkpoint {
    match run_training(AnyModel::Dense(start), corpora, steps, PRETRAIN_LR, seed) {
        AnyModel::Dense(c) => c,
        _ => unreachable!("dense in, dense out"),
    }
}

/// Base model: pretrained on the mixed general corpus.
fn base_model() -> &'static Checkpoint {
    static BASE: OnceLock<Checkpoint> = OnceLock::new();
    BASE.get_or_init(|| {
        cached_checkpoint("base.moef", || {
            let fresh = build_model(&toy_config(), 70).expect("config valid");
            train_dense(fresh, vec![gen_corpus(Domain::General, 8000, 512)], BASE_STEPS, 71)
        })
    })
}

/// Domain experts: the base continually pretrained on one pure domain each,
/// ordered [arith, bracket, facts].
fn experts() -> &'static Vec<Checkpoint> {
    static EXPERTS: OnceLock<Vec<Checkpoint>> = OnceLock::new();
    EXPERTS.get_or_init(|| {
        EXPERT_DOMAINS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                cached_checkpoint(&format!("expert-{}.moef", d.as_str()), || {
                    let corpus = gen_corpus(d, 8001 + i as u64, 256);
                    train_dense(base_model().clone(), vec![corpus], CPT_STEPS, 72 + i as u64)
                })
            })
            .collect()
    })
}

fn ft_corpora() -> Vec<DomainCorpus> {
    EXPERT_DOMAINS
        .iter()
        .enumerate()
        .map(|(i, &d)| gen_corpus(d, 8101 + i as u64, 256))
        .collect()
}

/// A token-routed mixture assembled with `method` and fine-tuned for the
/// shared budget. The seed pack varies the random-drop seed, the router
/// init and the fine-tuning data order together; the experts are fixed.
fn ft_moe(method: MergeMethod, s: u64) -> MoeModel {
    cached_moe(&format!("moe-{method}-ft-s{s}.moef"), || {
        let mut recipe = MergeRecipe::new(method);
        recipe.seed = 200 + s;
        let moe = assemble_moe(
            base_model(),
            experts(),
            &recipe,
            AttentionMode::Merged,
            2,
            100 + s,
        )
        .expect("assembly");
        match run_training(AnyModel::Moe(moe), ft_corpora(), FT_STEPS, FT_LR, 900 + s) {
            AnyModel::Moe(m) => m,
            _ => unreachable!("moe in, moe out"),
        }
    })
}

/// The narrow bracket expert for the mixed-dimension mixture, trained from
/// scratch so its width and depth genuinely differ from the other trunks.
fn narrow_bracket_expert() -> Checkpoint {
    cached_checkpoint("expert-bracket-narrow.moef", || {
        let fresh = build_model(&narrow_config(), 75).expect("config valid");
        train_dense(fresh, vec![gen_corpus(Domain::Bracket, 8012, 256)], SCRATCH_STEPS, 76)
    })
}

/// Mixed-dimension mixture over [arith d64/L4, bracket d48/L3, facts d64/L4],
/// fine-tuned with both selected experts active so the router trains.
fn hetero_ft() -> HeteroMoeModel {
    cached_hetero("hetero-ft.moef", || {
        let members = vec![
            experts()[0].clone(),
            narrow_bracket_expert(),
            experts()[2].clone(),
        ];
        let h = assemble_hetero_moe(&members, 2, 110).expect("assembly");
        match run_training(AnyModel::Hetero(h), ft_corpora(), HETERO_FT_STEPS, PRETRAIN_LR, 910) {
            AnyModel::Hetero(m) => m,
            _ => unreachable!("hetero in, hetero out"),
        }
    })
}

// ---------------------------------------------------------------------------
// shared evaluation plumbing

fn eval_spec() -> EvalSpec {
    EvalSpec {
        sequences: 32,
        prompts: 32,
        seed: 9100,
    }
}

fn eval_corpora() -> Vec<DomainCorpus> {
    EXPERT_DOMAINS
        .iter()
        .enumerate()
        .map(|(i, &d)| gen_corpus(d, 9001 + i as u64, 32))
        .collect()
}

fn cached_report(
    label: &str,
    ctx: Option<&HeuristicContext>,
    model: impl FnOnce() -> AnyModel,
) -> EvalReport {
    static CACHE: OnceLock<Mutex<BTreeMap<String, EvalReport>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(r) = cache.lock().unwrap().get(label) {
        return r.clone();
    }
    let report = evaluate(label, &model(), &eval_corpora(), &eval_spec(), ctx).expect("evaluation");
    cache
        .lock()
        .unwrap()
        .insert(label.to_string(), report.clone());
    report
}

fn domain_ppl(report: &EvalReport, d: Domain) -> f64 {
    f64::from(report.domain(d).expect("domain evaluated").perplexity)
}

fn domain_em(report: &EvalReport, d: Domain) -> f64 {
    f64::from(
        report
            .domain(d)
            .expect("domain evaluated")
            .exact_match
            .expect("recall domain"),
    )
}

/// One number per model for criteria that rank models: recall domains score
/// exact match, the structure domain scores reciprocal perplexity, all three
/// live in [0, 1] and average uniformly.
fn composite_metric(report: &EvalReport) -> f64 {
    (domain_em(report, Domain::Arith)
        + domain_em(report, Domain::Facts)
        + 1.0 / domain_ppl(report, Domain::Bracket))
        / 3.0
}

fn expert_report(i: usize) -> EvalReport {
    let d = EXPERT_DOMAINS[i].as_str();
    cached_report(&format!("expert-{d}"), None, || {
        AnyModel::Dense(experts()[i].clone())
    })
}

// ---------------------------------------------------------------------------
// 01: random drop/rescale is unbiased and hits the target sparsity

#[test]
fn criterion_01_drop_rescale_unbiased_and_sparse() {
    let mut r = rng::stream(6401, "acceptance.drop.tau");
    let values: Vec<f32> = (0..DROP_ELEMS)
        .map(|_| {
            let mag = 0.5 + 1.5 * r.gen::<f32>();
            if r.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let tau = TaskVector {
        deltas: BTreeMap::from([("w".to_string(), Tensor::vector(values.clone()))]),
        expert_id: "synthetic".into(),
        base_id: "origin".into(),
    };

    let q = f64::from(DROP_RETAIN) / 100.0;
    let mut sums = vec![0.0f64; DROP_ELEMS];
    let mut zero_frac_sum = 0.0;
    let mut first_zero_frac = 0.0;
    for seed in 0..DROP_SEEDS {
        let trimmed = dare_trim(&tau, DROP_RETAIN, seed).unwrap();
        let d = trimmed.deltas["w"].data();
        let zeros = d.iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / DROP_ELEMS as f64;
        zero_frac_sum += frac;
        if seed == 0 {
            first_zero_frac = frac;
        }
        for (s, v) in sums.iter_mut().zip(d) {
            *s += f64::from(*v);
        }
    }

    // one draw is tau/q with probability q, so its variance is tau^2 (1-q)/q
    // and the Monte-Carlo mean has sigma = |tau| sqrt((1-q)/(q S))
    let sigma_unit = ((1.0 - q) / (q * DROP_SEEDS as f64)).sqrt();
    let max_z = values
        .iter()
        .zip(&sums)
        .map(|(&t, &s)| {
            let mean = s / DROP_SEEDS as f64;
            ((mean - f64::from(t)) / (f64::from(t).abs() * sigma_unit)).abs()
        })
        .fold(0.0, f64::max);
    let mean_zero = zero_frac_sum / DROP_SEEDS as f64;
    let target = 1.0 - q;

    let pass = max_z <= DROP_MEAN_SIGMAS
        && (mean_zero - target).abs() <= DROP_ZERO_TOL
        && (first_zero_frac - target).abs() <= DROP_ZERO_TOL;
    verdict(
        1,
        pass,
        &format!(
            "MC mean over {DROP_SEEDS} seeds: max |z| {max_z:.2} (bound {DROP_MEAN_SIGMAS}); \
             zero fraction mean {mean_zero:.4}, single trim {first_zero_frac:.4}, target {target:.2} +-{DROP_ZERO_TOL}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 02: trim/elect/sum merging matches a brute-force oracle

/// O(n^2) trim: an entry survives unless its (magnitude, index) rank puts it
/// among the floor((100-p)/100 * n) smallest. Deliberately not a sort.
fn oracle_trim(values: &[f32], retain: f32) -> Vec<f32> {
    let n = values.len();
    let drop = ((100.0 - retain) as f64 / 100.0 * n as f64).floor() as usize;
    (0..n)
        .map(|i| {
            let rank = (0..n)
                .filter(|&j| (values[j].abs(), j) < (values[i].abs(), i))
                .count();
            if rank < drop {
                0.0
            } else {
                values[i]
            }
        })
        .collect()
}

fn oracle_ties(taus: &[Vec<f32>], retain: f32) -> Vec<f32> {
    let n = taus[0].len();
    let trimmed: Vec<Vec<f32>> = taus.iter().map(|t| oracle_trim(t, retain)).collect();
    (0..n)
        .map(|j| {
            let mut pos = 0.0f32;
            let mut neg = 0.0f32;
            for t in &trimmed {
                let v = t[j];
                if v > 0.0 {
                    pos += v;
                } else {
                    neg -= v;
                }
            }
            let elect_positive = pos >= neg;
            let mut sum = 0.0f32;
            for t in &trimmed {
                let v = t[j];
                if (elect_positive && v > 0.0) || (!elect_positive && v < 0.0) {
                    sum += v;
                }
            }
            sum
        })
        .collect()
}

fn tau_of(tensors: Vec<(&str, Vec<f32>)>) -> TaskVector {
    TaskVector {
        deltas: tensors
            .into_iter()
            .map(|(n, v)| (n.to_string(), Tensor::vector(v)))
            .collect(),
        expert_id: "synthetic".into(),
        base_id: "origin".into(),
    }
}

#[test]
fn criterion_02_ties_matches_brute_force_oracle() {
    let palette = [-2.0f32, -1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0, 2.0];
    let retains = [10.0f32, 30.0, 50.0, 80.0, 100.0];
    let mut r = rng::stream(6402, "acceptance.ties");
    let mut mismatches = 0;
    for _ in 0..TIES_INSTANCES {
        let l = r.gen_range(1..=4usize);
        let names: &[&str] = if r.gen_bool(0.5) { &["a"] } else { &["a", "b"] };
        let sizes: Vec<usize> = names.iter().map(|_| r.gen_range(1..=32usize)).collect();
        let retain = retains[r.gen_range(0..retains.len())];
        let mut raw: Vec<Vec<Vec<f32>>> = Vec::new(); // [expert][tensor][elem]
        for _ in 0..l {
            raw.push(
                sizes
                    .iter()
                    .map(|&n| (0..n).map(|_| palette[r.gen_range(0..palette.len())]).collect())
                    .collect(),
            );
        }
        let taus: Vec<TaskVector> = raw
            .iter()
            .map(|tensors| {
                tau_of(names.iter().copied().zip(tensors.iter().cloned()).collect())
            })
            .collect();
        let merged = ties_trim_elect_merge(&taus, retain).unwrap();
        for (ti, name) in names.iter().enumerate() {
            let per_expert: Vec<Vec<f32>> = raw.iter().map(|t| t[ti].clone()).collect();
            let want = oracle_ties(&per_expert, retain);
            let got = merged.deltas[*name].data();
            if got.len() != want.len()
                || got.iter().zip(&want).any(|(g, w)| g.to_bits() != w.to_bits())
            {
                mismatches += 1;
            }
        }
    }

    // hand-checkable four-element case: trim p=50 drops the two smallest
    // magnitudes of each vector, signs elect [+, ., +, .], matching values sum
    let taus = vec![
        tau_of(vec![("w", vec![2.0, -0.1, 0.5, 0.0])]),
        tau_of(vec![("w", vec![-1.0, 0.3, 0.4, 0.2])]),
    ];
    let worked = ties_trim_elect_merge(&taus, 50.0).unwrap();
    let want = [2.0f32, 0.0, 0.9, 0.0];
    let worked_ok = worked.deltas["w"]
        .data()
        .iter()
        .zip(&want)
        .all(|(g, w)| g.to_bits() == w.to_bits());

    verdict(
        2,
        mismatches == 0 && worked_ok,
        &format!(
            "{TIES_INSTANCES} random instances bit-exact vs brute-force oracle ({mismatches} mismatches), \
             magnitude ties included; worked example gives [2.0, 0, 0.9, 0]: {worked_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 03: merge identities

#[test]
fn criterion_03_merge_identities() {
    let config = probe_config();
    let base = build_model(&config, 301).unwrap();
    let e1 = build_model(&config, 302).unwrap();
    let e2 = build_model(&config, 303).unwrap();
    let input = [5u32, 9, 13, 2, 7, 1];

    // scale zero leaves the base untouched for both delta methods
    let mut lambda_zero_ok = true;
    for method in [MergeMethod::Dare, MergeMethod::Ties] {
        let mut recipe = MergeRecipe::new(method);
        recipe.lambda = 0.0;
        let merged = dense_merge(&base, &[e1.clone(), e2.clone()], &recipe).unwrap();
        lambda_zero_ok &= ckpt_bits_equal(&merged, &base);
    }

    // averaging a single expert returns that expert
    let avg = dense_merge(&base, &[e1.clone()], &MergeRecipe::new(MergeMethod::Average)).unwrap();
    let single_ok = ckpt_bits_equal(&avg, &e1);

    // a single-expert token-routed mixture computes the dense expert exactly
    let moe = assemble_moe(
        &base,
        std::slice::from_ref(&e1),
        &MergeRecipe::new(MergeMethod::Average),
        AttentionMode::Merged,
        1,
        304,
    )
    .unwrap();
    let (moe_logits, _) = moe_forward(&moe, &input, None).unwrap();
    let dense_logits = forward(&e1, &input).unwrap();
    let collapse_ok = bits_equal(&moe_logits, &dense_logits);

    // identity projectors reduce the mixed-dimension wrapper to the expert
    let mut hetero = assemble_hetero_moe(std::slice::from_ref(&e1), 1, 305).unwrap();
    for ex in &mut hetero.experts {
        ex.proj_in_w = Tensor::identity(config.d_model);
        ex.proj_in_b = Tensor::zeros(vec![config.d_model]);
        ex.proj_out_w = Tensor::identity(config.d_model);
        ex.proj_out_b = Tensor::zeros(vec![config.d_model]);
    }
    let (h_logits, _) = hetero_forward(&hetero, &input).unwrap();
    let scale = dense_logits
        .data()
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()));
    let max_rel = h_logits
        .data()
        .iter()
        .zip(dense_logits.data())
        .map(|(g, w)| (g - w).abs() / scale)
        .fold(0.0f32, f32::max);
    let hetero_ok = max_rel <= HETERO_LOGIT_REL_TOL;

    verdict(
        3,
        lambda_zero_ok && single_ok && collapse_ok && hetero_ok,
        &format!(
            "lambda=0 keeps base bit-exact: {lambda_zero_ok}; single-expert average is the expert: {single_ok}; \
             1-expert mixture logits bit-exact: {collapse_ok}; identity-projector mixture rel err {max_rel:.2e} <= {HETERO_LOGIT_REL_TOL:.0e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 04: router and gate invariants

#[test]
fn criterion_04_router_invariants() {
    let mut r = rng::stream(6404, "acceptance.topk");
    let mut bad = 0;
    for _ in 0..1000 {
        let l = r.gen_range(2..=8usize);
        let k = r.gen_range(1..=l);
        // two-decimal scores force plenty of exact ties
        let scores: Vec<f32> = (0..l)
            .map(|_| r.gen_range(-300i32..=300) as f32 / 100.0)
            .collect();
        let alpha = tensor::top_k_softmax(&scores, k);

        // full-sort reference: rank by (score desc, index asc), softmax in f64
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let selected = &order[..k];
        let m = selected
            .iter()
            .map(|&i| f64::from(scores[i]))
            .fold(f64::MIN, f64::max);
        let z: f64 = selected
            .iter()
            .map(|&i| (f64::from(scores[i]) - m).exp())
            .sum();
        let mut want = vec![0.0f64; l];
        for &i in selected {
            want[i] = (f64::from(scores[i]) - m).exp() / z;
        }

        let sum: f32 = alpha.iter().sum();
        let ok = (sum - 1.0).abs() <= 1e-6
            && alpha.iter().all(|a| *a >= 0.0)
            && alpha.iter().zip(&want).all(|(a, w)| {
                if *w == 0.0 {
                    *a == 0.0
                } else {
                    (f64::from(*a) - w).abs() <= 1e-6
                }
            });
        if !ok {
            bad += 1;
        }
    }

    // all-equal scores: the K lowest indices split the mass evenly
    let flat = tensor::top_k_softmax(&[0.7f32; 5], 2);
    let tie_ok = flat == vec![0.5, 0.5, 0.0, 0.0, 0.0];

    // reciprocal-perplexity weights match a hand-built softmax
    let members: Vec<Checkpoint> = [401u64, 402, 403]
        .iter()
        .map(|&s| build_model(&probe_config(), s).unwrap())
        .collect();
    let tokens = [3u32, 17, 9, 22, 5];
    let alpha = ppl_route(&members, &tokens, 2).unwrap();
    let recips: Vec<f64> = members
        .iter()
        .map(|c| 1.0 / f64::from(perplexity(c, &tokens).unwrap()))
        .collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| recips[b].partial_cmp(&recips[a]).unwrap().then(a.cmp(&b)));
    let m = recips[order[0]].max(recips[order[1]]);
    let z = (recips[order[0]] - m).exp() + (recips[order[1]] - m).exp();
    let mut want = vec![0.0f64; 3];
    want[order[0]] = (recips[order[0]] - m).exp() / z;
    want[order[1]] = (recips[order[1]] - m).exp() / z;
    let ppl_ok = alpha
        .iter()
        .zip(&want)
        .all(|(a, w)| (f64::from(*a) - w).abs() <= f64::from(ROUTER_WEIGHT_TOL));

    verdict(
        4,
        bad == 0 && tie_ok && ppl_ok,
        &format!(
            "1000 random vectors: top-K selection and softmax-over-selected match full sort ({bad} bad), \
             weights on the simplex; equal scores keep the lowest indices; \
             reciprocal-perplexity weights match hand softmax within {ROUTER_WEIGHT_TOL:.0e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 05: gradient routing correctness

#[test]
fn criterion_05_gradient_routing() {
    // the backward pass that produces the routing gradient, against central
    // finite differences of an independent f64 reference at the pinned step
    let config = probe_config();
    let ckpt = build_model(&config, 501).unwrap();
    let tokens = vec![5u32, 9, 13, 2, 7, 1];
    let mut params = common::params_from_checkpoint(&ckpt);
    let (_, grads) = AnyModel::Dense(ckpt)
        .loss_grads(&tokens, Trainable::All)
        .unwrap();
    let fd = common::central_fd(&mut params, GRAD_FD_EPS, |p| {
        common::ref_dense_loss(p, &config, &tokens)
    });
    let rel = common::aggregate_rel_err(&grads, &fd);
    let fd_ok = rel < GRAD_FD_REL_TOL;

    // a task vector planted parallel to the loss gradient must out-weigh
    // random (near-orthogonal) competitors in every randomized trial
    let mut wins = 0;
    for t in 0..100u64 {
        let b = build_model(&config, 5100 + t).unwrap();
        let mut r = rng::stream(5200 + t, "acceptance.grad.tokens");
        let trial_tokens: Vec<u32> = (0..8).map(|_| r.gen_range(1..64u32)).collect();
        let (_, g) = AnyModel::Dense(b.clone())
            .loss_grads(&trial_tokens, Trainable::All)
            .unwrap();
        let planted = TaskVector {
            deltas: g.iter().map(|(n, t)| (n.clone(), tensor::scale(t, 0.25))).collect(),
            expert_id: "planted".into(),
            base_id: "trial".into(),
        };
        let c1 = task_vector(&b, &build_model(&config, 5300 + t).unwrap()).unwrap();
        let c2 = task_vector(&b, &build_model(&config, 5400 + t).unwrap()).unwrap();
        let alpha = grad_route(&b, &[planted, c1, c2], &trial_tokens, 2).unwrap();
        if alpha[0] > alpha[1] && alpha[0] > alpha[2] {
            wins += 1;
        }
    }

    verdict(
        5,
        fd_ok && wins == 100,
        &format!(
            "backward vs finite differences (eps {GRAD_FD_EPS:.0e}) aggregate rel err {rel:.2e} < {GRAD_FD_REL_TOL:.0e}; \
             planted-parallel task vector out-weighs random competitors in {wins}/100 trials"
        ),
    );
}

// ---------------------------------------------------------------------------
// 06: checkpoint format

#[test]
fn criterion_06_checkpoint_format() {
    let ckpt = build_model(&probe_config(), 601).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.moef");
    moef::save_checkpoint(&path, &ckpt).unwrap();
    let loaded = moef::load_checkpoint(&path).unwrap();
    let rt_ok =
        ckpt_bits_equal(&loaded, &ckpt) && loaded.config == ckpt.config && loaded.metadata == ckpt.metadata;

    let bytes = std::fs::read(&path).unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let magic_ok = matches!(moef::from_bytes(&magic), Err(FormatError::BadMagic));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&99u32.to_le_bytes());
    let version_ok = matches!(
        moef::from_bytes(&version),
        Err(FormatError::UnsupportedVersion(99))
    );
    let trunc_ok = matches!(
        moef::from_bytes(&bytes[..bytes.len() - 5]),
        Err(FormatError::Truncated(_))
    ) && matches!(moef::from_bytes(&bytes[..10]), Err(FormatError::Truncated(_)));

    // committed golden artifact: still parses, and re-serializing what it
    // describes reproduces the committed bytes exactly
    let golden_path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
        .join("golden.moef");
    let golden = std::fs::read(&golden_path).unwrap();
    let golden_ok = match moef::from_bytes(&golden) {
        Ok(container) => moef::to_bytes(&container).unwrap() == golden,
        Err(_) => false,
    };

    verdict(
        6,
        rt_ok && magic_ok && version_ok && trunc_ok && golden_ok,
        &format!(
            "round-trip bit-exact: {rt_ok}; distinct magic/version/truncation errors: \
             {magic_ok}/{version_ok}/{trunc_ok}; committed golden file stable: {golden_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 07: expert specialization and forgetting

#[test]
fn criterion_07_expert_specialization() {
    let base_rep = cached_report("base", None, || AnyModel::Dense(base_model().clone()));
    let reps: Vec<EvalReport> = (0..3).map(expert_report).collect();

    let mut specialization_ok = true;
    let mut own = [0.0f64; 3];
    for (i, &d) in EXPERT_DOMAINS.iter().enumerate() {
        own[i] = domain_ppl(&reps[i], d);
        specialization_ok &= own[i] < domain_ppl(&base_rep, d);
        for (j, rep) in reps.iter().enumerate() {
            if j != i {
                specialization_ok &= own[i] < domain_ppl(rep, d);
            }
        }
    }
    let arith_on_facts = domain_ppl(&reps[0], Domain::Facts);
    let base_on_facts = domain_ppl(&base_rep, Domain::Facts);
    let forgetting_ok = arith_on_facts > base_on_facts;

    verdict(
        7,
        specialization_ok && forgetting_ok,
        &format!(
            "own-domain ppl strictly best everywhere: {specialization_ok} \
             (arith {:.2}, bracket {:.2}, facts {:.2}); \
             arith expert forgets facts: ppl {arith_on_facts:.2} > base {base_on_facts:.2}",
            own[0], own[1], own[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// 08: trimming methods vs plain averaging after identical fine-tuning

fn ft_report(method: MergeMethod, s: u64) -> EvalReport {
    cached_report(&format!("moe-{method}-ft-s{s}"), None, || {
        AnyModel::Moe(ft_moe(method, s))
    })
}

#[test]
fn criterion_08_merge_method_ordering() {
    let mut rows = Vec::new();
    let mut ties_wins = 0;
    let mut dare_wins = 0;
    for &s in &SEEDS {
        let avg = composite_metric(&ft_report(MergeMethod::Average, s));
        let ties = composite_metric(&ft_report(MergeMethod::Ties, s));
        let dare = composite_metric(&ft_report(MergeMethod::Dare, s));
        if ties >= avg {
            ties_wins += 1;
        }
        if dare >= avg {
            dare_wins += 1;
        }
        rows.push(format!("seed {s}: avg {avg:.4} ties {ties:.4} dare {dare:.4}"));
    }
    verdict(
        8,
        ties_wins >= 2 && dare_wins >= 2,
        &format!(
            "composite metric after {FT_STEPS}-step fine-tune, all seeds reported [{}]; \
             ties >= averaging in {ties_wins}/3 seeds, dare >= averaging in {dare_wins}/3",
            rows.join("; ")
        ),
    );
}

/// Opt-in survey of the method margins over extra seed packs; prints the
/// per-seed composite metrics without asserting anything. Run with
/// `cargo test --test acceptance -- --ignored --nocapture margin_survey`.
#[test]
#[ignore]
fn merge_method_margin_survey() {
    for s in 1..=8u64 {
        let avg = composite_metric(&ft_report(MergeMethod::Average, s));
        let ties = composite_metric(&ft_report(MergeMethod::Ties, s));
        let dare = composite_metric(&ft_report(MergeMethod::Dare, s));
        println!(
            "margin_survey seed {s}: avg {avg:.4} ties {ties:.4} ({:+.4}) dare {dare:.4} ({:+.4})",
            ties - avg,
            dare - avg
        );
    }
}

// ---------------------------------------------------------------------------
// 09: routing concentrates on the matching expert

#[test]
fn criterion_09_routing_concentration() {
    let mut rows = Vec::new();
    let mut wins = 0;
    for &s in &SEEDS {
        let dare = ft_report(MergeMethod::Dare, s);
        let avg = ft_report(MergeMethod::Average, s);
        let routing_of = |rep: &EvalReport| -> f64 {
            f64::from(
                rep.domain(Domain::Arith)
                    .expect("domain evaluated")
                    .routing
                    .as_ref()
                    .expect("learned routing")[0],
            )
        };
        let d = routing_of(&dare);
        let a = routing_of(&avg);
        if d > a {
            wins += 1;
        }
        rows.push(format!("seed {s}: dare {d:.3} vs avg {a:.3}"));
    }
    verdict(
        9,
        wins >= 2,
        &format!(
            "arith-expert routing probability on arith inputs [{}]; dare higher in {wins}/3 seeds",
            rows.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 10: fine-tuning-free heuristics

#[test]
fn criterion_10_finetuning_free_heuristics() {
    let members = experts();

    // reciprocal-perplexity routing puts the largest weight on the matching
    // expert for held-out prompts
    let mut rates = Vec::new();
    let mut rate_ok = true;
    for (idx, d) in [(0usize, Domain::Arith), (2usize, Domain::Facts)] {
        let prompts = gen_eval_prompts(d, eval_spec().seed, 32).unwrap();
        let hits = prompts
            .iter()
            .filter(|p| {
                let alpha = ppl_route(members, &p.prompt, 2).expect("routable prompt");
                argmax(&alpha) == idx
            })
            .count();
        let rate = hits as f64 / prompts.len() as f64;
        rate_ok &= rate >= 0.70;
        rates.push(format!("{} {rate:.2}", d.as_str()));
    }

    // separated attention + perplexity routing vs an untrained random router
    let ctx = HeuristicContext::new(base_model().clone(), members.clone()).unwrap();
    let mut sep = assemble_moe(
        base_model(),
        members,
        &MergeRecipe::new(MergeMethod::Average),
        AttentionMode::Separate,
        2,
        1000,
    )
    .unwrap();
    sep.routing_mode = RoutingMode::Ppl;
    let sep_metric = composite_metric(
        &evaluate("sep-ppl", &AnyModel::Moe(sep), &eval_corpora(), &eval_spec(), Some(&ctx))
            .unwrap(),
    );
    let mut wins = 0;
    let mut rand_rows = Vec::new();
    for &s in &SEEDS {
        let mut m = assemble_moe(
            base_model(),
            members,
            &MergeRecipe::new(MergeMethod::Average),
            AttentionMode::Merged,
            2,
            1100 + s,
        )
        .unwrap();
        m.routing_mode = RoutingMode::Random;
        let metric = composite_metric(
            &evaluate(
                &format!("random-router-s{s}"),
                &AnyModel::Moe(m),
                &eval_corpora(),
                &eval_spec(),
                None,
            )
            .unwrap(),
        );
        if sep_metric >= metric {
            wins += 1;
        }
        rand_rows.push(format!("seed {s}: {metric:.4}"));
    }

    verdict(
        10,
        rate_ok && wins >= 2,
        &format!(
            "largest-weight hit rate [{}] (need >= 0.70 each); separated-attention + ppl metric \
             {sep_metric:.4} >= untrained random router [{}] in {wins}/3 seeds",
            rates.join(", "),
            rand_rows.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 11: mixed-dimension mixture

#[test]
fn criterion_11_mixed_dimension_mixture() {
    let h = hetero_ft();
    let hetero_rep = cached_report("hetero-ft", None, || AnyModel::Hetero(h.clone()));
    let narrow_rep = cached_report("expert-bracket-narrow", None, || {
        AnyModel::Dense(narrow_bracket_expert())
    });

    // own-domain comparison per member: recall domains by exact match,
    // the structure domain by perplexity
    let arith_pair = (
        domain_em(&hetero_rep, Domain::Arith),
        domain_em(&expert_report(0), Domain::Arith),
    );
    let bracket_pair = (
        domain_ppl(&hetero_rep, Domain::Bracket),
        domain_ppl(&narrow_rep, Domain::Bracket),
    );
    let facts_pair = (
        domain_em(&hetero_rep, Domain::Facts),
        domain_em(&expert_report(2), Domain::Facts),
    );
    let mut domain_wins = 0;
    if arith_pair.0 >= arith_pair.1 {
        domain_wins += 1;
    }
    if bracket_pair.0 <= bracket_pair.1 {
        domain_wins += 1;
    }
    if facts_pair.0 >= facts_pair.1 {
        domain_wins += 1;
    }

    // the sequence router must send most structure-domain sequences to the
    // narrow expert (index 1)
    let bracket_corpus = gen_corpus(Domain::Bracket, 9002, 32);
    let sent = bracket_corpus
        .sequences
        .iter()
        .filter(|seq| {
            let (input, _) = moemerge_core::model::teacher_forcing_split(seq);
            let (_, trace) = hetero_forward(&h, &input).expect("forward");
            argmax(&trace.decisions[0].weights) == 1
        })
        .count();
    let sent_rate = sent as f64 / bracket_corpus.sequences.len() as f64;

    verdict(
        11,
        domain_wins >= 2 && sent_rate >= 0.5,
        &format!(
            "own-domain wins {domain_wins}/3 (arith em {:.2} vs {:.2}; bracket ppl {:.2} vs {:.2}; \
             facts em {:.2} vs {:.2}); router sends {sent_rate:.2} of bracket sequences to the bracket expert",
            arith_pair.0, arith_pair.1, bracket_pair.0, bracket_pair.1, facts_pair.0, facts_pair.1
        ),
    );
}

// ---------------------------------------------------------------------------
// 12: attention task vectors of different experts barely align

#[test]
fn criterion_12_task_vector_similarity() {
    let tau_arith = task_vector(base_model(), &experts()[0]).unwrap();
    let tau_facts = task_vector(base_model(), &experts()[2]).unwrap();
    let sims = task_vector_similarity(&tau_arith, &tau_facts).unwrap();
    let per_layer: Vec<String> = sims.iter().map(|s| format!("{:.3}", s.attn)).collect();
    // the bound is a desk-scale stand-in for "low similarity"; it is a
    // property of this toy family, not a universal constant
    let pass = !sims.is_empty()
        && sims
            .iter()
            .all(|s| s.attn < SIMILARITY_BOUND && !s.attn_degenerate);
    verdict(
        12,
        pass,
        &format!(
            "attention task-vector cosine per layer [{}], all below {SIMILARITY_BOUND}",
            per_layer.join(", ")
        ),
    );
}

