//! Synthetic domain corpora over a fixed 64-symbol vocabulary.
//!
//! Four domains stand in for math/code/knowledge/web text: `arith` holds
//! evaluated integer equations, `bracket` holds balanced nested delimiter
//! strings, `facts` holds key→value recall statements from one fixed global
//! map, and `general` mixes the other three uniformly. Token id 0 is
//! reserved for BOS and never appears in text.

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const VOCAB_SIZE: usize = 64;
/// Every generated sequence fits in this many tokens.
pub const MAX_TOKENS: usize = 32;

/// Printable symbols for token ids 1..=48; ids 49..63 are reserved spares.
const CHARS: &str = "0123456789+-*=.()[]{}:abcdefghijklmnopqrstuvwxyz";

pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .map(|c| {
            CHARS
                .find(c)
                .map(|i| (i + 1) as u32)
                .ok_or_else(|| Error::Validation(format!("unencodable character {c:?}")))
        })
        .collect()
}

pub fn decode(tokens: &[u32]) -> Result<String> {
    tokens
        .iter()
        .map(|&t| {
            if t == 0 || t as usize > CHARS.len() {
                Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: CHARS.len() + 1,
                })
            } else {
                Ok(CHARS.as_bytes()[t as usize - 1] as char)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Arith,
    Bracket,
    Facts,
    General,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Arith, Domain::Bracket, Domain::Facts, Domain::General];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Arith => "arith",
            Domain::Bracket => "bracket",
            Domain::Facts => "facts",
            Domain::General => "general",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "arith" => Ok(Domain::Arith),
            "bracket" => Ok(Domain::Bracket),
            "facts" => Ok(Domain::Facts),
            "general" => Ok(Domain::General),
            other => Err(Error::Config(format!("unknown domain {other}"))),
        }
    }

    /// Domains with an exact-match answer span; the rest are scored by
    /// perplexity only.
    pub fn has_exact_match(self) -> bool {
        matches!(self, Domain::Arith | Domain::Facts)
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub struct DomainCorpus {
    pub domain: Domain,
    pub seed: u64,
    pub sequences: Vec<Vec<u32>>,
}

/// The global recall map: 24 distinct two-letter keys, each bound to one
/// distinct two-letter value, fixed across all seeds so training and
/// held-out queries agree.
pub fn facts_map() -> &'static [(String, String)] {
    static MAP: OnceLock<Vec<(String, String)>> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut r = rng::stream(0xFAC75, "facts.map");
        let mut two_letter = |used: &mut Vec<String>| -> String {
            loop {
                let a = (b'a' + r.gen_range(0..26u8)) as char;
                let b = (b'a' + r.gen_range(0..26u8)) as char;
                let s: String = [a, b].iter().collect();
                if !used.contains(&s) {
                    used.push(s.clone());
                    return s;
                }
            }
        };
        let mut keys = Vec::new();
        let mut values = Vec::new();
        (0..24)
            .map(|_| (two_letter(&mut keys), two_letter(&mut values)))
            .collect()
    })
}

fn arith_equation(r: &mut ChaCha8Rng) -> String {
    let mut a: i64 = r.gen_range(0..=9);
    let mut b: i64 = r.gen_range(0..=9);
    let op = ["+", "-", "*"][r.gen_range(0..3)];
    if op == "-" && b > a {
        std::mem::swap(&mut a, &mut b);
    }
    let c = match op {
        "+" => a + b,
        "-" => a - b,
        _ => a * b,
    };
    format!("{a}{op}{b}={c}.")
}

fn fact_statement(r: &mut ChaCha8Rng) -> String {
    let map = facts_map();
    let (k, v) = &map[r.gen_range(0..map.len())];
    format!("{k}:{v}.")
}

/// Balanced nested delimiters: grows a random tree of (), [], {} pairs
/// until the budget runs out, then closes everything.
fn bracket_body(r: &mut ChaCha8Rng, budget: usize, out: &mut String) {
    if budget < 2 {
        return;
    }
    let pairs = [('(', ')'), ('[', ']'), ('{', '}')];
    let (open, close) = pairs[r.gen_range(0..3)];
    out.push(open);
    let inner = r.gen_range(0..=budget.saturating_sub(2));
    bracket_body(r, inner, out);
    out.push(close);
    let rest = budget - 2 - inner.min(budget - 2);
    if rest >= 2 && r.gen_bool(0.7) {
        bracket_body(r, rest, out);
    }
}

fn bracket_sequence(r: &mut ChaCha8Rng, max_tokens: usize) -> String {
    let budget = r.gen_range(6..=max_tokens - 1);
    let mut s = String::new();
    bracket_body(r, budget, &mut s);
    s.push('.');
    s
}

fn statement_sequence(
    r: &mut ChaCha8Rng,
    max_tokens: usize,
    mut stmt: impl FnMut(&mut ChaCha8Rng) -> String,
) -> String {
    let mut s = String::new();
    loop {
        let next = stmt(r);
        if s.len() + next.len() > max_tokens {
            break;
        }
        s.push_str(&next);
        if r.gen_bool(0.25) {
            break;
        }
    }
    if s.is_empty() {
        s = stmt(r);
    }
    s
}

fn domain_sequence(domain: Domain, r: &mut ChaCha8Rng) -> String {
    match domain {
        Domain::Arith => statement_sequence(r, MAX_TOKENS, arith_equation),
        Domain::Facts => statement_sequence(r, MAX_TOKENS, fact_statement),
        Domain::Bracket => bracket_sequence(r, MAX_TOKENS),
        Domain::General => {
            let pick = [Domain::Arith, Domain::Bracket, Domain::Facts][r.gen_range(0..3)];
            domain_sequence(pick, r)
        }
    }
}

/// Deterministic corpus: the same (domain, seed, n) always yields the same
/// sequences, each at most MAX_TOKENS tokens.
pub fn gen_corpus(domain: Domain, seed: u64, n_sequences: usize) -> DomainCorpus {
    let mut r = rng::stream(seed, &format!("corpus.{domain}"));
    let sequences = (0..n_sequences)
        .map(|_| encode(&domain_sequence(domain, &mut r)).expect("generated text is in-vocab"))
        .collect();
    DomainCorpus {
        domain,
        seed,
        sequences,
    }
}

/// One held-out query: the model reads `prompt` and must continue with
/// exactly `answer`. `full` is their concatenation plus the terminator.
#[derive(Debug, Clone)]
pub struct EvalPrompt {
    pub domain: Domain,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub full: Vec<u32>,
}

/// Exact-match prompts for the recall domains: arith splits after `=`,
/// facts after `:`. Other domains are perplexity-only.
pub fn gen_eval_prompts(domain: Domain, seed: u64, n: usize) -> Result<Vec<EvalPrompt>> {
    if !domain.has_exact_match() {
        return Err(Error::Config(format!(
            "domain {domain} has no exact-match answer span"
        )));
    }
    let mut r = rng::stream(seed, &format!("eval.{domain}"));
    let mut prompts = Vec::with_capacity(n);
    for _ in 0..n {
        let text = match domain {
            Domain::Arith => arith_equation(&mut r),
            Domain::Facts => fact_statement(&mut r),
            _ => unreachable!(),
        };
        let sep = if domain == Domain::Arith { '=' } else { ':' };
        let at = text.find(sep).expect("statement contains separator") + 1;
        let answer_text = &text[at..text.len() - 1];
        prompts.push(EvalPrompt {
            domain,
            prompt: encode(&text[..at])?,
            answer: encode(answer_text)?,
            full: encode(&text)?,
        });
    }
    Ok(prompts)
}
