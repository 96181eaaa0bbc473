//! Synthetic chosen/rejected response-pair generation and the math
//! final-answer checker.

use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ChatRequest, ClientError, Endpoint};
use crate::model::{
    EvalInstance, Instruction, Provenance, ResponsePair, SamplingConfig, Side, Source,
};

#[derive(Debug, Error)]
pub enum PairGenError {
    #[error("instruction {0} is not a math instruction with a gold answer")]
    NotAnswerable(String),
    #[error("instruction {0} is not a general instruction")]
    NotGeneral(String),
    #[error("n_samples must be positive")]
    ZeroSamples,
    #[error("noised instruction is identical to the original for {0}")]
    DegeneratePair(String),
    #[error("endpoint error: {0}")]
    Client(#[from] ClientError),
    #[error("ingest line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A sampled candidate solution with its extracted final answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MathSample {
    pub response: String,
    pub extracted_answer: Option<String>,
    pub matches_gold: bool,
}

impl MathSample {
    pub fn check(response: String, gold: &str) -> Self {
        let extracted_answer = extract_final_answer(&response);
        let matches_gold = extracted_answer
            .as_deref()
            .map(|ans| answers_equal(ans, gold))
            .unwrap_or(false);
        MathSample {
            response,
            extracted_answer,
            matches_gold,
        }
    }
}

/// Does the response's final answer match the gold answer? Unextractable
/// answers are simply false. Normalization covers whitespace, trailing
/// periods, outer dollar signs, and exact rational equality for fractions
/// and decimals; symbolic equivalence is out of scope.
pub fn check_math_answer(response: &str, gold: &str) -> bool {
    match extract_final_answer(response) {
        Some(ans) => answers_equal(&ans, gold),
        None => false,
    }
}

pub fn normalize_answer(s: &str) -> String {
    let mut out = s.trim().to_string();
    // collapse whitespace runs
    out = out.split_whitespace().collect::<Vec<_>>().join(" ");
    if let Some(stripped) = out.strip_suffix('.') {
        out = stripped.trim().to_string();
    }
    // strip outer dollar signs
    while out.len() >= 2 && out.starts_with('$') && out.ends_with('$') {
        out = out[1..out.len() - 1].trim().to_string();
    }
    out = out.trim_start_matches('$').trim_end_matches('$').trim().to_string();
    out
}

fn answers_equal(a: &str, b: &str) -> bool {
    let na = normalize_answer(a);
    let nb = normalize_answer(b);
    if na == nb {
        return true;
    }
    match (parse_rational(&na), parse_rational(&nb)) {
        (Some(ra), Some(rb)) => ra.0 * rb.1 == rb.0 * ra.1,
        _ => false,
    }
}

/// Parses integers, decimals, and simple fractions a/b into an exact
/// (numerator, denominator) pair with a positive denominator.
fn parse_rational(s: &str) -> Option<(i128, i128)> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let (n, nd) = parse_decimal(num.trim())?;
        let (d, dd) = parse_decimal(den.trim())?;
        if d == 0 {
            return None;
        }
        // (n/nd) / (d/dd) = n*dd / d*nd
        let mut num = n.checked_mul(dd)?;
        let mut den = d.checked_mul(nd)?;
        if den < 0 {
            num = -num;
            den = -den;
        }
        return Some((num, den));
    }
    parse_decimal(s)
}

/// "12", "-3.25" -> exact (numerator, denominator).
fn parse_decimal(s: &str) -> Option<(i128, i128)> {
    if s.is_empty() {
        return None;
    }
    let (sign, digits) = match s.strip_prefix('-') {
        Some(rest) => (-1i128, rest),
        None => (1i128, s.strip_prefix('+').unwrap_or(s)),
    };
    if digits.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    let mut num: i128 = 0;
    for c in int_part.chars().chain(frac_part.chars()) {
        num = num.checked_mul(10)?.checked_add((c as u8 - b'0') as i128)?;
    }
    let den = 10i128.checked_pow(frac_part.len() as u32)?;
    Some((sign * num, den))
}

/// The final answer of a response: the last `\boxed{...}` expression if
/// present, otherwise the trailing math token of the last non-empty line.
pub fn extract_final_answer(response: &str) -> Option<String> {
    if let Some(inner) = last_boxed(response) {
        let normalized = normalize_answer(&inner);
        if !normalized.is_empty() {
            return Some(normalized);
        }
    }
    let last_line = response.lines().rev().find(|l| !l.trim().is_empty())?;
    let token = last_line.split_whitespace().last()?;
    let token = normalize_answer(token);
    if token.is_empty() {
        return None;
    }
    if parse_rational(&token).is_some() || token.chars().any(|c| c.is_ascii_digit()) {
        Some(token)
    } else {
        None
    }
}

/// Content of the last `\boxed{...}` with balanced braces.
fn last_boxed(text: &str) -> Option<String> {
    const MARK: &str = "\\boxed{";
    let start = text.rfind(MARK)?;
    let body = &text[start + MARK.len()..];
    let mut depth = 1usize;
    for (idx, c) in body.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(body[..idx].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for p in parts {
        hasher.update([0u8]);
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn assign_sides(
    instruction: Instruction,
    chosen: String,
    rejected: String,
    provenance: Provenance,
    rng: &mut impl Rng,
) -> EvalInstance {
    let chosen_on_a = rng.gen_bool(0.5);
    let (response_a, response_b, gold_preference) = if chosen_on_a {
        (chosen, rejected, Side::A)
    } else {
        (rejected, chosen, Side::B)
    };
    EvalInstance {
        instruction,
        pair: ResponsePair {
            response_a,
            response_b,
            gold_preference,
            provenance,
        },
    }
}

/// Builds a pair for a general instruction by noising the instruction with a
/// user-supplied template, then answering both. The response to the original
/// instruction is the chosen side.
pub fn gen_noisy_pair(
    instruction: &Instruction,
    ep: &Endpoint,
    noising_template: &str,
    cfg: &SamplingConfig,
) -> Result<EvalInstance, PairGenError> {
    if instruction.source != Source::General {
        return Err(PairGenError::NotGeneral(instruction.id.clone()));
    }
    let noising_prompt = noising_template.replace("{instruction}", &instruction.text);
    let request = |content: &str, tag: &str| {
        ChatRequest::user(content, cfg.temperature, cfg.top_p, cfg.max_tokens)
            .with_seed(derive_seed(cfg.seed, &[&instruction.id, "noisy", tag]))
    };
    let noisy_instruction = ep.complete(&request(&noising_prompt, "noise"))?;
    if noisy_instruction.trim() == instruction.text.trim() {
        return Err(PairGenError::DegeneratePair(instruction.id.clone()));
    }
    let chosen = ep.complete(&request(&instruction.text, "chosen"))?;
    let rejected = ep.complete(&request(&noisy_instruction, "rejected"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[&instruction.id, "side"]));
    Ok(assign_sides(
        instruction.clone(),
        chosen,
        rejected,
        Provenance::NoisyInstruction,
        &mut rng,
    ))
}

/// Samples `n_samples` candidate solutions, partitions them by final-answer
/// correctness, and pairs one correct with one incorrect solution. Returns
/// `None` when either partition is empty, so each math instruction yields at
/// most one unique triple.
pub fn gen_math_pair(
    instruction: &Instruction,
    ep: &Endpoint,
    n_samples: usize,
    cfg: &SamplingConfig,
) -> Result<Option<EvalInstance>, PairGenError> {
    if n_samples == 0 {
        return Err(PairGenError::ZeroSamples);
    }
    let gold = match (&instruction.source, &instruction.gold_answer) {
        (Source::Math, Some(gold)) if !gold.is_empty() => gold.clone(),
        _ => return Err(PairGenError::NotAnswerable(instruction.id.clone())),
    };
    let reqs: Vec<_> = (0..n_samples)
        .map(|i| {
            let req = ChatRequest::user(
                &instruction.text,
                cfg.temperature,
                cfg.top_p,
                cfg.max_tokens,
            )
            .with_seed(derive_seed(cfg.seed, &[&instruction.id, "math", &i.to_string()]));
            (format!("s{i}"), req)
        })
        .collect();
    let results = ep.complete_batch(reqs)?;
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (_, result) in results {
        let Ok(text) = result else { continue };
        let sample = MathSample::check(text, &gold);
        if sample.matches_gold {
            correct.push(sample.response);
        } else {
            incorrect.push(sample.response);
        }
    }
    if correct.is_empty() || incorrect.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[&instruction.id, "pick"]));
    let chosen = correct.choose(&mut rng).unwrap().clone();
    let rejected = incorrect.choose(&mut rng).unwrap().clone();
    Ok(Some(assign_sides(
        instruction.clone(),
        chosen,
        rejected,
        Provenance::AnswerChecked,
        &mut rng,
    )))
}

/// One line of the pre-built pair ingestion format.
#[derive(Debug, Serialize, Deserialize)]
pub struct IngestPair {
    pub id: String,
    pub instruction: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(default)]
    pub source: Option<Source>,
}

/// Reads pre-built pairs from JSONL and assigns sides randomly by seed.
pub fn ingest_pairs(reader: impl BufRead, seed: u64) -> Result<Vec<EvalInstance>, PairGenError> {
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: IngestPair = serde_json::from_str(&line).map_err(|e| PairGenError::Ingest {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let instruction = Instruction {
            id: pair.id.clone(),
            text: pair.instruction,
            source: pair.source.unwrap_or(Source::General),
            gold_answer: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&pair.id, "ingest"]));
        instances.push(assign_sides(
            instruction,
            pair.chosen,
            pair.rejected,
            Provenance::Ingested,
            &mut rng,
        ));
    }
    Ok(instances)
}
