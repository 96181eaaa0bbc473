//! Domain types shared across the pipeline.
//!
//! Everything here is an immutable value after construction and can be freely
//! shared between threads.

use serde::{Deserialize, Serialize};

/// Where an instruction came from, which decides how response pairs are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    General,
    Math,
    Other,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::General => write!(f, "general"),
            Source::Math => write!(f, "math"),
            Source::Other => write!(f, "other"),
        }
    }
}

/// One of the two responses in a pair, used both as the gold label and as a
/// benchmark label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

/// An input instruction. Ids are caller-supplied opaque strings; the pipeline
/// never reads meaning into them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    pub source: Source,
    /// Final-answer key for math instructions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

/// How a response pair was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NoisyInstruction,
    AnswerChecked,
    Ingested,
}

/// A pair of candidate responses with a gold preference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePair {
    pub response_a: String,
    pub response_b: String,
    pub gold_preference: Side,
    pub provenance: Provenance,
}

/// An instruction together with its response pair: the unit of data generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub instruction: Instruction,
    pub pair: ResponsePair,
}

/// The final preference token of a sampled judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    /// No "[[A]]"/"[[B]]" marker was found in the generation. Treated as an
    /// incorrect label downstream and as a non-judgment for metrics.
    Unparsed,
}

/// Presentation order of the response pair inside a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// Original order: response_a shown as assistant A.
    Ab,
    /// Swapped order: response_b shown as assistant A.
    Ba,
}

impl Order {
    pub const BOTH: [Order; 2] = [Order::Ab, Order::Ba];
}

impl std::fmt::Display for Order {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Order::Ab => write!(f, "ab"),
            Order::Ba => write!(f, "ba"),
        }
    }
}

/// A structured chain-of-thought: evaluation plan, its execution, and the
/// verdict, plus the presentation order the CoT was sampled under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainOfThought {
    pub plan: String,
    pub execution: String,
    pub verdict: Verdict,
    pub order: Order,
}

/// A CoT labeled for correctness against the gold preference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCot {
    pub cot: ChainOfThought,
    pub correct: bool,
}

impl LabeledCot {
    pub fn label(cot: ChainOfThought, gold: Side) -> Self {
        let correct = verdict_is_correct(cot.verdict, cot.order, gold);
        LabeledCot { cot, correct }
    }
}

/// Maps a verdict through the presentation order back to an original side and
/// compares it to the gold preference. `Unparsed` is never correct.
pub fn verdict_is_correct(verdict: Verdict, order: Order, gold: Side) -> bool {
    verdict_names_side(verdict, order) == Some(gold)
}

/// Which original response a verdict names, given the presentation order.
pub fn verdict_names_side(verdict: Verdict, order: Order) -> Option<Side> {
    match (verdict, order) {
        (Verdict::A, Order::Ab) => Some(Side::A),
        (Verdict::B, Order::Ab) => Some(Side::B),
        (Verdict::A, Order::Ba) => Some(Side::B),
        (Verdict::B, Order::Ba) => Some(Side::A),
        (Verdict::Unparsed, _) => None,
    }
}

/// Identifies where a preference record came from within a grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub instruction_id: String,
    pub plan_idx: usize,
    pub order: Order,
    pub chosen_exec: usize,
    pub rejected_exec: usize,
}

/// A rendered judge prompt with one chosen and one rejected serialized CoT:
/// the unit of DPO export. Chosen and rejected share the identical plan text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: RecordMeta,
}

/// Sampling configuration for CoT generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Number of plans sampled per instruction (|P|).
    pub num_plans: usize,
    /// Executions sampled per plan per presentation order (|E|/2).
    pub execs_per_order: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            num_plans: 5,
            execs_per_order: 4,
            temperature: 0.8,
            top_p: 0.95,
            max_tokens: 2048,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_plans == 0 {
            return Err("num_plans must be positive".into());
        }
        if self.execs_per_order == 0 {
            return Err("execs_per_order must be positive".into());
        }
        if self.temperature < 0.0 {
            return Err("temperature must be >= 0".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err("top_p must be in (0, 1]".into());
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// A labeled pairwise test item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkExample {
    #[serde(default)]
    pub id: String,
    pub instruction: String,
    pub response_a: String,
    pub response_b: String,
    pub label: Side,
    #[serde(default)]
    pub category: String,
}

/// Checks an instance's invariants. Violations are returned as values, never
/// as failures; an empty list means the instance is well-formed.
pub fn validate_instance(inst: &EvalInstance) -> Vec<String> {
    let mut violations = Vec::new();
    if inst.instruction.text.is_empty() {
        violations.push("empty instruction text".to_string());
    }
    if inst.pair.response_a.is_empty() {
        violations.push("empty response_a".to_string());
    }
    if inst.pair.response_b.is_empty() {
        violations.push("empty response_b".to_string());
    }
    if inst.instruction.source == Source::Math
        && inst.pair.provenance == Provenance::AnswerChecked
        && inst.instruction.gold_answer.is_none()
    {
        violations.push("math instruction missing gold_answer for answer-checked pair".to_string());
    }
    violations
}
