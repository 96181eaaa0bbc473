//! Judge accuracy measurement over pairwise benchmarks.
//!
//! Two protocols: `single_order` judges each example once in one presentation
//! order, and `position_consistent` judges both orders and only counts an
//! example correct when both verdicts pick the gold response. Inference runs
//! greedy (temperature 0) so repeated evaluations of the same checkpoint
//! agree.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ChatRequest, Endpoint};
use crate::codec::extract_verdict;
use crate::model::{BenchmarkExample, EvalInstance, Order, Side, Verdict};
use crate::prompts::TemplateSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty benchmark")]
    EmptyBenchmark,
    #[error("validation set overlaps training ids: {0:?}")]
    TrainingOverlap(Vec<String>),
    #[error("not enough held-out examples for source {source_name}: requested {requested}, available {available}")]
    NotEnoughHeldOut {
        source_name: String,
        requested: usize,
        available: usize,
    },
    #[error("no usable checkpoint: every candidate errored on every example")]
    NoUsableCheckpoint,
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SingleOrder,
    PositionConsistent,
}

/// How single-order evaluation picks each example's presentation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    AsGiven,
    SeededShuffle(u64),
}

pub const EVAL_TEMPERATURE: f64 = 0.0;
pub const EVAL_TOP_P: f64 = 1.0;
pub const EVAL_MAX_TOKENS: u32 = 2048;

/// One judged (example, order) call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgedRecord {
    pub example_id: String,
    pub category: String,
    pub order: Order,
    pub verdict: Verdict,
    /// Which original response the verdict picked, after un-mapping the order.
    pub picked: Option<Side>,
    pub correct: bool,
    pub errored: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub errored: usize,
    pub unparsed: usize,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub records: Vec<JudgedRecord>,
    /// Fingerprint of (protocol, endpoint model, templates, decoding) so
    /// reports from different setups are never compared by accident.
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

fn config_fingerprint(protocol: Protocol, ep: &Endpoint, templates: &TemplateSet) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&protocol).unwrap());
    hasher.update(ep.config.model_name.as_bytes());
    hasher.update(serde_json::to_vec(&templates.checksums()).unwrap());
    hasher.update(format!("{EVAL_TEMPERATURE}/{EVAL_TOP_P}/{EVAL_MAX_TOKENS}").as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

fn judge_request(
    templates: &TemplateSet,
    example: &BenchmarkExample,
    order: Order,
) -> Result<ChatRequest, EvalError> {
    let (first, second) = match order {
        Order::Ab => (&example.response_a, &example.response_b),
        Order::Ba => (&example.response_b, &example.response_a),
    };
    let prompt = templates.render_judge_prompt(&example.instruction, first, second)?;
    Ok(ChatRequest::user(
        prompt,
        EVAL_TEMPERATURE,
        EVAL_TOP_P,
        EVAL_MAX_TOKENS,
    ))
}

fn record_from_completion(
    example: &BenchmarkExample,
    order: Order,
    completion: Result<String, crate::client::ClientError>,
) -> JudgedRecord {
    match completion {
        Ok(text) => {
            let verdict = extract_verdict(&text);
            let picked = crate::model::verdict_names_side(verdict, order);
            JudgedRecord {
                example_id: example.id.clone(),
                category: example.category.clone(),
                order,
                verdict,
                picked,
                correct: picked == Some(example.label),
                errored: false,
                error: None,
            }
        }
        Err(e) => JudgedRecord {
            example_id: example.id.clone(),
            category: example.category.clone(),
            order,
            verdict: Verdict::Unparsed,
            picked: None,
            correct: false,
            errored: true,
            error: Some(e.to_string()),
        },
    }
}

/// Judges one example in one order. Transport failures become an errored,
/// incorrect record rather than aborting the run.
pub fn judge_one(
    ep: &Endpoint,
    templates: &TemplateSet,
    example: &BenchmarkExample,
    order: Order,
) -> Result<JudgedRecord, EvalError> {
    let req = judge_request(templates, example, order)?;
    Ok(record_from_completion(example, order, ep.complete(&req)))
}

fn summarize(
    protocol: Protocol,
    per_example: Vec<(String, bool, bool)>,
    records: Vec<JudgedRecord>,
    fingerprint: String,
) -> EvalReport {
    let total = per_example.len();
    let correct = per_example.iter().filter(|(_, c, _)| *c).count();
    let errored = per_example.iter().filter(|(_, _, e)| *e).count();
    let unparsed = records
        .iter()
        .filter(|r| !r.errored && r.verdict == Verdict::Unparsed)
        .count();
    let mut per_category: BTreeMap<String, CategoryStats> = BTreeMap::new();
    for (category, is_correct, _) in &per_example {
        let stats = per_category.entry(category.clone()).or_default();
        stats.total += 1;
        if *is_correct {
            stats.correct += 1;
        }
    }
    for stats in per_category.values_mut() {
        stats.accuracy = stats.correct as f64 / stats.total as f64;
    }
    EvalReport {
        protocol,
        total,
        correct,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        errored,
        unparsed,
        per_category,
        records,
        config_fingerprint: fingerprint,
    }
}

/// Each example judged once; its order comes from the policy.
pub fn eval_single_order(
    ep: &Endpoint,
    templates: &TemplateSet,
    examples: &[BenchmarkExample],
    policy: OrderPolicy,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyBenchmark);
    }
    let orders: Vec<Order> = match policy {
        OrderPolicy::AsGiven => vec![Order::Ab; examples.len()],
        OrderPolicy::SeededShuffle(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            examples
                .iter()
                .map(|_| if rng.gen_bool(0.5) { Order::Ab } else { Order::Ba })
                .collect()
        }
    };
    let reqs: Vec<(String, ChatRequest)> = examples
        .iter()
        .zip(&orders)
        .enumerate()
        .map(|(i, (ex, order))| Ok((format!("{i}"), judge_request(templates, ex, *order)?)))
        .collect::<Result<_, EvalError>>()?;
    let results = ep
        .complete_batch(reqs)
        .map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
    let records: Vec<JudgedRecord> = examples
        .iter()
        .zip(&orders)
        .zip(results)
        .map(|((ex, order), (_, completion))| record_from_completion(ex, *order, completion))
        .collect();
    let per_example = records
        .iter()
        .map(|r| (r.category.clone(), r.correct, r.errored))
        .collect();
    let fp = config_fingerprint(Protocol::SingleOrder, ep, templates);
    Ok(summarize(Protocol::SingleOrder, per_example, records, fp))
}

/// Each example judged in both orders; correct only when both verdicts pick
/// the gold response.
pub fn eval_position_consistent(
    ep: &Endpoint,
    templates: &TemplateSet,
    examples: &[BenchmarkExample],
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyBenchmark);
    }
    let mut reqs = Vec::new();
    for (i, example) in examples.iter().enumerate() {
        for order in Order::BOTH {
            reqs.push((format!("{i}-{order}"), judge_request(templates, example, order)?));
        }
    }
    let results = ep
        .complete_batch(reqs)
        .map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
    let mut records = Vec::new();
    let mut per_example = Vec::new();
    for (i, example) in examples.iter().enumerate() {
        let mut both_correct = true;
        let mut any_errored = false;
        for (j, order) in Order::BOTH.into_iter().enumerate() {
            let (_, completion) = &results[i * 2 + j];
            let record = record_from_completion(
                example,
                order,
                completion.as_ref().map(String::clone).map_err(|e| {
                    crate::client::ClientError::InvalidRequest(e.to_string())
                }),
            );
            both_correct &= record.correct;
            any_errored |= record.errored;
            records.push(record);
        }
        per_example.push((example.category.clone(), both_correct, any_errored));
    }
    let fp = config_fingerprint(Protocol::PositionConsistent, ep, templates);
    Ok(summarize(Protocol::PositionConsistent, per_example, records, fp))
}

/// Picks per-source held-out instances disjoint from training ids, then
/// doubles each one into both presentation orders.
pub fn build_validation_set(
    held_out: &[EvalInstance],
    training_ids: &BTreeSet<String>,
    per_source: usize,
    seed: u64,
) -> Result<Vec<(BenchmarkExample, Order)>, EvalError> {
    let overlap: Vec<String> = held_out
        .iter()
        .filter(|inst| training_ids.contains(&inst.instruction.id))
        .map(|inst| inst.instruction.id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(EvalError::TrainingOverlap(overlap));
    }
    let mut by_source: BTreeMap<String, Vec<&EvalInstance>> = BTreeMap::new();
    for inst in held_out {
        by_source
            .entry(inst.instruction.source.to_string())
            .or_default()
            .push(inst);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (source, mut insts) in by_source {
        insts.sort_by(|a, b| a.instruction.id.cmp(&b.instruction.id));
        if insts.len() < per_source {
            return Err(EvalError::NotEnoughHeldOut {
                source_name: source,
                requested: per_source,
                available: insts.len(),
            });
        }
        insts.shuffle(&mut rng);
        insts.truncate(per_source);
        insts.sort_by(|a, b| a.instruction.id.cmp(&b.instruction.id));
        for inst in insts {
            let example = BenchmarkExample {
                id: inst.instruction.id.clone(),
                instruction: inst.instruction.text.clone(),
                response_a: inst.pair.response_a.clone(),
                response_b: inst.pair.response_b.clone(),
                label: inst.pair.gold_preference,
                category: source.clone(),
            };
            for order in Order::BOTH {
                out.push((example.clone(), order));
            }
        }
    }
    Ok(out)
}

/// Ranks candidate checkpoints by validation accuracy; ties go to the earlier
/// candidate. Candidates whose records all errored are unusable.
pub fn checkpoint_select<'a>(
    candidates: &'a [(String, EvalReport)],
) -> Result<&'a (String, EvalReport), EvalError> {
    let usable: Vec<&(String, EvalReport)> = candidates
        .iter()
        .filter(|(_, report)| report.records.iter().any(|r| !r.errored))
        .collect();
    let mut best: Option<&(String, EvalReport)> = None;
    for candidate in usable {
        match best {
            Some(current) if candidate.1.accuracy <= current.1.accuracy => {}
            _ => best = Some(candidate),
        }
    }
    best.ok_or(EvalError::NoUsableCheckpoint)
}

/// One model output on one constraint-following prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintOutput {
    pub prompt_id: String,
    pub model_id: String,
    /// Number of constraints attached to this variant of the prompt.
    pub level: u32,
    pub satisfied: bool,
    pub instruction: String,
    pub response: String,
}

/// Pairs a satisfying and a non-satisfying output of the same model on the
/// same prompt; the label names the satisfying side and the category is the
/// failing output's constraint level (`L{n}`). Groups without both kinds of
/// output are reported back, not silently dropped.
pub fn build_followbench_pairs(
    outputs: &[ConstraintOutput],
    seed: u64,
) -> (Vec<BenchmarkExample>, Vec<String>) {
    let mut groups: BTreeMap<(String, String), Vec<&ConstraintOutput>> = BTreeMap::new();
    for output in outputs {
        groups
            .entry((output.prompt_id.clone(), output.model_id.clone()))
            .or_default()
            .push(output);
    }
    let mut examples = Vec::new();
    let mut unpairable = Vec::new();
    for ((prompt_id, model_id), group) in groups {
        let satisfying: Vec<&&ConstraintOutput> =
            group.iter().filter(|o| o.satisfied).collect();
        let failing: Vec<&&ConstraintOutput> =
            group.iter().filter(|o| !o.satisfied).collect();
        if satisfying.is_empty() || failing.is_empty() {
            unpairable.push(format!("{prompt_id}/{model_id}"));
            continue;
        }
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(prompt_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(model_id.as_bytes());
        let derived = u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(derived);
        let good = satisfying[rng.gen_range(0..satisfying.len())];
        let bad = failing[rng.gen_range(0..failing.len())];
        let good_is_a = rng.gen_bool(0.5);
        let (response_a, response_b, label) = if good_is_a {
            (good.response.clone(), bad.response.clone(), Side::A)
        } else {
            (bad.response.clone(), good.response.clone(), Side::B)
        };
        examples.push(BenchmarkExample {
            id: format!("{prompt_id}/{model_id}"),
            instruction: good.instruction.clone(),
            response_a,
            response_b,
            label,
            category: format!("L{}", bad.level),
        });
    }
    (examples, unpairable)
}

/// Writes per-record JSONL next to a summary JSON (report minus the records).
pub fn write_report(report: &EvalReport, records_path: &Path, summary_path: &Path) -> Result<(), EvalError> {
    let mut out = BufWriter::new(fs::File::create(records_path)?);
    for record in &report.records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let mut summary = serde_json::to_value(report)?;
    summary.as_object_mut().unwrap().remove("records");
    fs::write(summary_path, serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::EndpointConfig;
    use crate::mock::MockBackend;
    use crate::model::{Instruction, Provenance, ResponsePair, Source};

    fn always_verdict(token: &'static str) -> Endpoint {
        MockBackend::new()
            .with_rule(move |_req| Some(format!("Analysis.\n[Final Verdict]\n{token}")))
            .into_endpoint()
    }

    fn balanced_examples(n: usize) -> Vec<BenchmarkExample> {
        (0..n)
            .map(|i| BenchmarkExample {
                id: format!("ex{i}"),
                instruction: format!("question {i}"),
                response_a: "first answer".into(),
                response_b: "second answer".into(),
                label: if i % 2 == 0 { Side::A } else { Side::B },
                category: if i % 2 == 0 { "even".into() } else { "odd".into() },
            })
            .collect()
    }

    #[test]
    fn always_a_judge_scores_half_single_order_zero_consistent() {
        let ep = always_verdict("[[A]]");
        let templates = TemplateSet::builtin();
        let examples = balanced_examples(10);
        let single =
            eval_single_order(&ep, &templates, &examples, OrderPolicy::AsGiven).unwrap();
        assert_eq!(single.accuracy, 0.5);
        let consistent = eval_position_consistent(&ep, &templates, &examples).unwrap();
        assert_eq!(consistent.accuracy, 0.0);
    }

    #[test]
    fn position_consistent_never_exceeds_single_order() {
        let ep = MockBackend::seeded(11).into_endpoint();
        let templates = TemplateSet::builtin();
        let examples = balanced_examples(20);
        let consistent = eval_position_consistent(&ep, &templates, &examples).unwrap();
        for policy in [OrderPolicy::AsGiven, OrderPolicy::SeededShuffle(5)] {
            let single = eval_single_order(&ep, &templates, &examples, policy).unwrap();
            assert!(consistent.accuracy <= single.accuracy + 1e-12);
        }
    }

    #[test]
    fn errors_count_as_incorrect_and_flagged() {
        let ep = Endpoint::from_transport(
            EndpointConfig::new("mock", "m"),
            std::sync::Arc::new(MockBackend::new().failing()),
        );
        let templates = TemplateSet::builtin();
        let examples = balanced_examples(4);
        let report =
            eval_single_order(&ep, &templates, &examples, OrderPolicy::AsGiven).unwrap();
        assert_eq!(report.correct, 0);
        assert_eq!(report.errored, 4);
        assert!(report.records.iter().all(|r| r.errored && !r.correct));
    }

    #[test]
    fn seeded_shuffle_is_deterministic_and_mixes_orders() {
        let ep = always_verdict("[[A]]");
        let templates = TemplateSet::builtin();
        let examples = balanced_examples(40);
        let a = eval_single_order(&ep, &templates, &examples, OrderPolicy::SeededShuffle(9))
            .unwrap();
        let b = eval_single_order(&ep, &templates, &examples, OrderPolicy::SeededShuffle(9))
            .unwrap();
        let orders_a: Vec<Order> = a.records.iter().map(|r| r.order).collect();
        let orders_b: Vec<Order> = b.records.iter().map(|r| r.order).collect();
        assert_eq!(orders_a, orders_b);
        assert!(orders_a.iter().any(|o| *o == Order::Ab));
        assert!(orders_a.iter().any(|o| *o == Order::Ba));
    }

    #[test]
    fn per_category_breakdown_sums_to_total() {
        let ep = always_verdict("[[B]]");
        let templates = TemplateSet::builtin();
        let examples = balanced_examples(10);
        let report =
            eval_single_order(&ep, &templates, &examples, OrderPolicy::AsGiven).unwrap();
        let sum: usize = report.per_category.values().map(|s| s.total).sum();
        assert_eq!(sum, report.total);
        assert_eq!(report.per_category["odd"].accuracy, 1.0);
        assert_eq!(report.per_category["even"].accuracy, 0.0);
    }

    fn held_out_pool(general: usize, math: usize) -> Vec<EvalInstance> {
        let mut out = Vec::new();
        let mut push = |id: String, source: Source| {
            out.push(EvalInstance {
                instruction: Instruction {
                    id,
                    text: "q".into(),
                    source,
                    gold_answer: None,
                },
                pair: ResponsePair {
                    response_a: "a".into(),
                    response_b: "b".into(),
                    gold_preference: Side::A,
                    provenance: Provenance::Ingested,
                },
            });
        };
        for i in 0..general {
            push(format!("vg{i}"), Source::General);
        }
        for i in 0..math {
            push(format!("vm{i}"), Source::Math);
        }
        out
    }

    #[test]
    fn validation_set_doubles_by_order() {
        let pool = held_out_pool(200, 180);
        let set = build_validation_set(&pool, &BTreeSet::new(), 150, 0).unwrap();
        assert_eq!(set.len(), 600);
        let ab = set.iter().filter(|(_, o)| *o == Order::Ab).count();
        assert_eq!(ab, 300);
        let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
        for (example, _) in &set {
            *by_id.entry(example.id.as_str()).or_default() += 1;
        }
        assert!(by_id.values().all(|&n| n == 2));
    }

    #[test]
    fn validation_set_rejects_training_overlap() {
        let pool = held_out_pool(5, 5);
        let training = BTreeSet::from(["vg2".to_string()]);
        let err = build_validation_set(&pool, &training, 2, 0).unwrap_err();
        assert!(matches!(err, EvalError::TrainingOverlap(ids) if ids == vec!["vg2"]));
    }

    #[test]
    fn validation_set_reports_shortage() {
        let pool = held_out_pool(100, 10);
        let err = build_validation_set(&pool, &BTreeSet::new(), 50, 0).unwrap_err();
        assert!(matches!(err, EvalError::NotEnoughHeldOut { requested: 50, available: 10, .. }));
    }

    fn report_with_accuracy(acc: f64, errored: bool) -> EvalReport {
        EvalReport {
            protocol: Protocol::SingleOrder,
            total: 10,
            correct: (acc * 10.0) as usize,
            accuracy: acc,
            errored: if errored { 10 } else { 0 },
            unparsed: 0,
            per_category: BTreeMap::new(),
            records: vec![JudgedRecord {
                example_id: "x".into(),
                category: "c".into(),
                order: Order::Ab,
                verdict: Verdict::A,
                picked: Some(Side::A),
                correct: true,
                errored,
                error: None,
            }],
            config_fingerprint: "f".into(),
        }
    }

    #[test]
    fn checkpoint_select_prefers_accuracy_then_earlier() {
        let candidates = vec![
            ("step100".to_string(), report_with_accuracy(0.7, false)),
            ("step200".to_string(), report_with_accuracy(0.9, false)),
            ("step300".to_string(), report_with_accuracy(0.9, false)),
        ];
        let best = checkpoint_select(&candidates).unwrap();
        assert_eq!(best.0, "step200");
    }

    #[test]
    fn checkpoint_select_skips_all_errored() {
        let candidates = vec![
            ("a".to_string(), report_with_accuracy(0.9, true)),
            ("b".to_string(), report_with_accuracy(0.1, false)),
        ];
        assert_eq!(checkpoint_select(&candidates).unwrap().0, "b");
        let dead = vec![("a".to_string(), report_with_accuracy(0.9, true))];
        assert!(matches!(checkpoint_select(&dead), Err(EvalError::NoUsableCheckpoint)));
    }

    fn constraint(prompt: &str, model: &str, level: u32, ok: bool) -> ConstraintOutput {
        ConstraintOutput {
            prompt_id: prompt.into(),
            model_id: model.into(),
            level,
            satisfied: ok,
            instruction: format!("prompt {prompt}"),
            response: format!("{prompt}/{model}/L{level}/{ok}"),
        }
    }

    #[test]
    fn followbench_pairs_within_model_only() {
        let outputs = vec![
            constraint("p1", "m1", 1, true),
            constraint("p1", "m1", 3, false),
            constraint("p1", "m2", 2, true), // no failing mate
            constraint("p2", "m1", 1, false), // no satisfying mate
        ];
        let (examples, unpairable) = build_followbench_pairs(&outputs, 0);
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].id, "p1/m1");
        assert_eq!(examples[0].category, "L3");
        let labeled = match examples[0].label {
            Side::A => &examples[0].response_a,
            Side::B => &examples[0].response_b,
        };
        assert!(labeled.contains("true"));
        assert_eq!(unpairable, vec!["p1/m2", "p2/m1"]);
    }

    #[test]
    fn followbench_side_assignment_varies_by_seed() {
        let outputs = vec![
            constraint("p1", "m1", 1, true),
            constraint("p1", "m1", 2, false),
        ];
        let mut sides = BTreeSet::new();
        for seed in 0..32 {
            let (examples, _) = build_followbench_pairs(&outputs, seed);
            sides.insert(examples[0].label);
        }
        assert_eq!(sides.len(), 2);
    }

    #[test]
    fn report_written_as_jsonl_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let report = report_with_accuracy(0.7, false);
        let records = dir.path().join("records.jsonl");
        let summary = dir.path().join("summary.json");
        write_report(&report, &records, &summary).unwrap();
        let line: serde_json::Value = serde_json::from_str(
            fs::read_to_string(&records).unwrap().lines().next().unwrap(),
        )
        .unwrap();
        assert_eq!(line["example_id"], "x");
        let summary: serde_json::Value =
            serde_json::from_slice(&fs::read(&summary).unwrap()).unwrap();
        assert_eq!(summary["accuracy"], 0.7);
        assert!(summary.get("records").is_none());
    }
}
