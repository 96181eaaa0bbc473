//! Turns labeled CoT grids into the SFT dataset and the DPO preference
//! dataset.
//!
//! For every (plan, order) group the builder forms all (correct, incorrect)
//! execution cross pairs; chosen and rejected targets share the plan bytes
//! and differ only in execution and verdict. Instructions whose grids contain
//! no correct cell contribute nothing and land in the drop report.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CoTMarkers;
use crate::model::{verdict_is_correct, Order, PreferenceRecord, RecordMeta, Side};
use crate::prompts::TemplateSet;
use crate::sampler::{CellKey, CoTGrid};

/// A grid with per-cell correctness labels.
#[derive(Debug, Clone)]
pub struct LabeledGrid {
    pub grid: CoTGrid,
    pub labels: BTreeMap<CellKey, bool>,
}

impl LabeledGrid {
    pub fn gold(&self) -> Side {
        self.grid.instance.pair.gold_preference
    }

    /// Cells usable for pairing: actually sampled, with their label.
    fn pairable_cells(&self) -> impl Iterator<Item = (&CellKey, bool)> {
        self.grid
            .cells
            .iter()
            .filter(|(_, cell)| !cell.is_missing())
            .map(|(key, _)| (key, self.labels[key]))
    }

    pub fn has_correct_cell(&self) -> bool {
        self.pairable_cells().any(|(_, correct)| correct)
    }
}

/// Pure labeling: a cell is correct iff its verdict, mapped through its
/// presentation order, names the gold response. Unparsed verdicts and
/// missing cells are incorrect.
pub fn label_grid(grid: CoTGrid) -> LabeledGrid {
    let gold = grid.instance.pair.gold_preference;
    let labels = grid
        .cells
        .iter()
        .map(|(key, cell)| {
            let correct =
                !cell.is_missing() && verdict_is_correct(cell.cot.verdict, cell.cot.order, gold);
            (key.clone(), correct)
        })
        .collect();
    LabeledGrid { grid, labels }
}

/// One SFT training row: judge prompt plus a serialized correct CoT target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction_id: String,
    pub prompt: String,
    pub target: String,
    pub order: Order,
}

/// Why an instruction contributed no records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEntry {
    pub instruction_id: String,
    pub reason: String,
}

/// Aggregate counts over a built bundle. Totals reconcile exactly with the
/// record lists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sft_total: usize,
    pub dpo_total: usize,
    pub dpo_per_source: BTreeMap<String, usize>,
    /// records-per-instruction -> number of instructions with that count
    pub dpo_records_per_instruction: BTreeMap<usize, usize>,
    pub dpo_order_balance: BTreeMap<String, usize>,
    pub drop_reasons: BTreeMap<String, usize>,
    pub deduplicated: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetBundle {
    pub sft_records: Vec<SftRecord>,
    pub dpo_records: Vec<PreferenceRecord>,
    pub drops: Vec<DropEntry>,
    pub stats: DatasetStats,
}

fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for p in parts {
        hasher.update([0u8]);
        hasher.update(p.as_bytes());
    }
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}

fn judge_prompt_for_order(
    templates: &TemplateSet,
    lg: &LabeledGrid,
    order: Order,
) -> Result<String, crate::prompts::PromptError> {
    let inst = &lg.grid.instance;
    let (first, second) = match order {
        Order::Ab => (&inst.pair.response_a, &inst.pair.response_b),
        Order::Ba => (&inst.pair.response_b, &inst.pair.response_a),
    };
    templates.render_judge_prompt(&inst.instruction.text, first, second)
}

/// Builds all (correct, incorrect) cross pairs per (plan, order) group.
/// `cap_per_plan_order` subsamples each group uniformly by seed; default
/// uncapped. An instruction with zero correct cells anywhere yields zero
/// records.
pub fn build_dpo_pairs(
    lg: &LabeledGrid,
    templates: &TemplateSet,
    cap_per_plan_order: Option<usize>,
    seed: u64,
) -> Result<Vec<PreferenceRecord>, crate::prompts::PromptError> {
    if !lg.has_correct_cell() {
        return Ok(Vec::new());
    }
    let markers = CoTMarkers::default();
    let id = &lg.grid.instance.instruction.id;
    let mut records = Vec::new();
    let plan_indices: BTreeSet<usize> =
        lg.grid.cells.keys().map(|k| k.plan_idx).collect();
    for plan_idx in plan_indices {
        for order in Order::BOTH {
            let group: Vec<(&CellKey, bool)> = lg
                .pairable_cells()
                .filter(|(k, _)| k.plan_idx == plan_idx && k.order == order)
                .collect();
            let correct: Vec<&CellKey> =
                group.iter().filter(|(_, c)| *c).map(|(k, _)| *k).collect();
            let incorrect: Vec<&CellKey> =
                group.iter().filter(|(_, c)| !*c).map(|(k, _)| *k).collect();
            if correct.is_empty() || incorrect.is_empty() {
                continue;
            }
            let prompt = judge_prompt_for_order(templates, lg, order)?;
            let mut group_records = Vec::new();
            for chosen_key in &correct {
                for rejected_key in &incorrect {
                    let chosen_cell = &lg.grid.cells[*chosen_key];
                    let rejected_cell = &lg.grid.cells[*rejected_key];
                    let plan = &chosen_cell.cot.plan;
                    // chosen verdicts are always A/B; serialize strictly
                    let chosen = markers
                        .serialize_cot(&chosen_cell.cot)
                        .expect("correct cell has a parsed verdict");
                    // rejected reuses the raw completion as the execution
                    // block; a verdict-less generation stays verdict-less
                    let rejected = markers.serialize_cot_lenient(
                        plan,
                        &rejected_cell.raw,
                        rejected_cell.cot.verdict,
                    );
                    group_records.push(PreferenceRecord {
                        prompt: prompt.clone(),
                        chosen,
                        rejected,
                        meta: RecordMeta {
                            instruction_id: id.clone(),
                            plan_idx,
                            order,
                            chosen_exec: chosen_key.exec_idx,
                            rejected_exec: rejected_key.exec_idx,
                        },
                    });
                }
            }
            if let Some(cap) = cap_per_plan_order {
                if group_records.len() > cap {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        seed,
                        &[id, "cap", &plan_idx.to_string(), &order.to_string()],
                    ));
                    group_records.shuffle(&mut rng);
                    group_records.truncate(cap);
                    group_records.sort_by_key(|r| (r.meta.chosen_exec, r.meta.rejected_exec));
                }
            }
            records.extend(group_records);
        }
    }
    Ok(records)
}

/// Per instruction, uniformly selects one correct cell across all plans and
/// both orders; instructions with no correct cell are skipped with a drop
/// reason.
pub fn select_sft(
    grids: &[LabeledGrid],
    templates: &TemplateSet,
    seed: u64,
) -> Result<(Vec<SftRecord>, Vec<DropEntry>), crate::prompts::PromptError> {
    let markers = CoTMarkers::default();
    let mut records = Vec::new();
    let mut drops = Vec::new();
    for lg in grids {
        let id = &lg.grid.instance.instruction.id;
        let correct: Vec<&CellKey> = lg
            .pairable_cells()
            .filter(|(_, c)| *c)
            .map(|(k, _)| k)
            .collect();
        if correct.is_empty() {
            drops.push(DropEntry {
                instruction_id: id.clone(),
                reason: "no correct cell".into(),
            });
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[id, "sft"]));
        let key = *correct.choose(&mut rng).unwrap();
        let cell = &lg.grid.cells[key];
        let prompt = judge_prompt_for_order(templates, lg, key.order)?;
        let target = markers
            .serialize_cot(&cell.cot)
            .expect("correct cell has a parsed verdict");
        records.push(SftRecord {
            instruction_id: id.clone(),
            prompt,
            target,
            order: key.order,
        });
    }
    Ok((records, drops))
}

/// Builds the full bundle: labeling is assumed done, records are assembled in
/// a stable order, duplicates removed, and stats reconciled.
pub fn build_bundle(
    grids: &[LabeledGrid],
    templates: &TemplateSet,
    cap_per_plan_order: Option<usize>,
    seed: u64,
) -> Result<DatasetBundle, crate::prompts::PromptError> {
    let (sft_records, mut drops) = select_sft(grids, templates, seed)?;
    let mut dpo_records = Vec::new();
    for lg in grids {
        let recs = build_dpo_pairs(lg, templates, cap_per_plan_order, seed)?;
        if recs.is_empty() && lg.has_correct_cell() {
            drops.push(DropEntry {
                instruction_id: lg.grid.instance.instruction.id.clone(),
                reason: "no (correct, incorrect) pair in any plan/order group".into(),
            });
        }
        dpo_records.extend(recs);
    }
    // stable merge order
    dpo_records.sort_by(|a, b| {
        (
            &a.meta.instruction_id,
            a.meta.plan_idx,
            a.meta.order,
            a.meta.chosen_exec,
            a.meta.rejected_exec,
        )
            .cmp(&(
                &b.meta.instruction_id,
                b.meta.plan_idx,
                b.meta.order,
                b.meta.chosen_exec,
                b.meta.rejected_exec,
            ))
    });
    // dedup identical prompt+chosen+rejected bytes
    let mut seen = BTreeSet::new();
    let before = dpo_records.len();
    dpo_records.retain(|r| {
        let key = {
            let mut hasher = Sha256::new();
            hasher.update(r.prompt.as_bytes());
            hasher.update([0u8]);
            hasher.update(r.chosen.as_bytes());
            hasher.update([0u8]);
            hasher.update(r.rejected.as_bytes());
            hasher.finalize()
        };
        seen.insert(key)
    });
    let deduplicated = before - dpo_records.len();

    let source_by_id: BTreeMap<&str, String> = grids
        .iter()
        .map(|lg| {
            (
                lg.grid.instance.instruction.id.as_str(),
                lg.grid.instance.instruction.source.to_string(),
            )
        })
        .collect();
    let stats = dataset_stats(&sft_records, &dpo_records, &drops, &source_by_id, deduplicated);
    Ok(DatasetBundle {
        sft_records,
        dpo_records,
        drops,
        stats,
    })
}

/// Computes reconciled aggregate counts for a bundle.
pub fn dataset_stats(
    sft: &[SftRecord],
    dpo: &[PreferenceRecord],
    drops: &[DropEntry],
    source_by_id: &BTreeMap<&str, String>,
    deduplicated: usize,
) -> DatasetStats {
    let mut per_source: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_instruction: BTreeMap<&str, usize> = BTreeMap::new();
    let mut order_balance: BTreeMap<String, usize> = BTreeMap::new();
    for record in dpo {
        let source = source_by_id
            .get(record.meta.instruction_id.as_str())
            .cloned()
            .unwrap_or_else(|| "unknown".into());
        *per_source.entry(source).or_default() += 1;
        *per_instruction
            .entry(record.meta.instruction_id.as_str())
            .or_default() += 1;
        *order_balance.entry(record.meta.order.to_string()).or_default() += 1;
    }
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for count in per_instruction.values() {
        *histogram.entry(*count).or_default() += 1;
    }
    let mut drop_reasons: BTreeMap<String, usize> = BTreeMap::new();
    for drop in drops {
        *drop_reasons.entry(drop.reason.clone()).or_default() += 1;
    }
    DatasetStats {
        sft_total: sft.len(),
        dpo_total: dpo.len(),
        dpo_per_source: per_source,
        dpo_records_per_instruction: histogram,
        dpo_order_balance: order_balance,
        drop_reasons,
        deduplicated,
    }
}

#[cfg(test)]
pub mod test_support {
    //! Grid construction helpers shared with integration tests.

    use super::*;
    use crate::model::{
        ChainOfThought, EvalInstance, Instruction, Provenance, ResponsePair, Source, Verdict,
    };
    use crate::sampler::Cell;

    /// Builds a synthetic grid where every requested cell has the verdict
    /// needed to make it correct or incorrect under the given gold/order.
    pub fn synthetic_grid(
        id: &str,
        gold: Side,
        num_plans: usize,
        execs_per_order: usize,
        correct_fn: impl Fn(usize, Order, usize) -> bool,
    ) -> CoTGrid {
        let instance = EvalInstance {
            instruction: Instruction {
                id: id.into(),
                text: format!("question {id}"),
                source: Source::General,
                gold_answer: None,
            },
            pair: ResponsePair {
                response_a: "response a text".into(),
                response_b: "response b text".into(),
                gold_preference: gold,
                provenance: Provenance::Ingested,
            },
        };
        let plans: Vec<_> = (0..num_plans)
            .map(|i| crate::sampler::PlanSlot {
                text: Some(format!("plan {i} for {id}")),
                flag: crate::sampler::PlanFlag::Clean,
            })
            .collect();
        let mut cells = BTreeMap::new();
        for plan_idx in 0..num_plans {
            for order in Order::BOTH {
                for exec_idx in 0..execs_per_order {
                    let want_correct = correct_fn(plan_idx, order, exec_idx);
                    let verdict = verdict_for(gold, order, want_correct);
                    let token = match verdict {
                        Verdict::A => "[[A]]",
                        Verdict::B => "[[B]]",
                        Verdict::Unparsed => "",
                    };
                    let raw = format!(
                        "execution {plan_idx}/{order}/{exec_idx}\nThe final verdict is: {token}"
                    );
                    cells.insert(
                        CellKey {
                            plan_idx,
                            order,
                            exec_idx,
                        },
                        Cell {
                            cot: ChainOfThought {
                                plan: format!("plan {plan_idx} for {id}"),
                                execution: raw.clone(),
                                verdict,
                                order,
                            },
                            raw,
                            error: None,
                            empty: false,
                        },
                    );
                }
            }
        }
        CoTGrid {
            instance,
            plans,
            cells,
        }
    }

    /// The verdict that is correct (or incorrect) for this gold and order.
    pub fn verdict_for(gold: Side, order: Order, correct: bool) -> Verdict {
        let target = if correct { gold } else { gold.other() };
        match (target, order) {
            (Side::A, Order::Ab) | (Side::B, Order::Ba) => Verdict::A,
            (Side::B, Order::Ab) | (Side::A, Order::Ba) => Verdict::B,
        }
    }

    /// Independent brute-force pair-count oracle: enumerates every ordered
    /// (correct, incorrect) combination per (plan, order) group and sums.
    pub fn brute_force_pair_count(lg: &LabeledGrid) -> usize {
        if !lg.has_correct_cell() {
            return 0;
        }
        let mut total = 0;
        let plan_indices: BTreeSet<usize> =
            lg.grid.cells.keys().map(|k| k.plan_idx).collect();
        for plan_idx in plan_indices {
            for order in Order::BOTH {
                let keys: Vec<&CellKey> = lg
                    .grid
                    .cells
                    .keys()
                    .filter(|k| {
                        k.plan_idx == plan_idx
                            && k.order == order
                            && !lg.grid.cells[*k].is_missing()
                    })
                    .collect();
                for a in &keys {
                    for b in &keys {
                        if lg.labels[*a] && !lg.labels[*b] {
                            total += 1;
                        }
                    }
                }
            }
        }
        total
    }
}
