//! Samples the per-instance CoT grid: plans (bootstrap or harvested from a
//! trained judge) and executions in both presentation orders.
//!
//! With defaults the grid holds 5 plans x 2 orders x 4 executions = 40 cells.
//! Failed samples become flagged cells rather than aborting the grid, and a
//! JSONL checkpoint store allows resuming interrupted runs.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ChatRequest, Endpoint};
use crate::codec::{CoTMarkers, TagState};
use crate::model::{ChainOfThought, EvalInstance, Instruction, Order, SamplingConfig, Verdict};
use crate::prompts::TemplateSet;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("all plan slots failed for instance {0}")]
    GridFailure(String),
    #[error("prompt error: {0}")]
    Prompt(#[from] crate::prompts::PromptError),
    #[error("endpoint error: {0}")]
    Client(#[from] crate::client::ClientError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which prompt produces the plans for a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Generic plan-generation prompt against the seed model.
    Bootstrap,
    /// Full judge CoTs from a trained model, keeping only the plan blocks.
    Harvest,
}

/// One plan slot; `text` is `None` when sampling failed or the output had no
/// usable plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSlot {
    pub text: Option<String>,
    pub flag: PlanFlag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanFlag {
    Clean,
    Untagged,
    Unterminated,
    Missing(String),
}

impl From<TagState> for PlanFlag {
    fn from(state: TagState) -> Self {
        match state {
            TagState::Clean => PlanFlag::Clean,
            TagState::Untagged => PlanFlag::Untagged,
            TagState::Unterminated => PlanFlag::Unterminated,
        }
    }
}

/// Grid coordinates of one sampled CoT.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub plan_idx: usize,
    pub order: Order,
    pub exec_idx: usize,
}

/// One sampled execution, kept with its raw completion for re-serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub cot: ChainOfThought,
    pub raw: String,
    /// Endpoint failure for this cell; such cells count as missing.
    pub error: Option<String>,
    pub empty: bool,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        self.error.is_some()
    }
}

/// The full set of sampled CoTs for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTGrid {
    pub instance: EvalInstance,
    pub plans: Vec<PlanSlot>,
    pub cells: BTreeMap<CellKey, Cell>,
}

impl CoTGrid {
    /// Cells that were actually sampled (not flagged missing).
    pub fn present_cells(&self) -> usize {
        self.cells.values().filter(|c| !c.is_missing()).count()
    }

    pub fn plans_present(&self) -> usize {
        self.plans.iter().filter(|p| p.text.is_some()).count()
    }
}

fn derive_seed(base: u64, instance_id: &str, role: &str, idx: usize, extra: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(instance_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(role.as_bytes());
    hasher.update(idx.to_le_bytes());
    hasher.update(extra.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn sampling_request(prompt: &str, cfg: &SamplingConfig, seed: u64) -> ChatRequest {
    ChatRequest::user(prompt, cfg.temperature, cfg.top_p, cfg.max_tokens).with_seed(seed)
}

/// Samples `num_plans` plans from the generic plan-generation prompt. The
/// prompt conditions on the instruction only, never on the responses.
pub fn sample_plans_bootstrap(
    instruction: &Instruction,
    cfg: &SamplingConfig,
    ep: &Endpoint,
    templates: &TemplateSet,
) -> Result<Vec<PlanSlot>, SamplerError> {
    cfg.validate().map_err(SamplerError::InvalidConfig)?;
    let prompt = templates.render_plan_prompt(&instruction.text)?;
    let markers = CoTMarkers::default();
    let reqs: Vec<_> = (0..cfg.num_plans)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &instruction.id, "plan", i, "");
            (format!("p{i}"), sampling_request(&prompt, cfg, seed))
        })
        .collect();
    let results = ep.complete_batch(reqs)?;
    Ok(results
        .into_iter()
        .map(|(_, result)| match result {
            Ok(text) => {
                let (plan, state) = markers.extract_plan_from_plan_prompt_output(&text);
                PlanSlot {
                    text: Some(plan),
                    flag: state.into(),
                }
            }
            Err(e) => PlanSlot {
                text: None,
                flag: PlanFlag::Missing(e.to_string()),
            },
        })
        .collect())
}

/// Samples `num_plans` full judge CoTs from the previous round's model (order
/// AB) and keeps their plan blocks. Malformed CoTs yield missing slots.
pub fn harvest_plans_from_judge_cots(
    instance: &EvalInstance,
    cfg: &SamplingConfig,
    ep: &Endpoint,
    templates: &TemplateSet,
) -> Result<Vec<PlanSlot>, SamplerError> {
    cfg.validate().map_err(SamplerError::InvalidConfig)?;
    let prompt = templates.render_judge_prompt(
        &instance.instruction.text,
        &instance.pair.response_a,
        &instance.pair.response_b,
    )?;
    let markers = CoTMarkers::default();
    let reqs: Vec<_> = (0..cfg.num_plans)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &instance.instruction.id, "harvest", i, "");
            (format!("h{i}"), sampling_request(&prompt, cfg, seed))
        })
        .collect();
    let results = ep.complete_batch(reqs)?;
    Ok(results
        .into_iter()
        .map(|(_, result)| match result {
            Ok(text) => {
                let parsed = markers.parse_cot(&text, Order::Ab);
                if parsed.flags.missing_plan || parsed.cot.plan.is_empty() {
                    PlanSlot {
                        text: None,
                        flag: PlanFlag::Missing("no plan block in sampled CoT".into()),
                    }
                } else {
                    PlanSlot {
                        text: Some(parsed.cot.plan),
                        flag: PlanFlag::Clean,
                    }
                }
            }
            Err(e) => PlanSlot {
                text: None,
                flag: PlanFlag::Missing(e.to_string()),
            },
        })
        .collect())
}

/// Samples `execs_per_order` executions of one plan in the given order.
pub fn sample_executions(
    instance: &EvalInstance,
    plan: &str,
    plan_idx: usize,
    order: Order,
    cfg: &SamplingConfig,
    ep: &Endpoint,
    templates: &TemplateSet,
) -> Result<Vec<Cell>, SamplerError> {
    let (first, second) = match order {
        Order::Ab => (&instance.pair.response_a, &instance.pair.response_b),
        Order::Ba => (&instance.pair.response_b, &instance.pair.response_a),
    };
    let prompt =
        templates.render_execution_prompt(&instance.instruction.text, first, second, plan)?;
    let reqs: Vec<_> = (0..cfg.execs_per_order)
        .map(|i| {
            let seed = derive_seed(
                cfg.seed,
                &instance.instruction.id,
                "exec",
                plan_idx * 1000 + i,
                &order.to_string(),
            );
            (format!("e{i}"), sampling_request(&prompt, cfg, seed))
        })
        .collect();
    let results = ep.complete_batch(reqs)?;
    Ok(results
        .into_iter()
        .map(|(_, result)| cell_from_result(plan, order, result))
        .collect())
}

fn cell_from_result(
    plan: &str,
    order: Order,
    result: Result<String, crate::client::ClientError>,
) -> Cell {
    match result {
        Ok(raw) => {
            let verdict = crate::codec::extract_verdict(&raw);
            let empty = raw.trim().is_empty();
            Cell {
                cot: ChainOfThought {
                    plan: plan.to_string(),
                    execution: raw.clone(),
                    verdict,
                    order,
                },
                raw,
                error: None,
                empty,
            }
        }
        Err(e) => Cell {
            cot: ChainOfThought {
                plan: plan.to_string(),
                execution: String::new(),
                verdict: Verdict::Unparsed,
                order,
            },
            raw: String::new(),
            error: Some(e.to_string()),
            empty: true,
        },
    }
}

/// Samples a full grid for one instance, consulting and feeding the optional
/// checkpoint store so interrupted runs resume where they stopped.
pub fn sample_grid(
    instance: &EvalInstance,
    cfg: &SamplingConfig,
    ep: &Endpoint,
    templates: &TemplateSet,
    plan_mode: PlanMode,
    checkpoint: Option<&mut GridStore>,
) -> Result<CoTGrid, SamplerError> {
    cfg.validate().map_err(SamplerError::InvalidConfig)?;
    let mut store = checkpoint;
    let id = instance.instruction.id.clone();

    let plans: Vec<PlanSlot> = match store.as_ref().and_then(|s| s.plans_for(&id, cfg.num_plans)) {
        Some(existing) => existing,
        None => {
            let plans = match plan_mode {
                PlanMode::Bootstrap => {
                    sample_plans_bootstrap(&instance.instruction, cfg, ep, templates)?
                }
                PlanMode::Harvest => harvest_plans_from_judge_cots(instance, cfg, ep, templates)?,
            };
            if let Some(s) = store.as_mut() {
                for (idx, slot) in plans.iter().enumerate() {
                    s.append_plan(&id, idx, slot)?;
                }
            }
            plans
        }
    };
    if plans.iter().all(|p| p.text.is_none()) {
        return Err(SamplerError::GridFailure(id));
    }

    let mut cells = BTreeMap::new();
    for (plan_idx, slot) in plans.iter().enumerate() {
        let Some(plan) = &slot.text else { continue };
        for order in Order::BOTH {
            let cached: Vec<Option<Cell>> = (0..cfg.execs_per_order)
                .map(|exec_idx| {
                    store.as_ref().and_then(|s| {
                        s.cell(&id, &CellKey {
                            plan_idx,
                            order,
                            exec_idx,
                        })
                        .map(|rec| rec.rebuild(plan, order))
                    })
                })
                .collect();
            if cached.iter().all(|c| c.is_some()) {
                for (exec_idx, cell) in cached.into_iter().enumerate() {
                    cells.insert(
                        CellKey {
                            plan_idx,
                            order,
                            exec_idx,
                        },
                        cell.unwrap(),
                    );
                }
                continue;
            }
            let sampled = sample_executions(instance, plan, plan_idx, order, cfg, ep, templates)?;
            for (exec_idx, cell) in sampled.into_iter().enumerate() {
                let key = CellKey {
                    plan_idx,
                    order,
                    exec_idx,
                };
                if let Some(s) = store.as_mut() {
                    s.append_cell(&id, &key, &cell)?;
                }
                cells.insert(key, cell);
            }
        }
    }

    Ok(CoTGrid {
        instance: instance.clone(),
        plans,
        cells,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum CheckpointLine {
    Plan {
        instance_id: String,
        plan_idx: usize,
        slot: PlanSlot,
    },
    Cell {
        instance_id: String,
        key: CellKey,
        raw: String,
        error: Option<String>,
    },
}

#[derive(Debug, Clone)]
struct CellRecord {
    raw: String,
    error: Option<String>,
}

impl CellRecord {
    fn rebuild(&self, plan: &str, order: Order) -> Cell {
        match &self.error {
            None => cell_from_result(plan, order, Ok(self.raw.clone())),
            Some(e) => cell_from_result(
                plan,
                order,
                Err(crate::client::ClientError::Config(e.clone())),
            ),
        }
    }
}

/// Append-only JSONL checkpoint of sampled plans and cells, keyed by
/// (instance id, plan idx, order, exec idx). Verdicts are re-derived from the
/// stored raw completions on load.
pub struct GridStore {
    path: PathBuf,
    plans: HashMap<(String, usize), PlanSlot>,
    cells: HashMap<(String, CellKey), CellRecord>,
    writer: std::fs::File,
}

impl GridStore {
    /// Opens (or creates) a checkpoint file, loading any existing entries.
    pub fn open(path: &Path) -> Result<Self, SamplerError> {
        let mut plans = HashMap::new();
        let mut cells = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(path)?;
            for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: CheckpointLine = serde_json::from_str(&line).map_err(|e| {
                    SamplerError::Checkpoint(format!("line {}: {e}", idx + 1))
                })?;
                match parsed {
                    CheckpointLine::Plan {
                        instance_id,
                        plan_idx,
                        slot,
                    } => {
                        plans.insert((instance_id, plan_idx), slot);
                    }
                    CheckpointLine::Cell {
                        instance_id,
                        key,
                        raw,
                        error,
                    } => {
                        cells.insert((instance_id, key), CellRecord { raw, error });
                    }
                }
            }
        }
        let writer = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(GridStore {
            path: path.to_path_buf(),
            plans,
            cells,
            writer,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn instance_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .plans
            .keys()
            .map(|(id, _)| id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        ids.sort();
        ids
    }

    fn plans_for(&self, instance_id: &str, num_plans: usize) -> Option<Vec<PlanSlot>> {
        let slots: Vec<_> = (0..num_plans)
            .map(|i| self.plans.get(&(instance_id.to_string(), i)).cloned())
            .collect();
        if slots.iter().all(|s| s.is_some()) {
            Some(slots.into_iter().map(|s| s.unwrap()).collect())
        } else {
            None
        }
    }

    fn cell(&self, instance_id: &str, key: &CellKey) -> Option<&CellRecord> {
        self.cells.get(&(instance_id.to_string(), key.clone()))
    }

    fn append_plan(
        &mut self,
        instance_id: &str,
        plan_idx: usize,
        slot: &PlanSlot,
    ) -> Result<(), SamplerError> {
        let line = serde_json::to_string(&CheckpointLine::Plan {
            instance_id: instance_id.to_string(),
            plan_idx,
            slot: slot.clone(),
        })
        .map_err(|e| SamplerError::Checkpoint(e.to_string()))?;
        writeln!(self.writer, "{line}")?;
        self.writer.flush()?;
        self.plans
            .insert((instance_id.to_string(), plan_idx), slot.clone());
        Ok(())
    }

    fn append_cell(
        &mut self,
        instance_id: &str,
        key: &CellKey,
        cell: &Cell,
    ) -> Result<(), SamplerError> {
        let line = serde_json::to_string(&CheckpointLine::Cell {
            instance_id: instance_id.to_string(),
            key: key.clone(),
            raw: cell.raw.clone(),
            error: cell.error.clone(),
        })
        .map_err(|e| SamplerError::Checkpoint(e.to_string()))?;
        writeln!(self.writer, "{line}")?;
        self.writer.flush()?;
        self.cells.insert(
            (instance_id.to_string(), key.clone()),
            CellRecord {
                raw: cell.raw.clone(),
                error: cell.error.clone(),
            },
        );
        Ok(())
    }

    /// Rebuilds a grid for one instance from the checkpoint alone.
    pub fn grid_for(
        &self,
        instance: &EvalInstance,
        cfg: &SamplingConfig,
    ) -> Option<CoTGrid> {
        let id = &instance.instruction.id;
        let plans = self.plans_for(id, cfg.num_plans)?;
        let mut cells = BTreeMap::new();
        for (plan_idx, slot) in plans.iter().enumerate() {
            let Some(plan) = &slot.text else { continue };
            for order in Order::BOTH {
                for exec_idx in 0..cfg.execs_per_order {
                    let key = CellKey {
                        plan_idx,
                        order,
                        exec_idx,
                    };
                    let rec = self.cell(id, &key)?;
                    cells.insert(key, rec.rebuild(plan, order));
                }
            }
        }
        Some(CoTGrid {
            instance: instance.clone(),
            plans,
            cells,
        })
    }
}
