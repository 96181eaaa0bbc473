//! Multi-round self-training orchestration.
//!
//! Rounds run SFT, then a first DPO round on the same instruction split, then
//! a second DPO round whose plans and executions are harvested from the judge
//! trained in the previous round. Training itself happens out of process: each
//! round exports JSONL datasets plus a flat trainer-config sidecar, and the
//! round manifest records everything needed to resume or audit the run.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::builder::SftRecord;
use crate::model::{Instruction, PreferenceRecord, SamplingConfig, Source};
use crate::prompts::TemplateChecksums;
use crate::sampler::PlanMode;

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("split quota too large for source {source_name}: requested {requested}, available {available}")]
    QuotaOverflow {
        source_name: Source,
        requested: usize,
        available: usize,
    },
    #[error("duplicate instruction id in export: {0}")]
    DuplicateId(String),
    #[error("refusing to export an empty dataset: {0}")]
    EmptyExport(String),
    #[error("round state error: {0}")]
    State(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The three training rounds, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundId {
    Sft,
    Dpo1,
    Dpo2,
}

impl RoundId {
    pub fn next(self) -> Option<RoundId> {
        match self {
            RoundId::Sft => Some(RoundId::Dpo1),
            RoundId::Dpo1 => Some(RoundId::Dpo2),
            RoundId::Dpo2 => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoundId::Sft => "sft",
            RoundId::Dpo1 => "dpo1",
            RoundId::Dpo2 => "dpo2",
        }
    }

    /// Plan sourcing for sampling in this round: the first two rounds
    /// bootstrap plans from the current model, the final round harvests them
    /// from full judge generations.
    pub fn plan_mode(self) -> PlanMode {
        match self {
            RoundId::Sft | RoundId::Dpo1 => PlanMode::Bootstrap,
            RoundId::Dpo2 => PlanMode::Harvest,
        }
    }
}

/// Instruction ids assigned to one round, keyed by source.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSplit {
    pub ids_by_source: BTreeMap<String, Vec<String>>,
}

impl InstructionSplit {
    pub fn all_ids(&self) -> Vec<&str> {
        self.ids_by_source
            .values()
            .flat_map(|ids| ids.iter().map(String::as_str))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ids_by_source.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything needed to reproduce or resume one round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundManifest {
    pub round_id: RoundId,
    /// Endpoint spec string for the model that samples this round's CoTs.
    pub source_endpoint: String,
    pub instruction_split: InstructionSplit,
    pub sampling: SamplingConfig,
    pub plan_mode: PlanMode,
    pub template_checksums: TemplateChecksums,
    pub sft_export: Option<PathBuf>,
    pub dpo_export: Option<PathBuf>,
    pub parent_round: Option<RoundId>,
}

impl RoundManifest {
    /// Writes via a temp file and rename so a crash never leaves a truncated
    /// manifest behind.
    pub fn save(&self, path: &Path) -> Result<(), RoundError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RoundManifest, RoundError> {
        let bytes = fs::read(path)
            .map_err(|e| RoundError::Manifest(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Seeded, disjoint quota split of the instruction pool. Quotas are taken per
/// source in shuffled order; everything left over goes to the final round.
/// `quotas` maps round name -> (source -> count); rounds are consumed in the
/// given order.
pub fn split_instructions(
    pool: &[Instruction],
    quotas: &[(String, BTreeMap<Source, usize>)],
    seed: u64,
) -> Result<BTreeMap<String, InstructionSplit>, RoundError> {
    let mut by_source: BTreeMap<Source, Vec<&Instruction>> = BTreeMap::new();
    for inst in pool {
        by_source.entry(inst.source).or_default().push(inst);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in by_source.values_mut() {
        ids.sort_by(|a, b| a.id.cmp(&b.id));
        ids.shuffle(&mut rng);
    }
    let mut splits = BTreeMap::new();
    for (round_name, per_source) in quotas {
        let mut split = InstructionSplit::default();
        for (source, count) in per_source {
            let available = by_source.get_mut(source);
            let available = match available {
                Some(v) if v.len() >= *count => v,
                other => {
                    return Err(RoundError::QuotaOverflow {
                        source_name: *source,
                        requested: *count,
                        available: other.map(|v| v.len()).unwrap_or(0),
                    })
                }
            };
            let taken: Vec<String> = available.drain(..*count).map(|i| i.id.clone()).collect();
            split
                .ids_by_source
                .entry(source.to_string())
                .or_default()
                .extend(taken);
        }
        splits.insert(round_name.clone(), split);
    }
    // remainder goes to a synthetic "rest" split for later rounds
    let mut rest = InstructionSplit::default();
    for (source, remaining) in by_source {
        if remaining.is_empty() {
            continue;
        }
        rest.ids_by_source
            .entry(source.to_string())
            .or_default()
            .extend(remaining.iter().map(|i| i.id.clone()));
    }
    splits.insert("rest".into(), rest);
    Ok(splits)
}

/// Writes SFT rows as `{id, messages, completion}` JSONL, sorted by id.
pub fn export_sft(records: &[SftRecord], path: &Path) -> Result<usize, RoundError> {
    if records.is_empty() {
        return Err(RoundError::EmptyExport(path.display().to_string()));
    }
    let mut sorted: Vec<&SftRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.instruction_id.cmp(&b.instruction_id));
    for pair in sorted.windows(2) {
        if pair[0].instruction_id == pair[1].instruction_id {
            return Err(RoundError::DuplicateId(pair[0].instruction_id.clone()));
        }
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for record in &sorted {
        let line = json!({
            "id": record.instruction_id,
            "messages": [{"role": "user", "content": record.prompt}],
            "completion": record.target,
        });
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(sorted.len())
}

/// Writes preference records as `{id, prompt, chosen, rejected, meta}` JSONL
/// plus a trainer-config sidecar at `<path>.trainer.cfg`.
pub fn export_dpo(records: &[PreferenceRecord], path: &Path) -> Result<usize, RoundError> {
    if records.is_empty() {
        return Err(RoundError::EmptyExport(path.display().to_string()));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (idx, record) in records.iter().enumerate() {
        let line = json!({
            "id": format!("{}-p{}-{}-c{}r{}",
                record.meta.instruction_id,
                record.meta.plan_idx,
                record.meta.order,
                record.meta.chosen_exec,
                record.meta.rejected_exec),
            "prompt": record.prompt,
            "chosen": record.chosen,
            "rejected": record.rejected,
            "meta": record.meta,
        });
        let _ = idx;
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    write_trainer_config(&sidecar_path(path))?;
    Ok(records.len())
}

pub fn sidecar_path(dataset_path: &Path) -> PathBuf {
    let mut name = dataset_path.file_name().unwrap_or_default().to_os_string();
    name.push(".trainer.cfg");
    dataset_path.with_file_name(name)
}

/// Flat key-value training hyperparameters consumed by the external trainer.
pub fn trainer_config_lines() -> Vec<(&'static str, &'static str)> {
    vec![
        ("common.max_epochs", "2"),
        ("common.checkpoint_every_steps", "100"),
        ("common.adam_beta1", "0.9"),
        ("common.adam_beta2", "0.95"),
        ("common.weight_decay", "0.1"),
        ("common.max_seq_len", "4096"),
        ("common.max_num_tokens", "8192"),
        ("common.dtype", "bfloat16"),
        ("common.parallelism", "fsdp"),
        ("common.tensor_parallel", "8"),
        ("common.seed", "2"),
        ("sft.lr", "1.0e-06"),
        ("sft.warmup_steps", "100"),
        ("sft.grad_accum", "1"),
        ("dpo.lr", "5.5e-08"),
        ("dpo.warmup_steps", "0"),
        ("dpo.grad_accum", "4"),
    ]
}

pub fn write_trainer_config(path: &Path) -> Result<(), RoundError> {
    let mut out = String::new();
    for (key, value) in trainer_config_lines() {
        out.push_str(key);
        out.push('=');
        out.push_str(value);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Moves to the next round. The SFT -> first-DPO transition keeps the same
/// instruction split and keeps bootstrapping plans; the first -> second DPO
/// transition switches to plan harvesting on a fresh split. Requires the
/// current round's export to exist on disk.
pub fn advance_round(
    manifest: &RoundManifest,
    trained_endpoint: &str,
    next_split: Option<InstructionSplit>,
) -> Result<RoundManifest, RoundError> {
    let next = manifest.round_id.next().ok_or_else(|| {
        RoundError::State("dpo2 is the final round; nothing to advance to".into())
    })?;
    let export = match manifest.round_id {
        RoundId::Sft => manifest.sft_export.as_ref(),
        _ => manifest.dpo_export.as_ref(),
    };
    match export {
        Some(path) if path.exists() => {}
        Some(path) => {
            return Err(RoundError::State(format!(
                "round {} export missing on disk: {}",
                manifest.round_id.as_str(),
                path.display()
            )))
        }
        None => {
            return Err(RoundError::State(format!(
                "round {} has not exported its dataset yet",
                manifest.round_id.as_str()
            )))
        }
    }
    let instruction_split = match next {
        RoundId::Dpo1 => manifest.instruction_split.clone(),
        RoundId::Dpo2 => next_split.ok_or_else(|| {
            RoundError::State("second DPO round requires a fresh instruction split".into())
        })?,
        RoundId::Sft => unreachable!(),
    };
    Ok(RoundManifest {
        round_id: next,
        source_endpoint: trained_endpoint.to_string(),
        instruction_split,
        sampling: manifest.sampling.clone(),
        plan_mode: next.plan_mode(),
        template_checksums: manifest.template_checksums.clone(),
        sft_export: None,
        dpo_export: None,
        parent_round: Some(manifest.round_id),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Order, RecordMeta};
    use std::io::BufRead;

    fn fake_pool(general: usize, math: usize) -> Vec<Instruction> {
        let mut pool = Vec::new();
        for i in 0..general {
            pool.push(Instruction {
                id: format!("g{i:05}"),
                text: format!("general question {i}"),
                source: Source::General,
                gold_answer: None,
            });
        }
        for i in 0..math {
            pool.push(Instruction {
                id: format!("m{i:05}"),
                text: format!("math question {i}"),
                source: Source::Math,
                gold_answer: Some(format!("{i}")),
            });
        }
        pool
    }

    fn round1_quota() -> Vec<(String, BTreeMap<Source, usize>)> {
        vec![(
            "round1".into(),
            BTreeMap::from([(Source::General, 2_500), (Source::Math, 2_500)]),
        )]
    }

    #[test]
    fn split_arithmetic_matches_pool_sizes() {
        let pool = fake_pool(17_588, 4_141);
        let splits = split_instructions(&pool, &round1_quota(), 0).unwrap();
        assert_eq!(splits["round1"].len(), 5_000);
        assert_eq!(splits["rest"].len(), 16_729);
        assert_eq!(splits["round1"].ids_by_source["general"].len(), 2_500);
        assert_eq!(splits["round1"].ids_by_source["math"].len(), 2_500);
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let pool = fake_pool(40, 20);
        let quotas = vec![
            ("r1".into(), BTreeMap::from([(Source::General, 10), (Source::Math, 5)])),
            ("r2".into(), BTreeMap::from([(Source::General, 10), (Source::Math, 5)])),
        ];
        let a = split_instructions(&pool, &quotas, 7).unwrap();
        let b = split_instructions(&pool, &quotas, 7).unwrap();
        assert_eq!(a, b);
        let mut seen = std::collections::BTreeSet::new();
        for split in a.values() {
            for id in split.all_ids() {
                assert!(seen.insert(id.to_string()), "id {id} assigned twice");
            }
        }
        assert_eq!(seen.len(), 60);
        let c = split_instructions(&pool, &quotas, 8).unwrap();
        assert_ne!(a["r1"], c["r1"]);
    }

    #[test]
    fn quota_overflow_names_source() {
        let pool = fake_pool(3, 100);
        let quotas = vec![(
            "r1".into(),
            BTreeMap::from([(Source::General, 10)]),
        )];
        let err = split_instructions(&pool, &quotas, 0).unwrap_err();
        match err {
            RoundError::QuotaOverflow { source_name, requested, available } => {
                assert_eq!(source_name, Source::General);
                assert_eq!(requested, 10);
                assert_eq!(available, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn sample_sft(id: &str) -> SftRecord {
        SftRecord {
            instruction_id: id.into(),
            prompt: format!("prompt for {id}"),
            target: format!("target for {id}"),
            order: Order::Ab,
        }
    }

    #[test]
    fn sft_export_sorted_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.jsonl");
        let records = vec![sample_sft("b"), sample_sft("a")];
        assert_eq!(export_sft(&records, &path).unwrap(), 2);
        let lines: Vec<serde_json::Value> = std::io::BufReader::new(fs::File::open(&path).unwrap())
            .lines()
            .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
            .collect();
        assert_eq!(lines[0]["id"], "a");
        assert_eq!(lines[1]["id"], "b");
        assert_eq!(lines[0]["messages"][0]["role"], "user");
        assert_eq!(lines[0]["completion"], "target for a");
    }

    #[test]
    fn sft_export_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.jsonl");
        let err = export_sft(&[sample_sft("x"), sample_sft("x")], &path).unwrap_err();
        assert!(matches!(err, RoundError::DuplicateId(id) if id == "x"));
    }

    #[test]
    fn empty_exports_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_sft(&[], &dir.path().join("s.jsonl")),
            Err(RoundError::EmptyExport(_))
        ));
        assert!(matches!(
            export_dpo(&[], &dir.path().join("d.jsonl")),
            Err(RoundError::EmptyExport(_))
        ));
    }

    fn sample_pref(id: &str) -> PreferenceRecord {
        PreferenceRecord {
            prompt: format!("prompt {id}"),
            chosen: "good".into(),
            rejected: "bad".into(),
            meta: RecordMeta {
                instruction_id: id.into(),
                plan_idx: 0,
                order: Order::Ab,
                chosen_exec: 0,
                rejected_exec: 1,
            },
        }
    }

    #[test]
    fn dpo_export_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dpo.jsonl");
        assert_eq!(export_dpo(&[sample_pref("q")], &path).unwrap(), 1);
        let sidecar = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(sidecar.contains("dpo.lr=5.5e-08"));
        assert!(sidecar.contains("sft.lr=1.0e-06"));
        assert!(sidecar.contains("common.max_epochs=2"));
        assert!(sidecar.contains("common.dtype=bfloat16"));
        assert!(sidecar.contains("dpo.grad_accum=4"));
        assert!(sidecar.contains("sft.warmup_steps=100"));
        let line: serde_json::Value = serde_json::from_str(
            fs::read_to_string(&path).unwrap().lines().next().unwrap(),
        )
        .unwrap();
        assert_eq!(line["id"], "q-p0-ab-c0r1");
        assert_eq!(line["meta"]["instruction_id"], "q");
    }

    fn base_manifest(dir: &Path) -> RoundManifest {
        RoundManifest {
            round_id: RoundId::Sft,
            source_endpoint: "mock:seed=1".into(),
            instruction_split: InstructionSplit {
                ids_by_source: BTreeMap::from([("general".into(), vec!["g1".into()])]),
            },
            sampling: SamplingConfig::default(),
            plan_mode: PlanMode::Bootstrap,
            template_checksums: crate::prompts::TemplateSet::builtin().checksums(),
            sft_export: Some(dir.join("sft.jsonl")),
            dpo_export: None,
            parent_round: None,
        }
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = base_manifest(dir.path());
        let path = dir.path().join("round.json");
        manifest.save(&path).unwrap();
        let loaded = RoundManifest::load(&path).unwrap();
        assert_eq!(loaded.round_id, RoundId::Sft);
        assert_eq!(loaded.instruction_split, manifest.instruction_split);
        assert_eq!(loaded.template_checksums, manifest.template_checksums);
        assert!(!path.with_extension("json.tmp").exists());
    }

    #[test]
    fn advance_requires_export_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = base_manifest(dir.path());
        let err = advance_round(&manifest, "mock:seed=2", None).unwrap_err();
        assert!(matches!(err, RoundError::State(_)));
    }

    #[test]
    fn lineage_sft_to_dpo1_to_dpo2() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = base_manifest(dir.path());
        export_sft(&[sample_sft("g1")], manifest.sft_export.as_ref().unwrap()).unwrap();

        let dpo1 = advance_round(&manifest, "mock:seed=2", None).unwrap();
        assert_eq!(dpo1.round_id, RoundId::Dpo1);
        assert_eq!(dpo1.parent_round, Some(RoundId::Sft));
        assert_eq!(dpo1.plan_mode, PlanMode::Bootstrap);
        // same split is reused between sft and the first dpo round
        assert_eq!(dpo1.instruction_split, manifest.instruction_split);
        assert_eq!(dpo1.source_endpoint, "mock:seed=2");

        let mut dpo1 = dpo1;
        dpo1.dpo_export = Some(dir.path().join("dpo1.jsonl"));
        export_dpo(&[sample_pref("g1")], dpo1.dpo_export.as_ref().unwrap()).unwrap();
        let fresh = InstructionSplit {
            ids_by_source: BTreeMap::from([("general".into(), vec!["g2".into()])]),
        };
        // second dpo round needs its own split
        assert!(advance_round(&dpo1, "mock:seed=3", None).is_err());
        let dpo2 = advance_round(&dpo1, "mock:seed=3", Some(fresh.clone())).unwrap();
        assert_eq!(dpo2.round_id, RoundId::Dpo2);
        assert_eq!(dpo2.parent_round, Some(RoundId::Dpo1));
        assert_eq!(dpo2.plan_mode, PlanMode::Harvest);
        assert_eq!(dpo2.instruction_split, fresh);

        assert!(advance_round(
            &RoundManifest { round_id: RoundId::Dpo2, ..dpo2 },
            "x",
            None
        )
        .is_err());
        let _ = manifest.sft_export.take();
    }
}
