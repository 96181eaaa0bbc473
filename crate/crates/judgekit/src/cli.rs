//! Command-line entry point: the pipeline as subcommands over a workspace.
//!
//! Every subcommand is driven by explicit file paths and seeds; nothing is
//! seeded from the wall clock, so a rerun with the same inputs writes the
//! same bytes. Mutating subcommands take a lock file in the workspace
//! directory so only one process writes at a time.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::builder;
use crate::client::{Endpoint, EndpointConfig};
use crate::eval::{self, OrderPolicy};
use crate::mock::MockBackend;
use crate::model::{BenchmarkExample, EvalInstance, Instruction, SamplingConfig, Source};
use crate::pairgen;
use crate::prompts::TemplateSet;
use crate::rounds::{self, InstructionSplit, RoundManifest};
use crate::sampler::{sample_grid, GridStore, PlanMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn data(e: impl ToString) -> CliError {
    CliError::Data(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Exclusive workspace lock, released on drop. A stale lock after a crash
/// must be removed by hand; the error says where it is.
pub struct WorkspaceLock {
    path: PathBuf,
}

impl WorkspaceLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(runtime)?;
        let path = dir.join(".judgekit.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkspaceLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(
                format!(
                    "workspace {} is locked by another process (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(runtime(e)),
        }
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Parser)]
#[command(name = "judgekit", version, about = "CoT judge training-data pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build evaluation instances (response pairs with a known preference).
    GenPairs(GenPairsArgs),
    /// Sample plan/execution CoT grids for each instance, resumably.
    Sample(SampleArgs),
    /// Label grids and export SFT + DPO datasets.
    Build(BuildArgs),
    /// Judge a pairwise benchmark and write accuracy reports.
    Eval(EvalArgs),
    /// Advance a round manifest to the next training round.
    Advance(AdvanceArgs),
    /// Print a saved summary or stats file.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EndpointArgs {
    /// Endpoint spec: `mock:seed=N`, `replay:<file>`, or an http(s) base URL.
    #[arg(long)]
    pub endpoint: String,
    /// Model name sent to HTTP endpoints.
    #[arg(long, default_value = "judge")]
    pub model: String,
    /// Record live traffic to this replay file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub max_parallel: usize,
}

impl EndpointArgs {
    pub fn open(&self) -> Result<Endpoint, CliError> {
        let mut config = EndpointConfig::new(self.endpoint.clone(), self.model.clone());
        config.max_parallel = self.max_parallel;
        config.api_key_env = Some("JUDGEKIT_API_KEY".into());
        let ep = if let Some(rest) = self.endpoint.strip_prefix("mock:") {
            let seed = rest
                .strip_prefix("seed=")
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| usage(format!("bad mock endpoint spec {:?}", self.endpoint)))?;
            MockBackend::seeded(seed).into_endpoint_with(config)
        } else if let Some(path) = self.endpoint.strip_prefix("replay:") {
            Endpoint::replay(config, Path::new(path)).map_err(usage)?
        } else if self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://") {
            Endpoint::http(config).map_err(usage)?
        } else {
            return Err(usage(format!("unrecognized endpoint spec {:?}", self.endpoint)));
        };
        Ok(match &self.record {
            Some(path) => ep.with_recording(path.clone()),
            None => ep,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairMode {
    /// Sample the instruction N times, pair a correct with an incorrect
    /// answer (needs gold answers).
    Math,
    /// Pass through pre-built chosen/rejected pairs, randomizing sides.
    Ingest,
}

#[derive(Debug, Args)]
pub struct GenPairsArgs {
    /// Instruction JSONL (math mode) or pre-built pair JSONL (ingest mode).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub mode: PairMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Responses sampled per instruction in math mode.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Endpoint spec for math mode: `mock:seed=N`, `replay:<file>`, or URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "judge")]
    pub model: String,
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub max_parallel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlanModeArg {
    Bootstrap,
    Harvest,
}

impl From<PlanModeArg> for PlanMode {
    fn from(v: PlanModeArg) -> PlanMode {
        match v {
            PlanModeArg::Bootstrap => PlanMode::Bootstrap,
            PlanModeArg::Harvest => PlanMode::Harvest,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// EvalInstance JSONL produced by gen-pairs.
    #[arg(long)]
    pub instances: PathBuf,
    /// Append-only grid checkpoint file; rerunning resumes from it.
    #[arg(long)]
    pub grids: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long, value_enum, default_value = "bootstrap")]
    pub plan_mode: PlanModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub num_plans: usize,
    #[arg(long, default_value_t = 4)]
    pub execs_per_order: usize,
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    pub top_p: f64,
    #[arg(long, default_value_t = 2048)]
    pub max_tokens: u32,
    /// Optional template directory overriding the built-in prompts.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Write the fully resolved round manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sft")]
    pub round: RoundArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoundArg {
    Sft,
    Dpo1,
    Dpo2,
}

impl From<RoundArg> for rounds::RoundId {
    fn from(v: RoundArg) -> rounds::RoundId {
        match v {
            RoundArg::Sft => rounds::RoundId::Sft,
            RoundArg::Dpo1 => rounds::RoundId::Dpo1,
            RoundArg::Dpo2 => rounds::RoundId::Dpo2,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long)]
    pub grids: PathBuf,
    #[arg(long)]
    pub sft: PathBuf,
    #[arg(long)]
    pub dpo: PathBuf,
    /// Dataset stats JSON (defaults to `<dpo>.stats.json`).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cap on records per (plan, order) group.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub num_plans: usize,
    #[arg(long, default_value_t = 4)]
    pub execs_per_order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    SingleOrder,
    PositionConsistent,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// BenchmarkExample JSONL.
    #[arg(long)]
    pub benchmark: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long, value_enum)]
    pub protocol: ProtocolArg,
    /// Shuffle presentation orders with this seed (single-order only).
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    /// Restrict to one benchmark category.
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub summary: PathBuf,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdvanceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub trained_endpoint: String,
    /// InstructionSplit JSON for the next round (required for dpo2).
    #[arg(long)]
    pub next_split: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A summary or stats JSON file written by eval or build.
    #[arg(long)]
    pub file: PathBuf,
}

fn load_templates(dir: &Option<PathBuf>) -> Result<TemplateSet, CliError> {
    match dir {
        Some(dir) => TemplateSet::from_dir(dir).map_err(usage),
        None => Ok(TemplateSet::builtin()),
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            data(format!("{}:{}: {e}", path.display(), idx + 1))
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(runtime)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(runtime)?;
        out.write_all(b"\n").map_err(runtime)?;
    }
    out.flush().map_err(runtime)
}

fn workspace_of(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenPairs(args) => cmd_gen_pairs(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Build(args) => cmd_build(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Advance(args) => cmd_advance(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_gen_pairs(args: GenPairsArgs) -> Result<(), CliError> {
    let _lock = WorkspaceLock::acquire(&workspace_of(&args.output))?;
    let instances: Vec<EvalInstance> = match args.mode {
        PairMode::Ingest => {
            let file = fs::File::open(&args.input)
                .map_err(|e| usage(format!("{}: {e}", args.input.display())))?;
            pairgen::ingest_pairs(BufReader::new(file), args.seed).map_err(data)?
        }
        PairMode::Math => {
            let endpoint_args = EndpointArgs {
                endpoint: args
                    .endpoint
                    .clone()
                    .ok_or_else(|| usage("math mode needs --endpoint"))?,
                model: args.model.clone(),
                record: args.record.clone(),
                max_parallel: args.max_parallel,
            };
            let ep = endpoint_args.open()?;
            let instructions: Vec<Instruction> = read_jsonl(&args.input)?;
            let cfg = SamplingConfig {
                seed: args.seed,
                ..SamplingConfig::default()
            };
            let mut kept = Vec::new();
            let mut skipped = Vec::new();
            for inst in &instructions {
                if inst.source != Source::Math || inst.gold_answer.is_none() {
                    skipped.push((inst.id.clone(), "no gold answer".to_string()));
                    continue;
                }
                match pairgen::gen_math_pair(inst, &ep, args.samples, &cfg) {
                    Ok(Some(instance)) => kept.push(instance),
                    Ok(None) => skipped.push((
                        inst.id.clone(),
                        "samples not split between correct and incorrect".into(),
                    )),
                    Err(e) => skipped.push((inst.id.clone(), e.to_string())),
                }
            }
            for (id, reason) in &skipped {
                eprintln!("skipped {id}: {reason}");
            }
            kept
        }
    };
    let mut per_source: BTreeMap<String, usize> = BTreeMap::new();
    for inst in &instances {
        *per_source
            .entry(inst.instruction.source.to_string())
            .or_default() += 1;
    }
    write_jsonl(&args.output, &instances)?;
    for (source, count) in &per_source {
        println!("{source}: {count} instances");
    }
    println!("wrote {} instances to {}", instances.len(), args.output.display());
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let _lock = WorkspaceLock::acquire(&workspace_of(&args.grids))?;
    let templates = load_templates(&args.templates)?;
    let ep = args.endpoint.open()?;
    let instances: Vec<EvalInstance> = read_jsonl(&args.instances)?;
    if instances.is_empty() {
        return Err(data(format!("{} holds no instances", args.instances.display())));
    }
    let cfg = SamplingConfig {
        num_plans: args.num_plans,
        execs_per_order: args.execs_per_order,
        temperature: args.temperature,
        top_p: args.top_p,
        max_tokens: args.max_tokens,
        seed: args.seed,
    };
    cfg.validate().map_err(usage)?;
    if let Some(path) = &args.manifest {
        let mut split = InstructionSplit::default();
        for inst in &instances {
            split
                .ids_by_source
                .entry(inst.instruction.source.to_string())
                .or_default()
                .push(inst.instruction.id.clone());
        }
        let manifest = RoundManifest {
            round_id: args.round.into(),
            source_endpoint: args.endpoint.endpoint.clone(),
            instruction_split: split,
            sampling: cfg.clone(),
            plan_mode: args.plan_mode.into(),
            template_checksums: templates.checksums(),
            sft_export: None,
            dpo_export: None,
            parent_round: None,
        };
        manifest.save(path).map_err(runtime)?;
    }
    let mut store = GridStore::open(&args.grids).map_err(runtime)?;
    let total = instances.len();
    for (idx, instance) in instances.iter().enumerate() {
        let grid = sample_grid(
            instance,
            &cfg,
            &ep,
            &templates,
            args.plan_mode.into(),
            Some(&mut store),
        )
        .map_err(|e| {
            runtime(format!(
                "instance {} failed ({}); completed cells are saved in {} and a rerun resumes there",
                instance.instruction.id,
                e,
                args.grids.display()
            ))
        })?;
        println!(
            "[{}/{}] {}: {} cells",
            idx + 1,
            total,
            instance.instruction.id,
            grid.present_cells()
        );
    }
    if args.endpoint.record.is_some() {
        ep.save_recording().map_err(runtime)?;
    }
    Ok(())
}

fn cmd_build(args: BuildArgs) -> Result<(), CliError> {
    let _lock = WorkspaceLock::acquire(&workspace_of(&args.dpo))?;
    let templates = load_templates(&args.templates)?;
    let instances: Vec<EvalInstance> = read_jsonl(&args.instances)?;
    let store = GridStore::open(&args.grids).map_err(runtime)?;
    let cfg = SamplingConfig {
        num_plans: args.num_plans,
        execs_per_order: args.execs_per_order,
        ..SamplingConfig::default()
    };
    let mut labeled = Vec::new();
    for instance in &instances {
        let Some(grid) = store.grid_for(instance, &cfg) else {
            return Err(data(format!(
                "no complete grid for instance {} in {}",
                instance.instruction.id,
                args.grids.display()
            )));
        };
        labeled.push(builder::label_grid(grid));
    }
    let bundle = builder::build_bundle(&labeled, &templates, args.cap, args.seed)
        .map_err(data)?;
    if bundle.sft_records.is_empty() && bundle.dpo_records.is_empty() {
        for drop in &bundle.drops {
            eprintln!("dropped {}: {}", drop.instruction_id, drop.reason);
        }
        return Err(data("no usable instructions: every grid was dropped"));
    }
    // independent pair-count check: Σ correct × incorrect per (plan, order)
    // group must equal the exported record count plus removed duplicates
    let expected: usize = labeled.iter().map(expected_pair_count).sum();
    let actual = bundle.dpo_records.len() + bundle.stats.deduplicated;
    let identity_holds = args.cap.is_none() && expected == actual;
    if args.cap.is_none() && !identity_holds {
        return Err(data(format!(
            "pair-count identity violated: expected {expected}, exported {actual}"
        )));
    }
    rounds::export_sft(&bundle.sft_records, &args.sft).map_err(data)?;
    rounds::export_dpo(&bundle.dpo_records, &args.dpo).map_err(data)?;
    let stats_path = args.stats.unwrap_or_else(|| {
        let mut name = args.dpo.file_name().unwrap_or_default().to_os_string();
        name.push(".stats.json");
        args.dpo.with_file_name(name)
    });
    fs::write(
        &stats_path,
        serde_json::to_vec_pretty(&bundle.stats).map_err(runtime)?,
    )
    .map_err(runtime)?;
    for drop in &bundle.drops {
        eprintln!("dropped {}: {}", drop.instruction_id, drop.reason);
    }
    println!(
        "sft: {} records, dpo: {} records ({} duplicates removed)",
        bundle.stats.sft_total, bundle.stats.dpo_total, bundle.stats.deduplicated
    );
    if args.cap.is_none() {
        println!("pair-count identity: ok ({expected} = {actual})");
    }
    Ok(())
}

fn expected_pair_count(lg: &builder::LabeledGrid) -> usize {
    if !lg.has_correct_cell() {
        return 0;
    }
    let mut per_group: BTreeMap<(usize, crate::model::Order), (usize, usize)> = BTreeMap::new();
    for (key, cell) in &lg.grid.cells {
        if cell.is_missing() {
            continue;
        }
        let entry = per_group.entry((key.plan_idx, key.order)).or_default();
        if lg.labels[key] {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    per_group.values().map(|(c, r)| c * r).sum()
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let templates = load_templates(&args.templates)?;
    let ep = args.endpoint.open()?;
    let mut examples: Vec<BenchmarkExample> = read_jsonl(&args.benchmark)?;
    if let Some(category) = &args.category {
        examples.retain(|e| &e.category == category);
        if examples.is_empty() {
            return Err(data(format!("no examples in category {category:?}")));
        }
    }
    let report = match args.protocol {
        ProtocolArg::SingleOrder => {
            let policy = match args.shuffle_seed {
                Some(seed) => OrderPolicy::SeededShuffle(seed),
                None => OrderPolicy::AsGiven,
            };
            eval::eval_single_order(&ep, &templates, &examples, policy)
        }
        ProtocolArg::PositionConsistent => {
            if args.shuffle_seed.is_some() {
                return Err(usage(
                    "--shuffle-seed only applies to the single-order protocol",
                ));
            }
            eval::eval_position_consistent(&ep, &templates, &examples)
        }
    }
    .map_err(runtime)?;
    eval::write_report(&report, &args.records, &args.summary).map_err(runtime)?;
    if args.endpoint.record.is_some() {
        ep.save_recording().map_err(runtime)?;
    }
    println!(
        "{:?}: {}/{} correct, accuracy {:.4} ({} errored, {} unparsed)",
        report.protocol, report.correct, report.total, report.accuracy, report.errored,
        report.unparsed
    );
    Ok(())
}

fn cmd_advance(args: AdvanceArgs) -> Result<(), CliError> {
    let manifest = RoundManifest::load(&args.manifest).map_err(usage)?;
    let next_split = match &args.next_split {
        Some(path) => Some(
            serde_json::from_slice(&fs::read(path).map_err(usage)?).map_err(data)?,
        ),
        None => None,
    };
    let next = rounds::advance_round(&manifest, &args.trained_endpoint, next_split)
        .map_err(data)?;
    next.save(&args.out).map_err(runtime)?;
    println!(
        "advanced {} -> {} ({} instructions)",
        manifest.round_id.as_str(),
        next.round_id.as_str(),
        next.instruction_split.len()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let value: serde_json::Value =
        serde_json::from_slice(&fs::read(&args.file).map_err(usage)?).map_err(data)?;
    println!("{}", serde_json::to_string_pretty(&value).map_err(runtime)?);
    Ok(())
}
