use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use al_core::augment::{Direction, Split};
use al_core::classifier::{ClassifierBackend, Example, NativeBackend, RemoteBackend};
use al_core::corpus::{keyword_filter, preprocess, read_records, write_records};
use al_core::embed::embedder_from_spec;
use al_core::evaluate::{audit_month, render_table};
use al_core::pipeline::{self, oracle_probe, PipelineConfig};
use al_core::rounds::{
    Clock, CounterfactualRequest, LoopError, OracleKind, Phase, Project, ProjectConfig,
    RoundOptions, SimulatedOracle,
};
use al_core::sampler::{
    mine_false_negatives, positive_predictions, uncertain_negatives, BatchContext, Predictions,
    QueryBatch, QuotaPlan,
};
use al_core::synth::{generate, CorpusSpec, OracleKey};
use al_core::topics::{
    english_stopwords, flag_target_topics, reduce_topics, summarize, TopicModel,
};
use al_core::{EmbedderSpec, EmbeddingVector, FilterRuleSet, Label, Pool, RecordId, TriageRecord};

use crate::cli::*;
use crate::error::CliError;
use crate::lock::StoreLock;

type Result<T> = std::result::Result<T, CliError>;

pub struct Ctx {
    pub dir: PathBuf,
    pub clock: Clock,
    pub dry_run: bool,
    pub backend: Box<dyn ClassifierBackend>,
}

impl Ctx {
    pub fn from_cli(cli: &Cli) -> Self {
        Ctx {
            dir: cli.project.clone(),
            clock: match cli.clock {
                ClockArg::System => Clock::System,
                ClockArg::Logical => Clock::logical(),
            },
            dry_run: cli.dry_run,
            backend: match &cli.backend_url {
                Some(url) => Box::new(RemoteBackend::new(url.clone())),
                None => Box::new(NativeBackend),
            },
        }
    }

    /// Open the store for reading. No lock is taken.
    fn read(&self) -> Result<Project> {
        Ok(Project::open(&self.dir, self.clock)?)
    }

    /// Lock the store and open it for writing.
    fn write(&self) -> Result<(StoreLock, Project)> {
        let lock = StoreLock::acquire(&self.dir)?;
        let project = Project::open(&self.dir, self.clock)?;
        Ok((lock, project))
    }

    fn config_or_default(&self) -> ProjectConfig {
        self.read().map(|p| p.config().clone()).unwrap_or_default()
    }

    fn plan(&self, what: impl std::fmt::Display) -> bool {
        if self.dry_run {
            println!("dry run: would {what}");
        }
        self.dry_run
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Ctx::from_cli(&cli);
    match cli.command {
        Command::Init { config } => init(&ctx, config.as_deref()),
        Command::Ingest { file, pool } => ingest(&ctx, &file, pool),
        Command::Filter {
            input,
            output,
            rejected,
            rules,
            strip,
        } => filter(
            &ctx,
            &input,
            &output,
            rejected.as_deref(),
            rules.as_deref(),
            strip,
        ),
        Command::Embed {
            input,
            output,
            spec,
        } => embed(&ctx, &input, &output, spec.as_deref()),
        Command::Topics(cmd) => topics(&ctx, cmd),
        Command::Sample(cmd) => sample(&ctx, cmd),
        Command::Labels(cmd) => labels(&ctx, cmd),
        Command::Dataset(cmd) => dataset(&ctx, cmd),
        Command::Train => train(&ctx),
        Command::Predict(args) => predict(&ctx, args),
        Command::Augment(cmd) => augment(&ctx, cmd),
        Command::Round(cmd) => round(&ctx, cmd),
        Command::Eval(cmd) => eval(&ctx, cmd),
        Command::Synth(cmd) => synth(&ctx, cmd),
        Command::Run { config, out } => run(&ctx, &config, out),
        Command::Serve { config } => serve(&ctx, &config),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    toml::from_str(&text).map_err(|e| CliError::config(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::config(path, e))?;
    std::fs::write(path, text + "\n").map_err(CliError::io(path))
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("in-memory values serialize")
    );
}

/// Next free `<dir>/<prefix>-NNN.json`.
fn next_versioned(dir: &Path, prefix: &str) -> Result<PathBuf> {
    let n = versions(dir, prefix)?.last().map_or(1, |(n, _)| n + 1);
    Ok(dir.join(format!("{prefix}-{n:03}.json")))
}

fn latest_versioned(dir: &Path, prefix: &str) -> Result<Option<PathBuf>> {
    Ok(versions(dir, prefix)?.pop().map(|(_, p)| p))
}

fn versions(dir: &Path, prefix: &str) -> Result<Vec<(u32, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<(u32, PathBuf)> = std::fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let n = stem.strip_prefix(prefix)?.strip_prefix('-')?.parse().ok()?;
            (p.extension()? == "json").then_some((n, p))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn init(ctx: &Ctx, config: Option<&Path>) -> Result<()> {
    let cfg: ProjectConfig = match config {
        Some(p) => read_toml(p)?,
        None => ProjectConfig::default(),
    };
    if ctx.plan(format_args!(
        "create a project in {} (embedder dim {}, ratio cap {}, beta {})",
        ctx.dir.display(),
        cfg.embedder.dim,
        cfg.ratio_cap,
        cfg.beta
    )) {
        return Ok(());
    }
    let _lock = StoreLock::acquire(&ctx.dir)?;
    Project::create(&ctx.dir, cfg, ctx.clock)?;
    println!("initialized {}", ctx.dir.display());
    Ok(())
}

fn ingest(ctx: &Ctx, file: &Path, pool: Option<Pool>) -> Result<()> {
    let mut records = read_records(file)?;
    if let Some(pool) = pool {
        for r in &mut records {
            r.pool = pool;
        }
    }
    if ctx.plan(format_args!(
        "ingest {} records from {}",
        records.len(),
        file.display()
    )) {
        return Ok(());
    }
    let (_lock, mut project) = ctx.write()?;
    let n = project.ingest(records)?;
    println!("ingested {n} records");
    Ok(())
}

fn clean(records: Vec<TriageRecord>, strip: &[String]) -> Result<Vec<TriageRecord>> {
    records
        .into_iter()
        .map(|r| {
            if r.clean_text.is_empty() {
                preprocess(&r, strip).map_err(CliError::from)
            } else {
                Ok(r)
            }
        })
        .collect()
}

fn filter(
    ctx: &Ctx,
    input: &Path,
    output: &Path,
    rejected: Option<&Path>,
    rules: Option<&Path>,
    strip: Vec<String>,
) -> Result<()> {
    let cfg = ctx.config_or_default();
    let rules = match rules {
        Some(p) => FilterRuleSet::load(p)?,
        None => cfg.rules,
    };
    let mut patterns = cfg.strip_patterns;
    patterns.extend(strip);
    let records = read_records(input)?
        .iter()
        .map(|r| preprocess(r, &patterns))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (kept, dropped) = keyword_filter(records, &rules);
    println!("retained {}, rejected {}", kept.len(), dropped.len());
    if ctx.plan(format_args!("write {}", output.display())) {
        return Ok(());
    }
    write_records(output, &kept)?;
    if let Some(path) = rejected {
        al_core::jsonl::write(path, &dropped)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddedRecord {
    id: RecordId,
    vector: EmbeddingVector,
}

fn embed(ctx: &Ctx, input: &Path, output: &Path, spec: Option<&Path>) -> Result<()> {
    let cfg = ctx.config_or_default();
    let spec: EmbedderSpec = match spec {
        Some(p) => read_toml(p)?,
        None => cfg.embedder.clone(),
    };
    let records = clean(read_records(input)?, &cfg.strip_patterns)?;
    if ctx.plan(format_args!(
        "embed {} records into {} dimensions",
        records.len(),
        spec.dim
    )) {
        return Ok(());
    }
    let embedder = embedder_from_spec(&spec)?;
    let texts: Vec<&str> = records.iter().map(|r| r.clean_text.as_str()).collect();
    let out: Vec<EmbeddedRecord> = records
        .iter()
        .zip(embedder.embed_batch(&texts)?)
        .map(|(r, vector)| EmbeddedRecord {
            id: r.id.clone(),
            vector,
        })
        .collect();
    al_core::jsonl::write(output, &out)?;
    println!("embedded {} records", out.len());
    Ok(())
}

fn topics_dir(ctx: &Ctx) -> PathBuf {
    ctx.dir.join("topics")
}

fn load_model(ctx: &Ctx, input: Option<&Path>) -> Result<(PathBuf, TopicModel)> {
    let path = match input {
        Some(p) => p.to_path_buf(),
        None => latest_versioned(&topics_dir(ctx), "topics")?.ok_or_else(|| {
            CliError::Usage("no topic model file; run `al topics build` first".into())
        })?,
    };
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let model = serde_json::from_str(&text).map_err(|e| CliError::config(&path, e))?;
    Ok((path, model))
}

fn save_model(ctx: &Ctx, model: &TopicModel) -> Result<()> {
    let path = next_versioned(&topics_dir(ctx), "topics")?;
    write_json(&path, model)?;
    println!("wrote {} ({} topics)", path.display(), model.k);
    Ok(())
}

fn topics(ctx: &Ctx, cmd: TopicsCommand) -> Result<()> {
    match cmd {
        TopicsCommand::Build { k, seed, top_n } => {
            if ctx.plan(format_args!(
                "cluster the focused pool into {k} topics (seed {seed})"
            )) {
                return Ok(());
            }
            let mut project = ctx.read()?;
            let model = project.build_topic_model(k, None, seed, top_n)?;
            save_model(ctx, &model)
        }
        TopicsCommand::Reduce { to, input, top_n } => {
            let (path, model) = load_model(ctx, input.as_deref())?;
            if ctx.plan(format_args!(
                "merge {} from {} down to {to} topics",
                path.display(),
                model.k
            )) {
                return Ok(());
            }
            let mut project = ctx.read()?;
            let ids: Vec<RecordId> = model.assignment.keys().cloned().collect();
            let points = project.embeddings(&ids)?;
            let reduced = reduce_topics(&model, &points, to).map_err(LoopError::from)?;
            let texts: BTreeMap<RecordId, String> = ids
                .iter()
                .map(|id| (id.clone(), project.state().records[id].clean_text.clone()))
                .collect();
            let reduced = summarize(&reduced, &texts, top_n, &english_stopwords())
                .map_err(LoopError::from)?;
            save_model(ctx, &reduced)
        }
        TopicsCommand::Flag(args) => flag(ctx, args),
        TopicsCommand::Show { input } => {
            let model = match input {
                Some(p) => load_model(ctx, Some(&p))?.1,
                None => match ctx.read()?.state().topic_model.clone() {
                    Some(m) => m,
                    None => load_model(ctx, None)?.1,
                },
            };
            for (t, count) in model.member_counts().into_iter().enumerate() {
                let words: Vec<&str> = model.keywords[t].iter().map(|k| k.ngram.as_str()).collect();
                let flag = if model.target_flag[t] { "*" } else { " " };
                println!("{flag}{t:>3} {count:>5}  {}", words.join(", "));
            }
            Ok(())
        }
    }
}

fn flag(ctx: &Ctx, args: FlagArgs) -> Result<()> {
    let (path, model) = load_model(ctx, args.input.as_deref())?;
    let flagged = if let Some(key_path) = &args.oracle_key {
        let key = OracleKey::load(key_path)?;
        let oracle = SimulatedOracle::new("probe", key, 0.0, 0);
        let probe = oracle_probe(&model, &oracle, args.per_topic)?;
        flag_target_topics(&model, &probe, args.threshold).map_err(LoopError::from)?
    } else if !args.topics.is_empty() {
        let mut m = model;
        for &t in &args.topics {
            if t >= m.k {
                return Err(CliError::Usage(format!(
                    "topic {t} is out of range for {} topics",
                    m.k
                )));
            }
            m.target_flag[t] = true;
        }
        m
    } else {
        return Err(CliError::Usage(
            "give --oracle-key to probe topics or --topics to flag them directly".into(),
        ));
    };
    let topics = flagged.flagged_topics();
    if ctx.plan(format_args!(
        "record {} with flagged topics {topics:?}",
        path.display()
    )) {
        return Ok(());
    }
    let (_lock, mut project) = ctx.write()?;
    project.record_topic_model(flagged)?;
    println!("flagged topics {topics:?}");
    if topics.is_empty() {
        eprintln!("warning: no topic was flagged; seed sampling needs at least one");
    }
    Ok(())
}

fn write_batch_file(ctx: &Ctx, project: &Project, id: usize) -> Result<()> {
    let path = ctx.dir.join("batches").join(format!("batch-{id:03}.json"));
    write_json(&path, &project.state().batches[id])
}

fn sample(ctx: &Ctx, cmd: SampleCommand) -> Result<()> {
    let (args, kind) = match cmd {
        SampleCommand::Seed {
            total,
            target_share,
            floor,
            cap,
        } => {
            let mut plan = QuotaPlan::new(total, target_share, floor);
            plan.per_topic_cap = cap;
            if ctx.plan(format_args!(
                "draw a seed batch of {total} ({target_share} from flagged topics, floor {floor})"
            )) {
                return Ok(());
            }
            let (_lock, mut project) = ctx.write()?;
            let id = project.sample_seed(&plan)?;
            write_batch_file(ctx, &project, id)?;
            println!(
                "batch {id}: {} records",
                project.state().batches[id].batch.len()
            );
            return Ok(());
        }
        SampleCommand::Uncertain(a) => (a, "uncertain"),
        SampleCommand::Positives(a) => (a, "positives"),
        SampleCommand::Fn(a) => (a, "fn"),
    };
    let project = ctx.read()?;
    let state = project.state();
    let round = state.current_round().ok_or(LoopError::NoActiveRound)?;
    if round.selected.is_empty()
        || !round
            .selected
            .iter()
            .all(|c| state.predictions.contains_key(c))
    {
        return Err(LoopError::WrongPhase {
            expected: Phase::QueueBuild,
            found: round.phase,
        }
        .into());
    }
    let cfg = project.config();
    let threshold = args.threshold.unwrap_or(cfg.uncertainty_threshold);
    let texts: BTreeMap<RecordId, String> = state
        .records
        .values()
        .filter(|r| r.pool == args.pool)
        .map(|r| (r.id.clone(), r.clean_text.clone()))
        .collect();
    // Previews are not recorded, so the stamp only needs to be stable.
    let ctx_batch = BatchContext {
        round: round.round,
        created_at: chrono::DateTime::UNIX_EPOCH,
    };
    let mut batches = Vec::new();
    for cp in &round.selected {
        let preds: Predictions = state.predictions[cp]
            .iter()
            .filter(|(id, _)| texts.contains_key(*id))
            .map(|(id, p)| (id.clone(), *p))
            .collect();
        let batch: QueryBatch = match kind {
            "uncertain" => uncertain_negatives(&preds, threshold, ctx_batch),
            "positives" => positive_predictions(&preds, ctx_batch),
            _ => mine_false_negatives(&preds, &texts, &cfg.rules, threshold, ctx_batch),
        };
        batches.push(serde_json::json!({ "checkpoint_id": cp, "batch": batch }));
    }
    match &args.out {
        Some(path) => write_json(path, &batches),
        None => {
            print_json(&batches);
            Ok(())
        }
    }
}

#[derive(Debug, Deserialize)]
struct LabelLine {
    record_id: RecordId,
    label: Label,
    oracle_id: String,
    #[serde(default = "human")]
    oracle_kind: OracleKind,
}

fn human() -> OracleKind {
    OracleKind::Human
}

#[derive(Debug, Default)]
struct LabelTally {
    recorded: usize,
    duplicates: usize,
    conflicts: Vec<RecordId>,
}

impl LabelTally {
    fn submit(
        &mut self,
        project: &mut Project,
        id: &RecordId,
        label: Label,
        oracle_id: &str,
        kind: OracleKind,
    ) -> Result<()> {
        match project.submit_label(id, label, oracle_id, kind) {
            Ok(ack) if ack.duplicate => self.duplicates += 1,
            Ok(_) => self.recorded += 1,
            Err(LoopError::ConflictPending { id, .. }) => {
                self.recorded += 1;
                self.conflicts.push(id);
            }
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    fn print(&self) {
        println!(
            "recorded {}, duplicates {}, conflicts {}",
            self.recorded,
            self.duplicates,
            self.conflicts.len()
        );
        for id in &self.conflicts {
            println!("  awaiting adjudication: {id}");
        }
    }
}

fn batch_members(project: &Project, batch: Option<usize>) -> Result<Option<BTreeSet<RecordId>>> {
    batch
        .map(|b| {
            project
                .state()
                .batches
                .get(b)
                .map(|s| s.batch.record_ids.iter().cloned().collect())
                .ok_or_else(|| LoopError::UnknownBatch(b).into())
        })
        .transpose()
}

fn labels(ctx: &Ctx, cmd: LabelsCommand) -> Result<()> {
    match cmd {
        LabelsCommand::Submit { file, batch } => {
            let lines: Vec<LabelLine> = al_core::jsonl::read(&file)?;
            if ctx.plan(format_args!(
                "submit {} labels from {}",
                lines.len(),
                file.display()
            )) {
                return Ok(());
            }
            let (_lock, mut project) = ctx.write()?;
            let members = batch_members(&project, batch)?;
            let mut tally = LabelTally::default();
            for l in &lines {
                if members.as_ref().is_some_and(|m| !m.contains(&l.record_id)) {
                    return Err(CliError::Usage(format!(
                        "{} is not in batch {}",
                        l.record_id,
                        batch.unwrap_or_default()
                    )));
                }
                tally.submit(
                    &mut project,
                    &l.record_id,
                    l.label,
                    &l.oracle_id,
                    l.oracle_kind,
                )?;
            }
            tally.print();
            Ok(())
        }
        LabelsCommand::Simulate {
            oracle_key,
            oracle_id,
            noise,
            seed,
            batch,
        } => {
            let oracle =
                SimulatedOracle::new(oracle_id, OracleKey::load(&oracle_key)?, noise, seed);
            let todo = |project: &Project| -> Result<Vec<RecordId>> {
                Ok(match batch_members(project, batch)? {
                    Some(m) => m
                        .into_iter()
                        .filter(|id| !project.state().labels.is_touched(id))
                        .collect(),
                    None => project
                        .queue(None)
                        .into_iter()
                        .map(|q| q.record.id)
                        .collect(),
                })
            };
            if ctx.dry_run {
                let n = todo(&ctx.read()?)?.len();
                ctx.plan(format_args!("label {n} records as {}", oracle.id));
                return Ok(());
            }
            let (_lock, mut project) = ctx.write()?;
            let mut tally = LabelTally::default();
            for id in todo(&project)? {
                let label = oracle.label(&id).ok_or_else(|| {
                    CliError::Usage(format!("the oracle key has no entry for {id}"))
                })?;
                tally.submit(&mut project, &id, label, &oracle.id, oracle.kind())?;
            }
            tally.print();
            Ok(())
        }
        LabelsCommand::Set {
            record,
            label,
            oracle_id,
            kind,
        } => {
            if ctx.plan(format_args!("label {record} {label:?} as {oracle_id}")) {
                return Ok(());
            }
            let (_lock, mut project) = ctx.write()?;
            let ack = project.submit_label(&RecordId::new(record), label, &oracle_id, kind)?;
            print_json(&ack);
            Ok(())
        }
        LabelsCommand::Conflicts => {
            print_json(&ctx.read()?.conflicts());
            Ok(())
        }
    }
}

fn dataset(ctx: &Ctx, cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Seed { validation_share } => {
            if ctx.plan(format_args!(
                "build dataset v1 from the seed batch ({validation_share} to validation)"
            )) {
                return Ok(());
            }
            let (_lock, mut project) = ctx.write()?;
            let v = project.create_seed_dataset(validation_share)?;
            println!("dataset v{v}");
            Ok(())
        }
        DatasetCommand::Show => {
            let project = ctx.read()?;
            println!("version  train+  train-  val+  val-  synthetic  holdover");
            for d in &project.state().datasets {
                println!(
                    "v{:<7} {:>6}  {:>6}  {:>4}  {:>4}  {:>9}  {:>8}",
                    d.version,
                    d.train_counts.positive,
                    d.train_counts.negative,
                    d.validation_counts.positive,
                    d.validation_counts.negative,
                    d.train_synthetic + d.validation_synthetic,
                    d.holdover.len()
                );
            }
            Ok(())
        }
    }
}

/// Advance the current round while its phase is one of `phases`.
fn advance_through(ctx: &Ctx, phases: &[Phase]) -> Result<()> {
    let found = ctx
        .read()?
        .state()
        .current_round()
        .ok_or(LoopError::NoActiveRound)?
        .phase;
    if found != phases[0] {
        return Err(LoopError::WrongPhase {
            expected: phases[0],
            found,
        }
        .into());
    }
    if ctx.plan(format_args!("run phases {phases:?}")) {
        return Ok(());
    }
    let (_lock, mut project) = ctx.write()?;
    for _ in phases {
        let to = project.advance(ctx.backend.as_ref())?;
        println!("-> {}", phase_name(to));
    }
    Ok(())
}

fn phase_name(p: Phase) -> String {
    serde_json::to_value(p)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{p:?}"))
}

fn train(ctx: &Ctx) -> Result<()> {
    advance_through(ctx, &[Phase::Training, Phase::CheckpointEval])?;
    if !ctx.dry_run {
        let project = ctx.read()?;
        if let Some(r) = project.state().current_round() {
            println!("selected {}", r.selected.join(", "));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Scored {
    pub id: RecordId,
    pub probability: f64,
}

/// Probabilities for records outside the store, embedded like stored ones.
fn score_records(
    ctx: &Ctx,
    project: &Project,
    checkpoint: &str,
    records: &[TriageRecord],
) -> Result<Predictions> {
    let cp = project
        .state()
        .checkpoints
        .get(checkpoint)
        .ok_or_else(|| LoopError::UnknownCheckpoint(checkpoint.to_string()))?;
    let embedder = embedder_from_spec(&project.config().embedder)?;
    let texts: Vec<&str> = records.iter().map(|r| r.clean_text.as_str()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    let examples: Vec<Example<'_>> = records
        .iter()
        .zip(&vectors)
        .map(|(r, v)| Example {
            id: &r.id,
            text: &r.clean_text,
            features: &v.values,
        })
        .collect();
    Ok(ctx
        .backend
        .predict(cp, &examples)
        .map_err(LoopError::from)?)
}

fn predict(ctx: &Ctx, args: PredictArgs) -> Result<()> {
    let Some(checkpoint) = args.checkpoint else {
        advance_through(ctx, &[Phase::PoolPredict, Phase::QueueBuild])?;
        if !ctx.dry_run {
            println!("queue: {} records", ctx.read()?.queue(None).len());
        }
        return Ok(());
    };
    let (input, output) = (args.input.expect("clap"), args.output.expect("clap"));
    let project = ctx.read()?;
    let records = clean(read_records(&input)?, &project.config().strip_patterns)?;
    let preds = score_records(ctx, &project, &checkpoint, &records)?;
    let rows: Vec<Scored> = records
        .iter()
        .map(|r| Scored {
            id: r.id.clone(),
            probability: preds[&r.id],
        })
        .collect();
    al_core::jsonl::write(&output, &rows)?;
    println!("scored {} records", rows.len());
    Ok(())
}

fn augment(ctx: &Ctx, cmd: AugmentCommand) -> Result<()> {
    let req = match cmd {
        AugmentCommand::FlipNeg { id, span, split } => CounterfactualRequest {
            source_id: RecordId::new(id),
            direction: Direction::ToNegative,
            span,
            position: None,
            split,
        },
        AugmentCommand::FlipPos {
            id,
            span,
            pos,
            split,
        } => CounterfactualRequest {
            source_id: RecordId::new(id),
            direction: Direction::ToPositive,
            span,
            position: Some(pos),
            split,
        },
    };
    if ctx.plan(format_args!(
        "author a {:?} counterfactual of {} for the {} split",
        req.direction,
        req.source_id,
        if req.split == Split::Train {
            "train"
        } else {
            "validation"
        }
    )) {
        return Ok(());
    }
    let (_lock, mut project) = ctx.write()?;
    print_json(&project.author_counterfactual(&req)?);
    Ok(())
}

fn round(ctx: &Ctx, cmd: RoundCommand) -> Result<()> {
    match cmd {
        RoundCommand::Start {
            mode,
            options,
            max_per_batch,
            validation_share,
            deployment_train_share,
        } => {
            let mut opts: RoundOptions = match options {
                Some(p) => read_toml(&p)?,
                None => RoundOptions::default(),
            };
            opts.max_per_batch = max_per_batch.or(opts.max_per_batch);
            opts.validation_share = validation_share.unwrap_or(opts.validation_share);
            opts.deployment_train_share =
                deployment_train_share.unwrap_or(opts.deployment_train_share);
            if ctx.plan(format_args!("start a {mode:?} round with {opts:?}")) {
                return Ok(());
            }
            let (_lock, mut project) = ctx.write()?;
            let n = project.start_round(mode, opts)?;
            println!("round {n} started");
            Ok(())
        }
        RoundCommand::Advance { until } => {
            let current = ctx
                .read()?
                .state()
                .current_round()
                .ok_or(LoopError::NoActiveRound)?
                .phase;
            let target = until.unwrap_or_else(|| current.next().unwrap_or(current));
            if ctx.plan(format_args!(
                "advance from {} to {}",
                phase_name(current),
                phase_name(target)
            )) {
                return Ok(());
            }
            let (_lock, mut project) = ctx.write()?;
            loop {
                let to = project.advance(ctx.backend.as_ref())?;
                println!("-> {}", phase_name(to));
                if to >= target {
                    break;
                }
            }
            Ok(())
        }
        RoundCommand::Status => {
            print_json(&ctx.read()?.status());
            Ok(())
        }
        RoundCommand::Queue { strategy } => {
            for item in ctx.read()?.queue(strategy) {
                println!(
                    "{:<24} {:<20} {:>7} {}",
                    item.record.id,
                    item.strategy.as_str(),
                    item.probability.map_or("-".into(), |p| format!("{p:.4}")),
                    item.record.clean_text
                );
            }
            Ok(())
        }
    }
}

fn eval(ctx: &Ctx, cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Report {
            round,
            beta,
            compare,
            json,
        } => {
            if beta.is_some_and(|b| !(b.is_finite() && b > 0.0)) {
                return Err(CliError::Usage("beta must be a positive number".into()));
            }
            if compare {
                if ctx.plan("score every round's best checkpoint and the keyword baseline") {
                    return Ok(());
                }
                let (_lock, mut project) = ctx.write()?;
                let beta = beta.unwrap_or(project.config().beta);
                let comparison = project.compare(ctx.backend.as_ref(), beta)?;
                if json {
                    print_json(&comparison);
                } else {
                    print!("{}", project.comparison_table(beta).expect("just recorded"));
                }
                return Ok(());
            }
            let project = ctx.read()?;
            let round = match round {
                Some(r) => r,
                None => project
                    .state()
                    .rounds
                    .iter()
                    .rev()
                    .find(|r| r.report.is_some())
                    .map(|r| r.round)
                    .ok_or_else(|| CliError::Usage("no round has a report yet".into()))?,
            };
            let beta = beta.unwrap_or(project.config().beta);
            let row = project
                .metrics(round, beta)
                .ok_or_else(|| CliError::Usage(format!("round {round} has no report")))?;
            if json {
                print_json(&row);
            } else {
                print!("{}", render_table(&[row]));
            }
            Ok(())
        }
        EvalCommand::Audit {
            records,
            checkpoint,
            oracle_key,
            out,
        } => {
            let project = ctx.read()?;
            let key = OracleKey::load(&oracle_key)?;
            let month = clean(read_records(&records)?, &project.config().strip_patterns)?;
            let preds = score_records(ctx, &project, &checkpoint, &month)?;
            let mut missing = None;
            let report = audit_month(&month, &preds, &project.config().rules, |r| {
                match key.truth.get(&r.id) {
                    Some(t) => Label::from_bool(*t),
                    None => {
                        missing.get_or_insert_with(|| r.id.clone());
                        Label::Unlabeled
                    }
                }
            });
            if let Some(id) = missing {
                return Err(CliError::Usage(format!(
                    "the oracle key has no entry for {id}"
                )));
            }
            let report = report.map_err(LoopError::from)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => print_json(&report),
            }
            Ok(())
        }
    }
}

fn synth(ctx: &Ctx, cmd: SynthCommand) -> Result<()> {
    match cmd {
        SynthCommand::Generate {
            spec,
            n_focused,
            n_deployment,
            seed,
            out,
        } => {
            let mut spec: CorpusSpec = match spec {
                Some(p) => read_toml(&p)?,
                None => CorpusSpec::default(),
            };
            spec.n_focused = n_focused.unwrap_or(spec.n_focused);
            spec.n_deployment = n_deployment.unwrap_or(spec.n_deployment);
            spec.seed = seed.unwrap_or(spec.seed);
            if ctx.plan(format_args!(
                "generate {} focused and {} deployment notes (seed {}) into {}",
                spec.n_focused,
                spec.n_deployment,
                spec.seed,
                out.display()
            )) {
                return Ok(());
            }
            let corpus = generate(&spec)?;
            std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
            write_records(&out.join("focused.jsonl"), &corpus.focused)?;
            write_records(&out.join("deployment.jsonl"), &corpus.deployment)?;
            corpus.key.save(&out.join("oracle_key.json"))?;
            println!(
                "wrote {} focused, {} deployment records to {}",
                corpus.focused.len(),
                corpus.deployment.len(),
                out.display()
            );
            Ok(())
        }
        SynthCommand::Config => {
            print!("{}", PipelineConfig::desk_scale().to_toml_string());
            Ok(())
        }
    }
}

fn run(ctx: &Ctx, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(CliError::io(config))?;
    let cfg = PipelineConfig::from_toml_str(&text).map_err(|e| CliError::config(config, e))?;
    let dir = out.unwrap_or_else(|| ctx.dir.clone());
    if ctx.plan(format_args!(
        "run {} rounds over {} focused and {} deployment notes into {}",
        cfg.rounds.len(),
        cfg.corpus.n_focused,
        cfg.corpus.n_deployment,
        dir.display()
    )) {
        return Ok(());
    }
    let _lock = StoreLock::acquire(&dir)?;
    let outcome = pipeline::run(&cfg, Some(&dir), ctx.backend.as_ref())?;
    for r in &outcome.rounds {
        println!(
            "round {}: v{} train {}+/{}- eval {} F1 {:.3}",
            r.round,
            r.dataset_version,
            r.train_positive,
            r.train_negative,
            r.evaluation_size,
            r.row.metrics.f1
        );
    }
    print!("{}", outcome.table());
    println!("reports in {}", dir.join("reports").display());
    Ok(())
}

fn serve(ctx: &Ctx, config: &Path) -> Result<()> {
    let cfg = al_service::ServiceConfig::load(config)?;
    if ctx.plan(format_args!(
        "serve {} on {}",
        cfg.project_dir.display(),
        cfg.bind
    )) {
        return Ok(());
    }
    let _lock = StoreLock::acquire(&cfg.project_dir)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::io(config))?;
    runtime.block_on(al_service::serve(cfg))?;
    Ok(())
}
