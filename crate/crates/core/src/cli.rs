use std::collections::{BTreeMap, HashMap, HashSet};
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::Value;

use cirforge::backend::batch::{emit_batch, ingest_batch_results, read_batch_requests};
use cirforge::backend::http::HttpBackend;
use cirforge::backend::mock::MockBackend;
use cirforge::backend::replay::ReplayBackend;
use cirforge::backend::{
    ChatBackend, ChatResponse, MeteredBackend, Stage, UsageLedger, UsageRecord,
};
use cirforge::config::{BackendKind, RunConfig};
use cirforge::dataset::{
    compute_stats, creation_timestamp, read_hashes, read_json, read_jsonl, read_triplets,
    render_stats, write_json, write_jsonl, write_triplets, DatasetManifest, HashRecord, Splits,
};
use cirforge::distractors::sample_distractors;
use cirforge::embedding::EmbeddingStore;
use cirforge::metrics::{report, RankedQuery, RelevanceRecord, RetrievalRun};
use cirforge::mining::mine_pairs;
use cirforge::model::{
    pair_id, validate_triplet, CirTriplet, EmbeddingRecord, ImagePair, ImageRef, ValidationConfig,
};
use cirforge::permute::generate_permutations;
use cirforge::phash::hash_image_file;
use cirforge::pipeline::{
    resolve_image_path, run_pairs, PairGenerationResult, PipelineContext, PipelineMode, TemplateSet,
};
use cirforge::tokenizer::Vocabulary;

#[derive(Parser)]
#[command(
    name = "cirforge",
    version,
    about = "Build and evaluate composed image retrieval datasets"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration value; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute perceptual hashes for every image in a corpus.
    Hash(HashArgs),
    /// Check and normalise an externally produced embeddings file.
    EmbedImport(EmbedImportArgs),
    /// Mine query/target pairs from embeddings and hashes.
    Mine(MineArgs),
    /// Caption image pairs through the configured backend.
    Generate(GenerateArgs),
    /// Expand atomic captions into triplets with compound captions.
    Permute(PermuteArgs),
    /// Attach distractor images to triplets.
    Distract(DistractArgs),
    /// Write the requests that are still unanswered as a batch file.
    EmitBatch(EmitBatchArgs),
    /// Merge a batch output file into a response store.
    IngestBatch(IngestBatchArgs),
    /// Per-split dataset statistics.
    Stats(StatsArgs),
    /// Recall@K and mAP@K from a ranking file.
    Eval(EvalArgs),
    /// Check any file this tool writes.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct HashArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base for relative image paths; defaults to the corpus file's directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedImportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Require an embedding for every corpus image and nothing else.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    hashes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a dataset manifest with splits.
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    #[arg(long, default_value = "cirforge")]
    name: String,
    #[arg(long, default_value_t = 0.0)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Usage ledger; defaults to `<out>` with extension `usage.jsonl`.
    #[arg(long)]
    usage: Option<PathBuf>,
    /// Base for relative image paths; defaults to the pairs file's directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Answer from a response store built by ingest-batch instead of the API.
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Print the first prompt of every pair and exit without sending anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct PermuteArgs {
    /// Generation results.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistractArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmitBatchArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Responses gathered so far.
    #[arg(long)]
    responses: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Args)]
struct IngestBatchArgs {
    /// Batch output file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Batch request file, used to report missing results.
    #[arg(long)]
    requests: Option<PathBuf>,
    /// Response store; merged with its current contents.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    triplets: Vec<PathBuf>,
    #[arg(long)]
    usage: Vec<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    relevance: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FileKind {
    Triplets,
    Embeddings,
    Pairs,
    Hashes,
    Results,
    Usage,
    Run,
    Relevance,
    Manifest,
    Corpus,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// File kind; guessed from the first record when omitted.
    #[arg(long, value_enum)]
    kind: Option<FileKind>,
}

enum Outcome {
    Done,
    /// Output was written but some items failed.
    Partial,
}

pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::Partial) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Hash(a) => cmd_hash(a),
        Command::EmbedImport(a) => cmd_embed_import(a),
        Command::Mine(a) => cmd_mine(a, &cfg),
        Command::Generate(a) => cmd_generate(a, &cfg),
        Command::Permute(a) => cmd_permute(a, &cfg),
        Command::Distract(a) => cmd_distract(a, &cfg),
        Command::EmitBatch(a) => cmd_emit_batch(a, &cfg),
        Command::IngestBatch(a) => cmd_ingest_batch(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::Validate(a) => cmd_validate(a, &cfg),
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn partial_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let (Some(v), Some(m)) = (&cfg.permute.vocab, &cfg.permute.merges) else {
        bail!("permute.vocab and permute.merges must point at the CLIP vocab.json and merges.txt");
    };
    Vocabulary::load(v, m).with_context(|| format!("loading tokenizer from {}", v.display()))
}

fn validation_config(cfg: &RunConfig, vocab: Option<Arc<Vocabulary>>) -> ValidationConfig {
    ValidationConfig {
        token_limit: cfg.permute.token_limit,
        max_distractors: cfg.distract.k,
        recount: vocab,
        count_special_tokens: cfg.permute.count_special_tokens,
    }
}

fn cmd_hash(a: HashArgs) -> Result<Outcome> {
    let corpus: Vec<ImageRef> = read_jsonl(&a.corpus)?;
    let root = a.image_root.unwrap_or_else(|| parent_dir(&a.corpus));
    let hashed: Vec<_> = corpus
        .par_iter()
        .map(|r| (r, hash_image_file(&resolve_image_path(&root, &r.path))))
        .collect();
    let mut out = Vec::new();
    let mut failed = 0;
    for (r, h) in hashed {
        match h {
            Ok(h) => out.push(HashRecord::new(&r.id, &h)),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", r.id);
            }
        }
    }
    write_jsonl(&a.out, &out)?;
    eprintln!("hashed {} of {} images", out.len(), corpus.len());
    Ok(if failed > 0 {
        Outcome::Partial
    } else {
        Outcome::Done
    })
}

fn field<'a>(v: &'a Value, names: &[&str]) -> Option<&'a Value> {
    names.iter().find_map(|n| v.get(*n))
}

fn cmd_embed_import(a: EmbedImportArgs) -> Result<Outcome> {
    let rows: Vec<Value> = read_jsonl(&a.input)?;
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let id = field(row, &["id", "image_id"])
            .and_then(Value::as_str)
            .with_context(|| format!("record {}: no string \"id\"", i + 1))?;
        let vec = field(row, &["vec", "vector", "embedding"])
            .and_then(Value::as_array)
            .with_context(|| format!("record {}: no \"vec\" array", i + 1))?
            .iter()
            .map(Value::as_f64)
            .collect::<Option<Vec<f64>>>()
            .with_context(|| format!("record {}: \"vec\" holds a non-number", i + 1))?;
        records.push(EmbeddingRecord {
            image_id: id.to_string(),
            vector: vec,
        });
    }
    let store = EmbeddingStore::new(records)?;
    let mut outcome = Outcome::Done;
    if let Some(corpus) = &a.corpus {
        let corpus: Vec<ImageRef> = read_jsonl(corpus)?;
        let ids: HashSet<&str> = corpus.iter().map(|r| r.id.as_str()).collect();
        let extra: Vec<&str> = store
            .records()
            .iter()
            .map(|r| r.image_id.as_str())
            .filter(|id| !ids.contains(id))
            .collect();
        if !extra.is_empty() {
            bail!(
                "{} embeddings are not in the corpus, e.g. {:?}",
                extra.len(),
                extra[0]
            );
        }
        let missing: Vec<&str> = corpus
            .iter()
            .map(|r| r.id.as_str())
            .filter(|id| store.get(id).is_none())
            .collect();
        if !missing.is_empty() {
            eprintln!(
                "{} corpus images have no embedding, e.g. {:?}",
                missing.len(),
                missing[0]
            );
            outcome = Outcome::Partial;
        }
    }
    write_jsonl(&a.out, store.records())?;
    eprintln!(
        "imported {} embeddings of dimension {}",
        store.len(),
        store.dim()
    );
    Ok(outcome)
}

fn cmd_mine(a: MineArgs, cfg: &RunConfig) -> Result<Outcome> {
    let corpus: Vec<ImageRef> = read_jsonl(&a.corpus)?;
    let store = EmbeddingStore::new(read_jsonl(&a.embeddings)?)?;
    let hashes = read_hashes(&a.hashes)?;
    let pairs = mine_pairs(&store, &corpus, &hashes, &cfg.mine)?;
    write_jsonl(&a.out, &pairs)?;
    eprintln!("mined {} pairs from {} images", pairs.len(), corpus.len());
    if let Some(path) = &a.manifest_out {
        if !(0.0..=1.0).contains(&(a.val_fraction + a.test_fraction))
            || a.val_fraction < 0.0
            || a.test_fraction < 0.0
        {
            bail!("split fractions must be non-negative and sum to at most 1");
        }
        let ids: Vec<String> = pairs.iter().map(|p| p.pair_id.clone()).collect();
        let manifest = DatasetManifest {
            name: a.name,
            splits: Splits::by_hash(&ids, a.val_fraction, a.test_fraction),
            corpus,
            created: creation_timestamp(),
            config_digest: cfg.digest(),
        };
        manifest.validate(Some(&pairs))?;
        write_json(path, &manifest)?;
    }
    Ok(Outcome::Done)
}

fn pipeline_context(cfg: &RunConfig, image_root: PathBuf) -> Result<PipelineContext> {
    Ok(PipelineContext {
        templates: cfg.pipeline.load_templates()?,
        config: cfg.pipeline.clone(),
        request: cfg.api.request(),
        image_root,
    })
}

fn live_backend(cfg: &RunConfig, templates: &TemplateSet) -> Result<Box<dyn ChatBackend>> {
    Ok(match cfg.api.backend {
        BackendKind::Http => Box::new(HttpBackend::new(cfg.api.http())?),
        BackendKind::Mock => {
            let scene = cfg
                .api
                .scene_file
                .as_ref()
                .context("api.scene_file is not set")?;
            Box::new(MockBackend::from_path(
                scene,
                cfg.pipeline.effective_max_objects(templates),
            )?)
        }
    })
}

fn replay_backend(path: Option<&Path>) -> Result<ReplayBackend> {
    let responses: Vec<ChatResponse> = match path {
        Some(p) if p.exists() => read_jsonl(p)?,
        Some(p) => bail!("response store {} does not exist", p.display()),
        None => vec![],
    };
    Ok(ReplayBackend::new(responses, HashMap::new()))
}

fn print_dry_run(pairs: &[ImagePair], ctx: &PipelineContext) -> Result<()> {
    let stage = match ctx.config.mode {
        PipelineMode::ThreeStage => Stage::Stage1,
        PipelineMode::SingleStage => Stage::SingleStage,
    };
    let params = ctx
        .templates
        .base_params(ctx.config.effective_max_objects(&ctx.templates));
    let text = ctx.templates.template(stage).render(&params)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for p in pairs {
        writeln!(out, "=== {} {} ===", p.pair_id, stage)?;
        writeln!(out, "{text}")?;
        let images: Vec<&ImageRef> = match stage {
            Stage::SingleStage => vec![&p.query, &p.target],
            _ => vec![&p.query],
        };
        for img in images {
            writeln!(
                out,
                "[image {}: {}]",
                img.id,
                resolve_image_path(&ctx.image_root, &img.path).display()
            )?;
        }
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs, cfg: &RunConfig) -> Result<Outcome> {
    let pairs: Vec<ImagePair> = read_jsonl(&a.pairs)?;
    let ctx = pipeline_context(
        cfg,
        a.image_root.clone().unwrap_or_else(|| parent_dir(&a.pairs)),
    )?;
    if a.dry_run {
        print_dry_run(&pairs, &ctx)?;
        return Ok(Outcome::Done);
    }
    let inner: Box<dyn ChatBackend> = match &a.responses {
        Some(p) => Box::new(replay_backend(Some(p))?),
        None => live_backend(cfg, &ctx.templates)?,
    };
    let ledger = Arc::new(UsageLedger::new());
    let backend = MeteredBackend::new(inner, ledger.clone());

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        // Fails only when a handler is already installed.
        let _ = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst));
    }
    let mut results: Vec<PairGenerationResult> = Vec::with_capacity(pairs.len());
    let done = run_pairs(&pairs, &backend, &ctx, &stop, |r| results.push(r));

    let usage_path = a
        .usage
        .clone()
        .unwrap_or_else(|| a.out.with_extension("usage.jsonl"));
    let usage: Vec<UsageRecord> = ledger.records();
    if done < pairs.len() {
        let (out, up) = (partial_path(&a.out), partial_path(&usage_path));
        write_jsonl(&out, &results)?;
        write_jsonl(&up, &usage)?;
        eprintln!(
            "interrupted after {done} of {} pairs; partial results in {}",
            pairs.len(),
            out.display()
        );
        return Ok(Outcome::Partial);
    }
    write_jsonl(&a.out, &results)?;
    write_jsonl(&usage_path, &usage)?;

    let failed: Vec<&PairGenerationResult> = results.iter().filter(|r| !r.status.is_ok()).collect();
    for r in &failed {
        if let cirforge::pipeline::PairStatus::Failed { stage, reason } = &r.status {
            eprintln!("{}: failed at {stage}: {reason}", r.pair_id);
        }
    }
    let totals = ledger.totals();
    eprintln!(
        "generated {} pairs ({} failed), {} requests, {} prompt and {} output tokens",
        results.len(),
        failed.len(),
        totals.requests,
        totals.prompt_tokens,
        totals.output_tokens
    );
    Ok(if failed.is_empty() {
        Outcome::Done
    } else {
        Outcome::Partial
    })
}

fn cmd_permute(a: PermuteArgs, cfg: &RunConfig) -> Result<Outcome> {
    let vocab = Arc::new(load_vocab(cfg)?);
    let pcfg = cfg.permute.permute_config();
    let results: Vec<PairGenerationResult> = read_jsonl(&a.input)?;
    let mut triplets = Vec::new();
    let mut skipped = 0;
    for r in &results {
        if !r.status.is_ok() {
            skipped += 1;
            continue;
        }
        let pid = pair_id(&r.query_id, &r.target_id);
        if pid != r.pair_id {
            bail!(
                "result {:?} does not match its query and target ids",
                r.pair_id
            );
        }
        for caption in generate_permutations(&r.atomic_captions, &vocab, &pcfg, &r.pair_id) {
            triplets.push(CirTriplet {
                pair_id: r.pair_id.clone(),
                query_id: r.query_id.clone(),
                target_id: r.target_id.clone(),
                caption,
                distractor_ids: vec![],
            });
        }
    }
    write_triplets(&a.out, &triplets, &validation_config(cfg, Some(vocab)))?;
    eprintln!(
        "wrote {} triplets from {} pairs ({} failed pairs skipped)",
        triplets.len(),
        results.len() - skipped,
        skipped
    );
    Ok(Outcome::Done)
}

fn cmd_distract(a: DistractArgs, cfg: &RunConfig) -> Result<Outcome> {
    let vcfg = validation_config(cfg, None);
    let mut triplets = read_triplets(&a.input, &vcfg)?;
    let store = EmbeddingStore::new(read_jsonl(&a.embeddings)?)?;
    let mut cache: HashMap<String, Vec<String>> = HashMap::new();
    for t in &mut triplets {
        if !cache.contains_key(&t.pair_id) {
            let d =
                sample_distractors(&t.query_id, &t.target_id, &t.pair_id, &store, &cfg.distract)
                    .with_context(|| format!("pair {}", t.pair_id))?;
            cache.insert(t.pair_id.clone(), d);
        }
        t.distractor_ids = cache[&t.pair_id].clone();
    }
    write_triplets(&a.out, &triplets, &vcfg)?;
    let total: usize = cache.values().map(Vec::len).sum();
    eprintln!("sampled {total} distractors for {} pairs", cache.len());
    Ok(Outcome::Done)
}

fn cmd_emit_batch(a: EmitBatchArgs, cfg: &RunConfig) -> Result<Outcome> {
    let pairs: Vec<ImagePair> = read_jsonl(&a.pairs)?;
    let ctx = pipeline_context(
        cfg,
        a.image_root.clone().unwrap_or_else(|| parent_dir(&a.pairs)),
    )?;
    let replay = replay_backend(a.responses.as_deref())?;
    let stop = AtomicBool::new(false);
    let mut finished = 0;
    run_pairs(&pairs, &replay, &ctx, &stop, |r| {
        if r.status.is_ok() {
            finished += 1;
        }
    });
    let pending = replay.take_pending();
    let file = File::create(&a.out).with_context(|| a.out.display().to_string())?;
    emit_batch(&pending, BufWriter::new(file))?;
    eprintln!(
        "{} requests written to {}; {finished} of {} pairs already complete",
        pending.len(),
        a.out.display(),
        pairs.len()
    );
    Ok(Outcome::Done)
}

fn cmd_ingest_batch(a: IngestBatchArgs) -> Result<Outcome> {
    let expected: Option<Vec<String>> = match &a.requests {
        Some(p) => {
            let f = File::open(p).with_context(|| p.display().to_string())?;
            Some(
                read_batch_requests(BufReader::new(f))?
                    .into_iter()
                    .map(|r| r.request_id)
                    .collect(),
            )
        }
        None => None,
    };
    let f = File::open(&a.input).with_context(|| a.input.display().to_string())?;
    let ingest = ingest_batch_results(BufReader::new(f), expected.as_deref())?;

    let mut store: BTreeMap<String, ChatResponse> = BTreeMap::new();
    if a.out.exists() {
        let existing: Vec<ChatResponse> = read_jsonl(&a.out)?;
        store.extend(existing.into_iter().map(|r| (r.request_id.clone(), r)));
    }
    let added = ingest.responses.len();
    store.extend(ingest.responses);
    let merged: Vec<ChatResponse> = store.into_values().collect();
    write_jsonl(&a.out, &merged)?;

    for (id, msg) in &ingest.failed {
        eprintln!("failed {id}: {msg}");
    }
    for id in &ingest.missing {
        eprintln!("missing {id}");
    }
    for id in &ingest.unexpected {
        eprintln!("unexpected {id}");
    }
    eprintln!(
        "{added} responses ingested ({} failed, {} missing); store now holds {}",
        ingest.failed.len(),
        ingest.missing.len(),
        merged.len()
    );
    Ok(if ingest.failed.is_empty() && ingest.missing.is_empty() {
        Outcome::Done
    } else {
        Outcome::Partial
    })
}

fn cmd_stats(a: StatsArgs) -> Result<Outcome> {
    let manifest: DatasetManifest = read_json(&a.manifest)?;
    manifest.validate(None)?;
    let mut triplets: Vec<CirTriplet> = Vec::new();
    for p in &a.triplets {
        triplets.extend(read_jsonl::<CirTriplet>(p)?);
    }
    let mut usage: Vec<UsageRecord> = Vec::new();
    for p in &a.usage {
        usage.extend(read_jsonl::<UsageRecord>(p)?);
    }
    let stats = compute_stats(&manifest, &triplets, &usage)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{}", render_stats(&stats));
    }
    Ok(Outcome::Done)
}

fn cmd_eval(a: EvalArgs, cfg: &RunConfig) -> Result<Outcome> {
    let queries: Vec<RankedQuery> = read_jsonl(&a.run)?;
    let relevance: Vec<RelevanceRecord> = read_jsonl(&a.relevance)?;
    let run = RetrievalRun::new(queries, relevance)?;
    let rep = report(&run, &cfg.eval.ks)?;
    let text = serde_json::to_string_pretty(&rep)?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_json(out, &rep)?;
    }
    Ok(Outcome::Done)
}

fn guess_kind(path: &Path) -> Result<FileKind> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    if let Ok(v) = serde_json::from_str::<Value>(&text) {
        if v.get("splits").is_some() {
            return Ok(FileKind::Manifest);
        }
    }
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        bail!("{} is empty; pass --kind", path.display());
    };
    let v: Value = serde_json::from_str(first)
        .with_context(|| format!("{}: first line is not JSON", path.display()))?;
    let has = |k: &str| v.get(k).is_some();
    Ok(if has("caption") {
        FileKind::Triplets
    } else if has("vec") {
        FileKind::Embeddings
    } else if has("phash") {
        FileKind::Hashes
    } else if has("atomic_captions") {
        FileKind::Results
    } else if has("query") && has("target") {
        FileKind::Pairs
    } else if has("ranking") {
        FileKind::Run
    } else if has("relevant") {
        FileKind::Relevance
    } else if has("request_id") {
        FileKind::Usage
    } else if has("path") {
        FileKind::Corpus
    } else {
        bail!(
            "cannot tell what kind of file {} is; pass --kind",
            path.display()
        )
    })
}

// Parses every line as `T`, collecting per-line problems instead of stopping.
fn lines_as<T: serde::de::DeserializeOwned>(
    path: &Path,
    problems: &mut Vec<String>,
) -> Result<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push((i + 1, v)),
            Err(e) => problems.push(format!("line {}: {e}", i + 1)),
        }
    }
    Ok(out)
}

fn duplicates<'a>(ids: impl Iterator<Item = (usize, &'a str)>, problems: &mut Vec<String>) {
    let mut seen = HashSet::new();
    for (line, id) in ids {
        if !seen.insert(id) {
            problems.push(format!("line {line}: duplicate id {id:?}"));
        }
    }
}

fn cmd_validate(a: ValidateArgs, cfg: &RunConfig) -> Result<Outcome> {
    let kind = match a.kind {
        Some(k) => k,
        None => guess_kind(&a.input)?,
    };
    let mut problems: Vec<String> = Vec::new();
    let path = a.input.as_path();
    let records = match kind {
        FileKind::Triplets => {
            let vocab = match (&cfg.permute.vocab, &cfg.permute.merges) {
                (Some(_), Some(_)) => Some(Arc::new(load_vocab(cfg)?)),
                _ => None,
            };
            let vcfg = validation_config(cfg, vocab);
            let rows = lines_as::<CirTriplet>(path, &mut problems)?;
            for (line, t) in &rows {
                let v = validate_triplet(t, &vcfg);
                if !v.is_empty() {
                    let codes: Vec<&str> = v.iter().map(|x| x.code()).collect();
                    problems.push(format!("line {line}: {}", codes.join(", ")));
                }
            }
            rows.len()
        }
        FileKind::Embeddings => {
            let rows = lines_as::<EmbeddingRecord>(path, &mut problems)?;
            duplicates(
                rows.iter().map(|(l, r)| (*l, r.image_id.as_str())),
                &mut problems,
            );
            let dim = rows.first().map(|(_, r)| r.dim());
            for (line, r) in &rows {
                if r.image_id.is_empty() {
                    problems.push(format!("line {line}: empty id"));
                }
                if Some(r.dim()) != dim || r.dim() == 0 {
                    problems.push(format!(
                        "line {line}: dimension {} differs from {}",
                        r.dim(),
                        dim.unwrap_or(0)
                    ));
                }
                if r.vector.iter().any(|x| !x.is_finite()) {
                    problems.push(format!("line {line}: non-finite value"));
                } else if r.vector.iter().all(|x| *x == 0.0) {
                    problems.push(format!("line {line}: zero vector"));
                }
            }
            rows.len()
        }
        FileKind::Pairs => {
            let rows = lines_as::<ImagePair>(path, &mut problems)?;
            duplicates(
                rows.iter().map(|(l, p)| (*l, p.pair_id.as_str())),
                &mut problems,
            );
            for (line, p) in &rows {
                if p.pair_id != pair_id(&p.query.id, &p.target.id) {
                    problems.push(format!(
                        "line {line}: pair_id does not match query and target"
                    ));
                }
                if p.query.id == p.target.id {
                    problems.push(format!("line {line}: query and target are the same image"));
                }
                if !p.emb_similarity.is_finite() {
                    problems.push(format!("line {line}: non-finite emb_sim"));
                }
            }
            rows.len()
        }
        FileKind::Hashes => {
            let rows = lines_as::<HashRecord>(path, &mut problems)?;
            duplicates(rows.iter().map(|(l, r)| (*l, r.id.as_str())), &mut problems);
            for (line, r) in &rows {
                if let Err(e) = r.hash() {
                    problems.push(format!("line {line}: {e}"));
                }
            }
            rows.len()
        }
        FileKind::Results => {
            let rows = lines_as::<PairGenerationResult>(path, &mut problems)?;
            duplicates(
                rows.iter().map(|(l, r)| (*l, r.pair_id.as_str())),
                &mut problems,
            );
            for (line, r) in &rows {
                if r.pair_id != pair_id(&r.query_id, &r.target_id) {
                    problems.push(format!(
                        "line {line}: pair_id does not match query and target"
                    ));
                }
                if r.atomic_captions.iter().any(|c| c.trim().is_empty()) {
                    problems.push(format!("line {line}: empty caption"));
                }
            }
            rows.len()
        }
        FileKind::Usage => lines_as::<UsageRecord>(path, &mut problems)?.len(),
        FileKind::Run => {
            let rows = lines_as::<RankedQuery>(path, &mut problems)?;
            duplicates(
                rows.iter().map(|(l, r)| (*l, r.query_id.as_str())),
                &mut problems,
            );
            rows.len()
        }
        FileKind::Relevance => {
            let rows = lines_as::<RelevanceRecord>(path, &mut problems)?;
            duplicates(
                rows.iter().map(|(l, r)| (*l, r.query_id.as_str())),
                &mut problems,
            );
            rows.len()
        }
        FileKind::Corpus => {
            let rows = lines_as::<ImageRef>(path, &mut problems)?;
            duplicates(rows.iter().map(|(l, r)| (*l, r.id.as_str())), &mut problems);
            rows.len()
        }
        FileKind::Manifest => {
            let m: DatasetManifest = read_json(path)?;
            if let Err(e) = m.validate(None) {
                problems.push(e.to_string());
            }
            1
        }
    };
    for p in &problems {
        println!("{}: {p}", path.display());
    }
    println!("{} records, {} violations", records, problems.len());
    Ok(if problems.is_empty() {
        Outcome::Done
    } else {
        Outcome::Partial
    })
}
