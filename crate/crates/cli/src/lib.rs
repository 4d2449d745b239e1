//! The `chronicle` command line: one subcommand per pipeline stage.

pub mod config;
pub mod manifest;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chronicle_core::metrics::{evaluate, group_histories, reference_evaluate, render_table};
use chronicle_core::model::{load_model, save_model, train};
use chronicle_core::synthgen::{build_world, sample_population};
use chronicle_core::timeline::{
    aggregate_events, apply_frequency_filters, build_timelines, corpus_stats, read_demographics, read_events,
    read_timelines, split_patients, write_demographics, write_events, write_timelines,
};
use chronicle_core::{AnnotationEvent, Model, Ontology, Token};
use chronicle_service::{resolve_bind, Service, BIND_ENV};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use manifest::{write_atomic, ManifestBuilder};

/// Writes to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! sayln {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Marks errors that should exit with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "chronicle", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CHRONICLE_GIT_DESCRIBE"), ")"))]
#[command(about = "Forecast biomedical concepts from patient timelines")]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (1 = single-threaded).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic world and population.
    Synth(SynthArgs),
    /// Filter, prune and bucket events into timelines.
    BuildTimelines(BuildArgs),
    /// Patient-level train/test split of built timelines.
    Split(SplitArgs),
    /// Train a model on timelines.
    Train(TrainArgs),
    /// Score a model's forecasts on test timelines.
    Evaluate(EvalArgs),
    /// Continue a prompt by top-k sampling.
    Generate(GenerateArgs),
    /// Corpus statistics by sex, ethnicity and age band.
    Stats(StatsArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long)]
    pub mean_events: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub chronic: Option<f64>,
    #[arg(long)]
    pub dominance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Directory holding events.jsonl, demographics.jsonl and ontology.tsv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub demographics: Option<PathBuf>,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bucket_days: Option<u32>,
    #[arg(long)]
    pub max_concepts: Option<usize>,
    #[arg(long)]
    pub min_concepts: Option<usize>,
    #[arg(long)]
    pub min_global: Option<usize>,
    #[arg(long)]
    pub min_patient: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub timelines: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub timelines: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub timelines: PathBuf,
    /// Frequency-filtered events of the whole corpus (the patients' histories).
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Also run the brute-force scorer and fail on any difference.
    #[arg(long)]
    pub reference: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated token spellings, e.g. "AGE:43,ETH:Black,SEX:F".
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// New tokens to sample.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Concept names for the printout.
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub timelines: PathBuf,
    #[arg(long)]
    pub demographics: PathBuf,
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub ontology: PathBuf,
    /// Listen address; falls back to CHRONICLE_BIND, then 127.0.0.1:8080.
    #[arg(long)]
    pub bind: Option<String>,
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "info" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    let threads = cli.threads.or(cfg.threads);
    cfg.threads = threads;
    let pool = match threads {
        Some(0) => return Err(UsageError("--threads must be at least 1".into()).into()),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?,
        None => rayon::ThreadPoolBuilder::new().build()?,
    };
    tracing::info!(threads = pool.current_num_threads(), seed = cfg.seed(), "starting");
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::BuildTimelines(a) => build(cfg, a),
        Command::Split(a) => split(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Evaluate(a) => evaluate_cmd(cfg, a),
        Command::Generate(a) => generate(cfg, a),
        Command::Stats(a) => stats(cfg, a),
        Command::Serve(a) => serve(a),
    })
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn usage(msg: impl std::fmt::Display) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_ontology(path: &Path) -> anyhow::Result<Ontology> {
    Ontology::load_path(path).with_context(|| format!("loading ontology {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> anyhow::Result<()> {
    let p = &mut cfg.synth;
    set(&mut p.n_patients, a.patients);
    set(&mut p.n_concepts, a.concepts);
    set(&mut p.mean_events, a.mean_events);
    set(&mut p.hierarchy_depth, a.depth);
    set(&mut p.chronic_fraction, a.chronic);
    set(&mut p.dominance, a.dominance);
    p.validate().map_err(usage)?;
    let mut m = ManifestBuilder::new("synth", cfg.seed(), cfg.threads, cfg.to_json()?);

    let world = build_world(&cfg.synth)?;
    let pop = sample_population(&world, cfg.synth.n_patients, cfg.synth.seed);
    out_dir(&a.out)?;
    let world_path = a.out.join("world.json");
    world.save(&world_path)?;
    let onto_path = a.out.join("ontology.tsv");
    let mut buf = Vec::new();
    world.ontology()?.write(&mut buf)?;
    write_atomic(&onto_path, &buf)?;
    let events_path = a.out.join("events.jsonl");
    write_events(&events_path, &pop.events)?;
    let demo_path = a.out.join("demographics.jsonl");
    write_demographics(&demo_path, &pop.demographics)?;
    for p in [&world_path, &onto_path, &events_path, &demo_path] {
        m.output(p);
    }
    m.finish(&a.out)?;
    sayln!("{} patients, {} events -> {}", pop.demographics.len(), pop.events.len(), a.out.display());
    Ok(())
}

fn pick(explicit: Option<PathBuf>, data: &Option<PathBuf>, name: &str, flag: &str) -> anyhow::Result<PathBuf> {
    explicit
        .or_else(|| data.as_ref().map(|d| d.join(name)))
        .ok_or_else(|| usage(format!("--{flag} or --data is required")))
}

fn build(mut cfg: RunConfig, a: BuildArgs) -> anyhow::Result<()> {
    let b = &mut cfg.build;
    set(&mut b.bucket_days, a.bucket_days);
    set(&mut b.max_concepts, a.max_concepts);
    set(&mut b.min_concepts, a.min_concepts);
    set(&mut b.min_global_count, a.min_global);
    set(&mut b.min_patient_count, a.min_patient);
    b.validate().map_err(usage)?;
    let events_path = pick(a.events, &a.data, "events.jsonl", "events")?;
    let demo_path = pick(a.demographics, &a.data, "demographics.jsonl", "demographics")?;
    let onto_path = pick(a.ontology, &a.data, "ontology.tsv", "ontology")?;
    let mut m = ManifestBuilder::new("build-timelines", cfg.seed(), cfg.threads, cfg.to_json()?);
    m.input("events", &events_path).input("demographics", &demo_path).input("ontology", &onto_path);

    let ontology = load_ontology(&onto_path)?;
    let events = read_events(&events_path).with_context(|| format!("reading {}", events_path.display()))?;
    let unknown: BTreeSet<&str> =
        events.iter().filter(|e| !ontology.contains(&e.concept)).map(|e| e.concept.as_str()).collect();
    if !unknown.is_empty() {
        bail!("{} concepts are missing from the ontology, e.g. {:?}", unknown.len(), unknown.first().unwrap());
    }
    let demographics = read_demographics(&demo_path).with_context(|| format!("reading {}", demo_path.display()))?;
    let records = apply_frequency_filters(aggregate_events(events, &demographics)?, &cfg.build);
    let timelines = build_timelines(&records, &ontology, &cfg.build);

    out_dir(&a.out)?;
    let tl_path = a.out.join("timelines.jsonl");
    write_timelines(&tl_path, &timelines)?;
    let filtered: Vec<AnnotationEvent> = records.iter().flat_map(|r| r.events.iter().cloned()).collect();
    let hist_path = a.out.join("filtered_events.jsonl");
    write_events(&hist_path, &filtered)?;
    m.output(&tl_path).output(&hist_path);
    m.finish(&a.out)?;
    sayln!("{} timelines from {} patients -> {}", timelines.len(), records.len(), tl_path.display());
    Ok(())
}

fn split(mut cfg: RunConfig, a: SplitArgs) -> anyhow::Result<()> {
    set(&mut cfg.split.test_fraction, a.test_fraction);
    let timelines = read_timelines(&a.timelines).with_context(|| format!("reading {}", a.timelines.display()))?;
    let ids: Vec<String> = timelines.iter().map(|t| t.patient_id.clone()).collect();
    let test_ids = split_patients(&ids, cfg.split.test_fraction, cfg.seed()).map_err(usage)?;
    let (test, train): (Vec<_>, Vec<_>) = timelines.into_iter().partition(|t| test_ids.contains(&t.patient_id));
    let mut m = ManifestBuilder::new("split", cfg.seed(), cfg.threads, cfg.to_json()?);
    m.input("timelines", &a.timelines);
    out_dir(&a.out)?;
    let (train_path, test_path) = (a.out.join("train.jsonl"), a.out.join("test.jsonl"));
    write_timelines(&train_path, &train)?;
    write_timelines(&test_path, &test)?;
    m.output(&train_path).output(&test_path);
    m.finish(&a.out)?;
    sayln!("train {} / test {} fragments", train.len(), test.len());
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> anyhow::Result<()> {
    let mc = &mut cfg.model;
    set(&mut mc.n_layers, a.layers);
    set(&mut mc.n_heads, a.heads);
    set(&mut mc.embedding_dim, a.dim);
    set(&mut mc.context_len, a.context);
    set(&mut mc.feedforward_dim, a.ff);
    set(&mut mc.dropout, a.dropout);
    mc.validate().map_err(usage)?;
    let tc = &mut cfg.train;
    set(&mut tc.epochs, a.epochs);
    set(&mut tc.learning_rate, a.lr);
    set(&mut tc.batch_size, a.batch_size);
    tc.validate().map_err(usage)?;
    let corpus = read_timelines(&a.timelines).with_context(|| format!("reading {}", a.timelines.display()))?;
    let mut m = ManifestBuilder::new("train", cfg.seed(), cfg.threads, cfg.to_json()?);
    m.input("timelines", &a.timelines);

    let mut model = Model::for_corpus(cfg.model.clone(), &corpus, cfg.train.seed)?;
    tracing::info!(params = model.network.params().len(), fragments = corpus.len(), "training");
    let history = train(&mut model, &corpus, &cfg.train)?;
    save_model(&model, &a.out)?;
    let hist_path = a.out.join("history.json");
    write_json(&hist_path, &history)?;
    for f in ["config.json", "vocab.json", "weights.bin"] {
        m.output(&a.out.join(f));
    }
    m.output(&hist_path);
    m.finish(&a.out)?;
    sayln!(
        "{} steps, final loss {:.4} -> {}",
        history.steps,
        history.epoch_loss.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(cfg: RunConfig, a: EvalArgs) -> anyhow::Result<()> {
    cfg.eval.validate().map_err(usage)?;
    let model = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let ontology = load_ontology(&a.ontology)?;
    let test = read_timelines(&a.timelines).with_context(|| format!("reading {}", a.timelines.display()))?;
    let histories = group_histories(&read_events(&a.events).with_context(|| format!("reading {}", a.events.display()))?);
    let mut m = ManifestBuilder::new("evaluate", cfg.seed(), cfg.threads, cfg.to_json()?);
    m.input("model", &a.model).input("timelines", &a.timelines).input("events", &a.events).input("ontology", &a.ontology);

    let report = evaluate(&model, &ontology, &test, &histories, &cfg.eval)?;
    out_dir(&a.out)?;
    let json_path = a.out.join("report.json");
    write_atomic(&json_path, (report.to_json()? + "\n").as_bytes())?;
    let table = render_table(&report);
    let txt_path = a.out.join("report.txt");
    write_atomic(&txt_path, table.as_bytes())?;
    m.output(&json_path).output(&txt_path);
    say!("{table}");

    if a.reference {
        let slow = reference_evaluate(&model, &ontology, &test, &histories, &cfg.eval)?;
        if slow != report {
            m.finish(&a.out)?;
            bail!("fast and reference metrics disagree");
        }
        sayln!("reference scorer agrees");
    }
    m.finish(&a.out)?;
    Ok(())
}

/// Parses a comma-separated prompt; a leading block of demographic tokens is
/// put into sex, ethnicity, age order.
pub fn parse_prompt(text: &str) -> anyhow::Result<Vec<Token>> {
    let mut tokens: Vec<Token> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, s)| s.parse::<Token>().map_err(|e| usage(format!("prompt token {i}: {e}"))))
        .collect::<anyhow::Result<_>>()?;
    if tokens.is_empty() {
        return Err(usage("empty prompt"));
    }
    let demo = tokens.iter().take_while(|t| matches!(t, Token::Sex(_) | Token::Ethnicity(_) | Token::Age(_))).count();
    tokens[..demo].sort_by_key(|t| match t {
        Token::Sex(_) => 0,
        Token::Ethnicity(_) => 1,
        _ => 2,
    });
    Ok(tokens)
}

fn generate(mut cfg: RunConfig, a: GenerateArgs) -> anyhow::Result<()> {
    let sc = &mut cfg.sampler;
    set(&mut sc.top_k, a.top_k);
    set(&mut sc.max_new_tokens, a.steps);
    set(&mut sc.temperature, a.temperature);
    sc.validate().map_err(usage)?;
    let prompt = parse_prompt(&a.prompt)?;
    let model = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let ontology = a.ontology.as_deref().map(load_ontology).transpose()?;
    let indices = model.encode(&prompt);
    if let Some(pos) = indices.iter().position(|&i| i == chronicle_core::model::UNK) {
        return Err(usage(format!("prompt token {pos} ({}) is not in the vocabulary", prompt[pos])));
    }
    let g = model.generate(&indices, &cfg.sampler)?;

    let lines: Vec<String> = g
        .tokens
        .iter()
        .map(|t| {
            let spelling = model.vocab.spelling(t.index);
            let name = model
                .vocab
                .token(t.index)
                .and_then(Token::concept)
                .and_then(|c| ontology.as_ref()?.get(c))
                .map(|info| format!("  {}", info.name))
                .unwrap_or_default();
            format!("{} {spelling}{name}", if t.generated { "+" } else { " " })
        })
        .collect();
    let text = lines.join("\n") + "\n";
    say!("{text}");

    if let Some(out) = &a.out {
        let mut m = ManifestBuilder::new("generate", cfg.seed(), cfg.threads, cfg.to_json()?);
        m.input("model", &a.model);
        out_dir(out)?;
        let spelled: Vec<serde_json::Value> = g
            .tokens
            .iter()
            .map(|t| serde_json::json!({"token": model.vocab.spelling(t.index), "generated": t.generated}))
            .collect();
        let path = out.join("generation.json");
        write_json(&path, &spelled)?;
        m.output(&path);
        m.finish(out)?;
    }
    Ok(())
}

fn stats(cfg: RunConfig, a: StatsArgs) -> anyhow::Result<()> {
    let timelines = read_timelines(&a.timelines).with_context(|| format!("reading {}", a.timelines.display()))?;
    let demographics =
        read_demographics(&a.demographics).with_context(|| format!("reading {}", a.demographics.display()))?;
    let ontology = load_ontology(&a.ontology)?;
    let s = corpus_stats(&timelines, &demographics, &ontology);
    let text = serde_json::to_string_pretty(&s)? + "\n";
    say!("{text}");
    if let Some(out) = &a.out {
        let mut m = ManifestBuilder::new("stats", cfg.seed(), cfg.threads, cfg.to_json()?);
        m.input("timelines", &a.timelines).input("demographics", &a.demographics).input("ontology", &a.ontology);
        out_dir(out)?;
        let path = out.join("stats.json");
        write_atomic(&path, text.as_bytes())?;
        m.output(&path);
        m.finish(out)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let env = std::env::var(BIND_ENV).ok();
    let bind = resolve_bind(a.bind.as_deref(), env.as_deref());
    let service = Service::load(&a.model, &a.ontology)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(chronicle_service::serve(service, &bind)).with_context(|| format!("serving on {bind}"))?;
    Ok(())
}
