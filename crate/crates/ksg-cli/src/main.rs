//! `ksg`: construct and evaluate Knowledge Synthesis Graphs from annotation
//! corpora. Configuration comes from a TOML/JSON file plus flag overrides;
//! flags win.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ksg_core::corpus::CorpusFormat;
use ksg_core::graph::ExportFormat;
use ksg_core::pipeline::{
    self, BackendChoice, IngestSummary, PipelineConfig, PipelineError, RunSummary,
};
use ksg_core::stage2::ContextMode;
use ksg_core::store::RunStore;
use ksg_core::VersionTag;

#[derive(Parser)]
#[command(
    name = "ksg",
    version,
    about = "Knowledge Synthesis Graph pipeline: ingest annotations, run the staged LLM pipeline, evaluate, and export"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a corpus without running the pipeline.
    IngestCheck(IngestArgs),
    /// Run stages 1-3 and write all artifacts to the run store.
    Pipeline(PipelineArgs),
    /// Evaluate a run's stage-1 labels against expert gold codings.
    Eval(EvalArgs),
    /// Cross-model execution rate and linking consistency over runs.
    Consistency(ConsistencyArgs),
    /// Export a run's graph as json, graphml, or dot.
    Export(ExportArgs),
    /// Structured delta between two runs' graphs.
    Diff(DiffArgs),
    /// Inspect the run store.
    Runs(RunsArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Annotation corpus (.json or .csv).
    #[arg(long)]
    corpus: PathBuf,
    /// Force the corpus format instead of inferring from the extension.
    #[arg(long, value_parser = ["json", "csv"])]
    format: Option<String>,
    /// JSON file mapping canonical CSV columns to source column names.
    #[arg(long)]
    column_map: Option<PathBuf>,
}

#[derive(Args, Default)]
struct PipelineArgs {
    /// TOML or JSON configuration file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    column_map: Option<PathBuf>,
    #[arg(long)]
    reading_text: Option<PathBuf>,
    #[arg(long)]
    reading_summary: Option<PathBuf>,
    #[arg(long)]
    reading_prompts: Option<PathBuf>,
    /// Stage-1 prompt version.
    #[arg(long, value_parser = ["p_base", "p1", "p2"])]
    stage1_prompt: Option<String>,
    /// Stage-3 coding scheme (and prompt version).
    #[arg(long, value_parser = ["p_base", "p1", "p2", "p3"])]
    scheme: Option<String>,
    /// Stage-2 reading context mode.
    #[arg(long, value_parser = ["abstract", "summary", "fulltext", "summary_instructor"])]
    context_mode: Option<String>,
    /// Comma-separated model ids; stages 1-2 use the first.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Backend: live, replay, or stub (default: $KSG_BACKEND, then stub).
    #[arg(long, value_parser = ["live", "replay", "stub"])]
    backend: Option<String>,
    /// Source run id when --backend replay.
    #[arg(long)]
    replay_run: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    min_nodes: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
    /// Reply-context ancestors included per annotation.
    #[arg(long)]
    depth_limit: Option<usize>,
    #[arg(long)]
    store_root: Option<PathBuf>,
    /// Load prompt templates and schemes from this directory instead of
    /// the builtins (layout: prompts/stageN/tag.txt, schemes/*.json).
    #[arg(long)]
    prompts_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run id to evaluate.
    #[arg(long)]
    run: String,
    /// Gold codings CSV (annotation_id,label).
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value = "runs")]
    store_root: PathBuf,
}

#[derive(Args)]
struct ConsistencyArgs {
    /// Two or more run ids (repeat the flag or comma-separate).
    #[arg(long, required = true, value_delimiter = ',')]
    runs: Vec<String>,
    #[arg(long, default_value = "runs")]
    store_root: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: String,
    #[arg(long, value_parser = ["json", "graphml", "dot"])]
    format: String,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    store_root: PathBuf,
}

#[derive(Args)]
struct DiffArgs {
    #[arg(long)]
    run_a: String,
    #[arg(long)]
    run_b: String,
    #[arg(long, default_value = "runs")]
    store_root: PathBuf,
}

#[derive(Args)]
struct RunsArgs {
    #[command(subcommand)]
    command: RunsCommand,
}

#[derive(Subcommand)]
enum RunsCommand {
    /// List run ids with their manifests.
    List {
        #[arg(long, default_value = "runs")]
        store_root: PathBuf,
    },
}

/// File-configuration sections; every field optional so flags can fill in.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    corpus: CorpusSection,
    #[serde(default)]
    reading: ReadingSection,
    #[serde(default)]
    pipeline: PipelineSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusSection {
    path: Option<PathBuf>,
    format: Option<String>,
    column_map: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadingSection {
    text: Option<PathBuf>,
    summary: Option<PathBuf>,
    instructor_prompts: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineSection {
    stage1_prompt: Option<String>,
    scheme: Option<String>,
    context_mode: Option<String>,
    models: Option<Vec<String>>,
    backend: Option<String>,
    replay_run: Option<String>,
    parallelism: Option<usize>,
    min_nodes: Option<usize>,
    max_nodes: Option<usize>,
    depth_limit: Option<usize>,
    store_root: Option<PathBuf>,
    prompts_dir: Option<PathBuf>,
    temperature: Option<f64>,
    max_output_tokens: Option<u32>,
    seed: Option<u64>,
}

fn load_file_config(path: &Path) -> Result<FileConfig> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&raw).with_context(|| format!("invalid JSON config {}", path.display()))
    } else {
        toml::from_str(&raw).with_context(|| format!("invalid TOML config {}", path.display()))
    }
}

fn parse_format(value: &str) -> CorpusFormat {
    if value.eq_ignore_ascii_case("csv") {
        CorpusFormat::Csv
    } else {
        CorpusFormat::Json
    }
}

/// Merge config file and flags into a pipeline configuration. Flags win;
/// the gateway env vars fill remaining gaps.
fn resolve_pipeline_config(args: &PipelineArgs) -> Result<PipelineConfig> {
    let file = match &args.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };
    let corpus_path = args
        .corpus
        .clone()
        .or(file.corpus.path)
        .context("no corpus path given (use --corpus or [corpus] path in the config)")?;
    let reading_text = args
        .reading_text
        .clone()
        .or(file.reading.text)
        .context("no reading text given (use --reading-text or [reading] text in the config)")?;

    let mut config = PipelineConfig::new(corpus_path, reading_text);
    config.corpus_format = file.corpus.format.as_deref().map(parse_format);
    config.column_map_path = args.column_map.clone().or(file.corpus.column_map);
    config.reading_summary = args.reading_summary.clone().or(file.reading.summary);
    config.reading_prompts = args.reading_prompts.clone().or(file.reading.instructor_prompts);
    if let Some(tag) = args.stage1_prompt.as_deref().or(file.pipeline.stage1_prompt.as_deref()) {
        config.stage1_version = VersionTag::from_str(tag)?;
    }
    if let Some(tag) = args.scheme.as_deref().or(file.pipeline.scheme.as_deref()) {
        config.scheme_tag = VersionTag::from_str(tag)?;
    }
    if let Some(mode) = args.context_mode.as_deref().or(file.pipeline.context_mode.as_deref()) {
        config.context_mode = ContextMode::from_str(mode)?;
    }
    if !args.models.is_empty() {
        config.model_ids = args.models.clone();
    } else if let Some(models) = file.pipeline.models {
        config.model_ids = models;
    }
    let backend = args
        .backend
        .clone()
        .or(file.pipeline.backend)
        .or_else(|| std::env::var("KSG_BACKEND").ok())
        .unwrap_or_else(|| "stub".to_string());
    config.backend = BackendChoice::from_str(&backend)?;
    config.replay_run = args.replay_run.clone().or(file.pipeline.replay_run);
    if let Some(p) = args.parallelism.or(file.pipeline.parallelism) {
        config.parallelism = p;
    }
    if let Some(v) = args.min_nodes.or(file.pipeline.min_nodes) {
        config.min_nodes = v;
    }
    if let Some(v) = args.max_nodes.or(file.pipeline.max_nodes) {
        config.max_nodes = v;
    }
    if let Some(v) = args.depth_limit.or(file.pipeline.depth_limit) {
        config.depth_limit = v;
    }
    if let Some(root) = args.store_root.clone().or(file.pipeline.store_root) {
        config.store_root = root;
    }
    config.prompts_dir = args.prompts_dir.clone().or(file.pipeline.prompts_dir);
    if let Some(t) = file.pipeline.temperature {
        config.temperature = t;
    }
    if let Some(m) = file.pipeline.max_output_tokens {
        config.max_output_tokens = m;
    }
    if let Some(s) = file.pipeline.seed {
        config.seed = Some(s);
    }
    Ok(config)
}

fn print_ingest(summary: &IngestSummary) {
    println!("annotations: {}", summary.annotations);
    println!("replies:     {}", summary.replies);
    println!("authors:     {}", summary.authors);
    println!("documents:   {}", summary.documents);
    println!("fingerprint: {}", summary.corpus_fingerprint);
    println!("ok");
}

fn print_run_summary(run: &RunSummary) {
    println!(
        "run {} model={} stage1[substantive={} non_substantive={} invalid={}] nodes={} stage3[linked={} uncategorized={} invalid={}] graph={}",
        run.run_id,
        run.model_id,
        run.stage1_counts.substantive,
        run.stage1_counts.non_substantive,
        run.stage1_counts.invalid,
        run.node_count,
        run.stage3_counts.linked,
        run.stage3_counts.uncategorized,
        run.stage3_counts.invalid,
        run.graph_path.display(),
    );
}

fn cmd_pipeline(args: &PipelineArgs) -> Result<()> {
    let config = resolve_pipeline_config(args)?;
    let output = pipeline::run_pipeline(&config)?;
    for run in &output.runs {
        print_run_summary(run);
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let store = RunStore::new(&args.store_root);
    let report = pipeline::evaluate_agreement(&store, &args.run, &args.gold)?;
    println!("prompt_version: {}", report.prompt_version);
    println!("model_id:       {}", report.model_id);
    println!("n_items:        {}", report.n_items);
    println!("kappa:          {:.4}", report.kappa);
    println!("macro_f1:       {:.4}", report.macro_f1);
    println!("weighted_f1:    {:.4}", report.weighted_f1);
    if report.n_skipped_no_gold > 0 || report.n_skipped_invalid > 0 {
        println!(
            "skipped:        {} without gold, {} invalid outputs",
            report.n_skipped_no_gold, report.n_skipped_invalid
        );
    }
    if report.n_gold_unmatched > 0 {
        println!(
            "warning: {} gold coding(s) reference ids absent from the run",
            report.n_gold_unmatched
        );
    }
    Ok(())
}

fn cmd_consistency(args: &ConsistencyArgs) -> Result<()> {
    if args.runs.len() < 2 {
        bail!("consistency needs at least two run ids");
    }
    let store = RunStore::new(&args.store_root);
    let report = pipeline::evaluate_consistency(&store, &args.runs)?;
    println!("scheme: {}  items: {}", report.scheme_id, report.n_items);
    for model in &report.model_ids {
        println!("  {:<14} execution_rate={:.4}", model, report.execution_rate_per_model[model]);
    }
    println!("linking_consistency: {:.4}", report.linking_consistency);
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let store = RunStore::new(&args.store_root);
    let format = ExportFormat::parse(&args.format).context("unknown export format")?;
    let bytes = pipeline::export_run(&store, &args.run, format)?;
    match &args.out {
        Some(path) => std::fs::write(path, &bytes)
            .with_context(|| format!("cannot write {}", path.display()))?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
        }
    }
    Ok(())
}

fn cmd_diff(args: &DiffArgs) -> Result<()> {
    let store = RunStore::new(&args.store_root);
    let delta = pipeline::diff_runs(&store, &args.run_a, &args.run_b)?;
    if delta.is_empty() {
        println!("graphs are identical");
    } else {
        println!("{}", serde_json::to_string_pretty(&delta)?);
    }
    Ok(())
}

fn cmd_runs_list(store_root: &Path) -> Result<()> {
    let store = RunStore::new(store_root);
    let manifests = store.list_runs()?;
    if manifests.is_empty() {
        println!("no runs in {}", store_root.display());
        return Ok(());
    }
    for m in manifests {
        println!(
            "{}  created={}  backend={}  scheme={}  models={}",
            m.run_id,
            m.created_at,
            m.backend_mode,
            m.scheme_id,
            m.model_ids.join("+"),
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestCheck(args) => {
            let mut config = PipelineConfig::new(&args.corpus, "unused-reading.txt");
            config.corpus_format = args.format.as_deref().map(parse_format);
            config.column_map_path = args.column_map.clone();
            let summary = pipeline::ingest_check(&config)?;
            print_ingest(&summary);
            Ok(())
        }
        Command::Pipeline(args) => cmd_pipeline(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Consistency(args) => cmd_consistency(&args),
        Command::Export(args) => cmd_export(&args),
        Command::Diff(args) => cmd_diff(&args),
        Command::Runs(args) => match args.command {
            RunsCommand::List { store_root } => cmd_runs_list(&store_root),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Stage-2 failures abort the pipeline; per-item stage-1/3
            // failures are reported in run summaries instead.
            eprintln!("error: {err:#}");
            if let Some(PipelineError::Stage2(_)) = err.downcast_ref::<PipelineError>() {
                eprintln!("pipeline aborted in stage 2");
            }
            ExitCode::FAILURE
        }
    }
}
