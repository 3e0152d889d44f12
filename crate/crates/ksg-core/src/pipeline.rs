//! End-to-end orchestration: run the three stages against a configured
//! backend, persist every artifact to the run store, and drive the
//! store-level evaluation, export, and diff operations the CLI exposes.
//!
//! With several models configured, stages 1 and 2 execute once with the
//! first model and stage 3 executes per model; each model gets its own run
//! directory sharing corpus, reading, and node fingerprints, which is what
//! the cross-model consistency comparison requires.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    load_annotations_mapped, load_gold_codings, load_reading, Corpus, CorpusError, CorpusFormat,
    CsvColumnMap, Reading,
};
use crate::eval::{
    agreement_report, consistency_report, emit_report, AgreementReport, ConsistencyReport, EvalError,
    EvalReport, ReportFormat,
};
use crate::gateway::{Backend, Gateway, GatewayError, RequestDefaults, StubBackend};
use crate::graph::{
    export, import_json, to_canonical_json, ExportError, ExportFormat, GraphDelta, GraphMetadata,
    ImportError, KnowledgeSynthesisGraph,
};
use crate::hashing::short_hash;
use crate::prompts::{PromptRegistry, RegistryError, VersionTag, STAGE1_SCHEME_ID};
use crate::stage1::{run_stage1, Stage1Counts, Stage1Error, Stage1Report};
use crate::stage2::{generate_nodes, ContextMode, Stage2Error, Stage2Report};
use crate::stage3::{assemble_graph, run_stage3, Stage3Counts, Stage3Error, Stage3Report};
use crate::store::{RecordKind, RunManifest, RunStore, StoreError};
use crate::timefmt::utc_now_rfc3339;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Live,
    Replay,
    Stub,
}

impl BackendChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendChoice::Live => "live",
            BackendChoice::Replay => "replay",
            BackendChoice::Stub => "stub",
        }
    }
}

impl FromStr for BackendChoice {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendChoice::Live),
            "replay" => Ok(BackendChoice::Replay),
            "stub" => Ok(BackendChoice::Stub),
            other => Err(PipelineError::Config(format!(
                "unknown backend '{other}' (expected live, replay, or stub)"
            ))),
        }
    }
}

/// Everything a pipeline invocation needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub corpus_path: PathBuf,
    /// None infers from the file extension.
    pub corpus_format: Option<CorpusFormat>,
    pub column_map_path: Option<PathBuf>,
    pub reading_text: PathBuf,
    pub reading_summary: Option<PathBuf>,
    pub reading_prompts: Option<PathBuf>,
    pub stage1_version: VersionTag,
    pub context_mode: ContextMode,
    pub scheme_tag: VersionTag,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub model_ids: Vec<String>,
    pub backend: BackendChoice,
    /// Source run id; required when `backend` is replay.
    pub replay_run: Option<String>,
    pub parallelism: usize,
    pub store_root: PathBuf,
    pub depth_limit: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
    /// Load templates/schemes from this directory instead of the builtins.
    pub prompts_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(corpus_path: impl Into<PathBuf>, reading_text: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            corpus_path: corpus_path.into(),
            corpus_format: None,
            column_map_path: None,
            reading_text: reading_text.into(),
            reading_summary: None,
            reading_prompts: None,
            stage1_version: VersionTag::P2,
            context_mode: ContextMode::SummaryPlusInstructor,
            scheme_tag: VersionTag::P3,
            min_nodes: 4,
            max_nodes: 10,
            model_ids: vec!["stub-alpha".to_string()],
            backend: BackendChoice::Stub,
            replay_run: None,
            parallelism: 2,
            store_root: PathBuf::from("runs"),
            depth_limit: 8,
            temperature: 0.0,
            max_output_tokens: 1024,
            seed: Some(0),
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("stage 1 failed: {0}")]
    Stage1(#[from] Stage1Error),
    #[error("stage 2 failed: {0}")]
    Stage2(#[from] Stage2Error),
    #[error("stage 3 failed: {0}")]
    Stage3(#[from] Stage3Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("graph import failed: {0}")]
    Import(#[from] ImportError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("runs are not comparable: {0}")]
    Incomparable(String),
}

/// Summary of one completed run (one stage-3 model).
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub model_id: String,
    pub stage1_counts: Stage1Counts,
    pub node_count: usize,
    pub stage3_counts: Stage3Counts,
    pub graph_path: PathBuf,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub runs: Vec<RunSummary>,
}

fn load_registry(config: &PipelineConfig) -> Result<PromptRegistry, PipelineError> {
    Ok(match &config.prompts_dir {
        Some(dir) => PromptRegistry::from_dir(dir)?,
        None => PromptRegistry::builtin(),
    })
}

fn load_corpus(config: &PipelineConfig) -> Result<Corpus, PipelineError> {
    let format = config.corpus_format.unwrap_or_else(|| CorpusFormat::from_path(&config.corpus_path));
    let column_map = match &config.column_map_path {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| {
                PipelineError::Config(format!("cannot read column map {}: {e}", path.display()))
            })?;
            Some(serde_json::from_slice::<CsvColumnMap>(&bytes).map_err(|e| {
                PipelineError::Config(format!("invalid column map {}: {e}", path.display()))
            })?)
        }
        None => None,
    };
    Ok(load_annotations_mapped(&config.corpus_path, format, column_map.as_ref())?)
}

fn build_backend(config: &PipelineConfig, store: &RunStore) -> Result<Box<dyn Backend>, PipelineError> {
    match config.backend {
        BackendChoice::Stub => Ok(Box::new(StubBackend::synthesizer())),
        BackendChoice::Replay => {
            let run_id = config.replay_run.as_deref().ok_or_else(|| {
                PipelineError::Config("replay backend requires a source run id".to_string())
            })?;
            Ok(Box::new(store.load_for_replay(run_id)?))
        }
        BackendChoice::Live => {
            #[cfg(feature = "live-backend")]
            {
                Ok(Box::new(crate::gateway::HttpBackend::from_env()?))
            }
            #[cfg(not(feature = "live-backend"))]
            {
                Err(PipelineError::Config(
                    "this build was compiled without the live backend".to_string(),
                ))
            }
        }
    }
}

/// Which models drive each stage. With several models, stages 1-2 use the
/// first; under replay, models come from the source run's manifest.
fn resolve_models(config: &PipelineConfig, store: &RunStore) -> Result<(String, Vec<String>), PipelineError> {
    if config.backend == BackendChoice::Replay {
        let run_id = config.replay_run.as_deref().ok_or_else(|| {
            PipelineError::Config("replay backend requires a source run id".to_string())
        })?;
        let manifest = store.read_manifest(run_id)?;
        if manifest.model_ids.len() != 2 {
            return Err(PipelineError::Config(format!(
                "source run '{run_id}' has a malformed model list"
            )));
        }
        return Ok((manifest.model_ids[0].clone(), vec![manifest.model_ids[1].clone()]));
    }
    if config.model_ids.is_empty() {
        return Err(PipelineError::Config("at least one model id is required".to_string()));
    }
    Ok((config.model_ids[0].clone(), config.model_ids.clone()))
}

/// Execute stages 1 -> 2 -> 3, assemble and validate the graph, and write
/// all artifacts. Returns one summary per stage-3 model.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    if config.parallelism == 0 {
        return Err(PipelineError::Config("parallelism must be >= 1".to_string()));
    }
    let registry = load_registry(config)?;
    let corpus = load_corpus(config)?;
    let reading = load_reading(
        &config.reading_text,
        config.reading_summary.as_deref(),
        config.reading_prompts.as_deref(),
    )?;
    let stage1_scheme = registry.scheme(STAGE1_SCHEME_ID)?.clone();
    let stage3_scheme = registry.scheme(config.scheme_tag.as_str())?.clone();
    let stage1_template = registry.template(1, config.stage1_version)?.clone();
    let stage2_template = registry.template(2, VersionTag::PBase)?.clone();
    let stage3_template = registry.template(3, config.scheme_tag)?.clone();

    let store = RunStore::new(&config.store_root);
    let backend = build_backend(config, &store)?;
    let gateway = Gateway::new(backend);
    let (stage12_model, stage3_models) = resolve_models(config, &store)?;

    let corpus_fingerprint = corpus.fingerprint();
    let reading_fingerprint = reading.fingerprint();
    let template_hashes: BTreeMap<String, String> = [
        ("stage1".to_string(), stage1_template.content_hash.clone()),
        ("stage2".to_string(), stage2_template.content_hash.clone()),
        ("stage3".to_string(), stage3_template.content_hash.clone()),
    ]
    .into();

    let defaults12 = RequestDefaults {
        model_id: stage12_model.clone(),
        temperature: config.temperature,
        max_output_tokens: config.max_output_tokens,
        seed: config.seed,
    };

    let stage1_run = run_stage1(
        &corpus,
        &reading,
        &stage1_template,
        &stage1_scheme,
        &defaults12,
        &gateway,
        config.parallelism,
        config.depth_limit,
    )?;
    let micro_ideas = stage1_run.micro_ideas();

    let stage2_run = generate_nodes(
        &reading,
        config.context_mode,
        &stage2_template,
        &defaults12,
        &gateway,
        config.min_nodes,
        config.max_nodes,
    )?;
    let stage2_report = Stage2Report {
        template_hash: stage2_template.content_hash.clone(),
        model_id: stage12_model.clone(),
        context_mode: config.context_mode.as_str().to_string(),
        node_set_fingerprint: stage2_run.node_set_fingerprint(),
        nodes: stage2_run.nodes.clone(),
        record_fingerprints: stage2_run.records.iter().map(|r| r.request_fingerprint.clone()).collect(),
    };

    let mut summaries = Vec::new();
    for stage3_model in &stage3_models {
        let defaults3 = RequestDefaults { model_id: stage3_model.clone(), ..defaults12.clone() };
        let stage3_run = run_stage3(
            &micro_ideas,
            &stage2_run.nodes,
            &stage3_scheme,
            &stage3_template,
            &defaults3,
            &gateway,
            config.parallelism,
        )?;

        let pipeline_id = format!(
            "pipe_{}",
            short_hash(&[
                "pipeline.v1",
                &corpus_fingerprint,
                &reading_fingerprint,
                &stage1_template.content_hash,
                &stage2_template.content_hash,
                &stage3_template.content_hash,
                stage3_scheme.scheme_id.as_str(),
                &stage12_model,
                stage3_model,
                config.context_mode.as_str(),
                &config.min_nodes.to_string(),
                &config.max_nodes.to_string(),
                &config.depth_limit.to_string(),
                &format!("{:?}", config.temperature),
                &config.seed.map(|s| s.to_string()).unwrap_or_default(),
                &config.max_output_tokens.to_string(),
            ])
        );
        let mut model_ids: Vec<String> = vec![stage12_model.clone()];
        if stage3_model != &stage12_model {
            model_ids.push(stage3_model.clone());
        }
        let metadata = GraphMetadata {
            run_id: pipeline_id,
            prompt_versions: [
                ("stage1".to_string(), config.stage1_version.as_str().to_string()),
                ("stage2".to_string(), VersionTag::PBase.as_str().to_string()),
                ("stage3".to_string(), config.scheme_tag.as_str().to_string()),
            ]
            .into(),
            model_ids,
            created_at: (config.backend == BackendChoice::Live).then(utc_now_rfc3339),
        };

        let outcomes = stage3_run.report.outcomes();
        let graph = assemble_graph(&micro_ideas, &stage2_run.nodes, &outcomes, &stage3_scheme, metadata)?;

        let manifest = RunManifest {
            run_id: String::new(),
            created_at: String::new(),
            corpus_fingerprint: corpus_fingerprint.clone(),
            reading_fingerprint: reading_fingerprint.clone(),
            template_hashes: template_hashes.clone(),
            scheme_id: stage3_scheme.scheme_id.clone(),
            model_ids: vec![stage12_model.clone(), stage3_model.clone()],
            backend_mode: config.backend.as_str().to_string(),
            tool_version: crate::TOOL_VERSION.to_string(),
        };
        let run = store.open_run(manifest)?;
        for record in stage1_run.records.iter().chain(&stage2_run.records).chain(&stage3_run.records) {
            run.record_model_record(record)?;
        }
        run.record(RecordKind::StageReport { stage: 1 }, &stage1_run.report.to_json_bytes())?;
        run.record(RecordKind::StageReport { stage: 2 }, &stage2_report.to_json_bytes())?;
        run.record(RecordKind::StageReport { stage: 3 }, &stage3_run.report.to_json_bytes())?;
        let graph_path = run.record(RecordKind::Graph, &to_canonical_json(&graph))?;

        summaries.push(RunSummary {
            run_id: run.run_id().to_string(),
            model_id: stage3_model.clone(),
            stage1_counts: stage1_run.report.counts.clone(),
            node_count: stage2_run.nodes.len(),
            stage3_counts: stage3_run.report.counts.clone(),
            graph_path,
        });
    }
    Ok(PipelineOutput { runs: summaries })
}

fn read_stage1_report(store: &RunStore, run_id: &str) -> Result<Stage1Report, PipelineError> {
    let bytes = store.read_artifact(run_id, RecordKind::StageReport { stage: 1 })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::Config(format!("run '{run_id}' has an unreadable stage-1 report: {e}")))
}

fn read_stage2_report(store: &RunStore, run_id: &str) -> Result<Stage2Report, PipelineError> {
    let bytes = store.read_artifact(run_id, RecordKind::StageReport { stage: 2 })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::Config(format!("run '{run_id}' has an unreadable node report: {e}")))
}

fn read_stage3_report(store: &RunStore, run_id: &str) -> Result<Stage3Report, PipelineError> {
    let bytes = store.read_artifact(run_id, RecordKind::StageReport { stage: 3 })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::Config(format!("run '{run_id}' has an unreadable stage-3 report: {e}")))
}

/// Read a run's graph back from the store.
pub fn read_graph(store: &RunStore, run_id: &str) -> Result<KnowledgeSynthesisGraph, PipelineError> {
    let bytes = store.read_artifact(run_id, RecordKind::Graph)?;
    Ok(import_json(&bytes)?)
}

/// Evaluate a run's stage-1 output against gold codings; writes
/// `eval/agreement.json` and `eval/agreement.csv` into the run directory.
pub fn evaluate_agreement(
    store: &RunStore,
    run_id: &str,
    gold_path: &std::path::Path,
) -> Result<AgreementReport, PipelineError> {
    let stage1 = read_stage1_report(store, run_id)?;
    let gold = load_gold_codings(gold_path)?;
    let report = agreement_report(&stage1, &gold)?;
    let handle = store.attach(run_id)?;
    let wrapped = EvalReport::Agreement(report.clone());
    handle.record(
        RecordKind::EvalReport { name: "agreement.json" },
        &emit_report(&wrapped, ReportFormat::Json),
    )?;
    handle.record(
        RecordKind::EvalReport { name: "agreement.csv" },
        &emit_report(&wrapped, ReportFormat::Csv),
    )?;
    Ok(report)
}

/// Cross-model consistency over runs that share corpus and node
/// fingerprints; writes `eval/consistency.{json,csv}` into the first run.
pub fn evaluate_consistency(
    store: &RunStore,
    run_ids: &[String],
) -> Result<ConsistencyReport, PipelineError> {
    if run_ids.len() < 2 {
        return Err(PipelineError::Eval(EvalError::NeedTwoModels));
    }
    let mut per_model = Vec::new();
    let mut shared: Option<(String, String, String, Vec<String>)> = None;
    for run_id in run_ids {
        let manifest = store.read_manifest(run_id)?;
        let stage2 = read_stage2_report(store, run_id)?;
        let stage3 = read_stage3_report(store, run_id)?;
        let item_ids: Vec<String> = stage3.items.iter().map(|i| i.micro_idea_id.clone()).collect();
        match &shared {
            None => {
                shared = Some((
                    manifest.corpus_fingerprint.clone(),
                    stage2.node_set_fingerprint.clone(),
                    stage3.scheme_id.clone(),
                    item_ids,
                ))
            }
            Some((corpus_fp, node_fp, scheme_id, first_items)) => {
                if &manifest.corpus_fingerprint != corpus_fp {
                    return Err(PipelineError::Incomparable(format!(
                        "run '{run_id}' has a different corpus fingerprint than '{}'",
                        run_ids[0]
                    )));
                }
                if &stage2.node_set_fingerprint != node_fp {
                    return Err(PipelineError::Incomparable(format!(
                        "run '{run_id}' has a different synthesis-node set than '{}'",
                        run_ids[0]
                    )));
                }
                if &stage3.scheme_id != scheme_id {
                    return Err(PipelineError::Incomparable(format!(
                        "run '{run_id}' used scheme '{}', expected '{scheme_id}'",
                        stage3.scheme_id
                    )));
                }
                if &item_ids != first_items {
                    return Err(PipelineError::Incomparable(format!(
                        "run '{run_id}' covers a different micro-idea set than '{}'",
                        run_ids[0]
                    )));
                }
            }
        }
        per_model.push((stage3.model_id.clone(), stage3.outcomes()));
    }
    let scheme_id = shared.expect("at least two runs").2;
    let report = consistency_report(&scheme_id, &per_model)?;
    let handle = store.attach(&run_ids[0])?;
    let wrapped = EvalReport::Consistency(report.clone());
    handle.record(
        RecordKind::EvalReport { name: "consistency.json" },
        &emit_report(&wrapped, ReportFormat::Json),
    )?;
    handle.record(
        RecordKind::EvalReport { name: "consistency.csv" },
        &emit_report(&wrapped, ReportFormat::Csv),
    )?;
    Ok(report)
}

/// Export a run's graph in the requested format. Re-validates first; a
/// tampered graph yields the validation report as an error.
pub fn export_run(
    store: &RunStore,
    run_id: &str,
    format: ExportFormat,
) -> Result<Vec<u8>, PipelineError> {
    let graph = read_graph(store, run_id)?;
    Ok(export(&graph, format)?)
}

/// Structured delta between two runs' graphs.
pub fn diff_runs(store: &RunStore, run_a: &str, run_b: &str) -> Result<GraphDelta, PipelineError> {
    let a = read_graph(store, run_a)?;
    let b = read_graph(store, run_b)?;
    Ok(crate::graph::diff(&a, &b))
}

/// Reading wrapper for `ingest-check`: corpus statistics without running
/// any stage.
#[derive(Debug, Serialize)]
pub struct IngestSummary {
    pub annotations: usize,
    pub replies: usize,
    pub authors: usize,
    pub documents: usize,
    pub corpus_fingerprint: String,
}

pub fn ingest_check(config: &PipelineConfig) -> Result<IngestSummary, PipelineError> {
    let corpus = load_corpus(config)?;
    let authors: std::collections::BTreeSet<&str> =
        corpus.annotations().iter().map(|a| a.author.as_str()).collect();
    let documents: std::collections::BTreeSet<&str> =
        corpus.annotations().iter().map(|a| a.document_id.as_str()).collect();
    Ok(IngestSummary {
        annotations: corpus.len(),
        replies: corpus.annotations().iter().filter(|a| a.parent_id.is_some()).count(),
        authors: authors.len(),
        documents: documents.len(),
        corpus_fingerprint: corpus.fingerprint(),
    })
}

/// Convenience for tests and the fixture: load reading declared by a config.
pub fn load_configured_reading(config: &PipelineConfig) -> Result<Reading, PipelineError> {
    Ok(load_reading(
        &config.reading_text,
        config.reading_summary.as_deref(),
        config.reading_prompts.as_deref(),
    )?)
}
