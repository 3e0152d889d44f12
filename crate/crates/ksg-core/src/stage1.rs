//! Stage 1: transform raw annotations into labeled micro-ideas via the
//! contextualize -> filter -> assign pattern. Each annotation is processed
//! independently (replies included, with ancestors as context); the model
//! filters non-substantive discourse and rewrites the rest into standalone
//! labeled statements.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Annotation, Corpus, Reading};
use crate::gateway::{Gateway, GatewayError, RequestDefaults, RunRecord};
use crate::graph::{MicroIdea, MicroIdeaLabel};
use crate::payload::{extract_first_payload, STAGE1_HINT};
use crate::prompts::{CodingScheme, PromptTemplate, RenderError};

pub const STAGE1_SYSTEM_PROMPT: &str = "You analyze student annotations from course readings. \
    Follow the instructions exactly and reply with a single JSON object.";

const CORRECTIVE_SUFFIX: &str = "\n\nYour previous reply was not a single valid JSON object of the \
    required shape. Reply again with exactly one JSON object with the fields \"substantive\", \
    \"statement\", \"label\", and \"reason\", and no surrounding text.";

/// Statements longer than this many words are accepted but flagged in the
/// stage report.
pub const STATEMENT_WORD_CAP: usize = 60;

/// Everything the model sees about one annotation.
#[derive(Debug, Clone)]
pub struct ContextBundle<'a> {
    pub annotation: &'a Annotation,
    pub quoted_passage: &'a str,
    /// Ancestor chain, root-first, bounded by the depth limit.
    pub reply_chain: Vec<&'a Annotation>,
}

/// Assemble the context bundle for one annotation.
pub fn build_bundle<'a>(
    annotation: &'a Annotation,
    corpus: &'a Corpus,
    depth_limit: usize,
) -> ContextBundle<'a> {
    ContextBundle {
        annotation,
        quoted_passage: &annotation.quoted_passage,
        reply_chain: corpus.thread_context(&annotation.id, depth_limit),
    }
}

/// The documented stage-1 model payload. Parsing validates but never
/// rewrites fields, so `parse(serialize(p)) == p` for valid payloads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Payload {
    pub substantive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statement: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Stage1PayloadError {
    #[error("no parseable payload object in model output")]
    NoPayload,
    #[error("substantive payload is missing a non-empty statement")]
    MissingStatement,
    #[error("substantive payload is missing a label")]
    MissingLabel,
    #[error("label '{label}' is outside the micro-idea label set")]
    LabelDomain { label: String },
}

/// Recover the first well-formed stage-1 payload from raw model text,
/// tolerating prose and code fences around the JSON object.
pub fn parse_stage1_payload(raw: &str) -> Result<Stage1Payload, Stage1PayloadError> {
    extract_first_payload(raw, |payload: Stage1Payload| {
        if payload.substantive {
            match &payload.statement {
                Some(s) if !s.trim().is_empty() => {}
                _ => return Err(Stage1PayloadError::MissingStatement),
            }
            match &payload.label {
                None => return Err(Stage1PayloadError::MissingLabel),
                Some(label) => {
                    if MicroIdeaLabel::parse_lenient(label).is_none() {
                        return Err(Stage1PayloadError::LabelDomain { label: label.clone() });
                    }
                }
            }
        }
        Ok(payload)
    })
    .map_err(|rejection| rejection.unwrap_or(Stage1PayloadError::NoPayload))
}

/// Detail attached to outcomes the pipeline could not parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidOutput {
    pub detail: String,
    pub raw_responses: Vec<String>,
}

/// Per-annotation stage-1 verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterOutcome {
    Substantive { micro_idea: MicroIdea },
    NonSubstantive { reason: String },
    Invalid(InvalidOutput),
}

impl FilterOutcome {
    /// Schema-valid means the model produced interpretable output;
    /// filtering something out is still valid output.
    pub fn is_schema_valid(&self) -> bool {
        !matches!(self, FilterOutcome::Invalid(_))
    }
}

/// Result of extracting one annotation: the outcome (or the transport
/// error that prevented one) plus every model record produced on the way.
#[derive(Debug)]
pub struct Extraction {
    pub outcome: Result<FilterOutcome, GatewayError>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Error)]
pub enum Stage1Error {
    #[error("stage 1 prompt render failed: {0}")]
    Render(#[from] RenderError),
}

fn render_prompt(
    bundle: &ContextBundle<'_>,
    reading: &Reading,
    template: &PromptTemplate,
    scheme: &CodingScheme,
) -> Result<String, Stage1Error> {
    let reply_context = if bundle.reply_chain.is_empty() {
        "(none)".to_string()
    } else {
        bundle
            .reply_chain
            .iter()
            .map(|a| format!("{}: {}", a.author, a.body))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let quoted = if bundle.quoted_passage.trim().is_empty() {
        "(none)".to_string()
    } else {
        bundle.quoted_passage.to_string()
    };
    let vars = [
        ("reading_title", reading.title.clone()),
        ("quoted_passage", quoted),
        ("reply_context", reply_context),
        ("annotation_body", bundle.annotation.body.clone()),
        ("category_guide", scheme.guide_text()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(template.render(&vars)?)
}

fn outcome_from_payload(payload: Stage1Payload, annotation_id: &str) -> FilterOutcome {
    if payload.substantive {
        let statement = payload.statement.expect("validated by parse").trim().to_string();
        let label = MicroIdeaLabel::parse_lenient(payload.label.as_deref().expect("validated by parse"))
            .expect("validated by parse");
        FilterOutcome::Substantive { micro_idea: MicroIdea::new(annotation_id, &statement, label) }
    } else {
        FilterOutcome::NonSubstantive { reason: payload.reason.unwrap_or_default() }
    }
}

/// Run the contextualize -> filter -> assign pass for one annotation.
/// Schema-invalid output gets one corrective re-prompt, then becomes
/// [`FilterOutcome::Invalid`] with both raw responses attached. Transport
/// failures propagate in `outcome` and are never converted to `Invalid`.
pub fn extract_micro_idea(
    bundle: &ContextBundle<'_>,
    reading: &Reading,
    template: &PromptTemplate,
    scheme: &CodingScheme,
    defaults: &RequestDefaults,
    gateway: &Gateway,
) -> Result<Extraction, Stage1Error> {
    let prompt = render_prompt(bundle, reading, template, scheme)?;
    let annotation_id = bundle.annotation.id.as_str();
    let mut records = Vec::new();

    let request = defaults.request(STAGE1_SYSTEM_PROMPT, prompt.clone(), Some(STAGE1_HINT.to_string()));
    let (result, record) = gateway.complete_with_record(&request);
    records.extend(record);
    let first_raw = match result {
        Ok(result) => result.raw_text,
        Err(err) => return Ok(Extraction { outcome: Err(err), records }),
    };
    match parse_stage1_payload(&first_raw) {
        Ok(payload) => Ok(Extraction {
            outcome: Ok(outcome_from_payload(payload, annotation_id)),
            records,
        }),
        Err(_) => {
            let retry_request = defaults.request(
                STAGE1_SYSTEM_PROMPT,
                format!("{prompt}{CORRECTIVE_SUFFIX}"),
                Some(STAGE1_HINT.to_string()),
            );
            let (retry_result, retry_record) = gateway.complete_with_record(&retry_request);
            records.extend(retry_record);
            let second_raw = match retry_result {
                Ok(result) => result.raw_text,
                Err(err) => return Ok(Extraction { outcome: Err(err), records }),
            };
            let outcome = match parse_stage1_payload(&second_raw) {
                Ok(payload) => outcome_from_payload(payload, annotation_id),
                Err(second_err) => FilterOutcome::Invalid(InvalidOutput {
                    detail: second_err.to_string(),
                    raw_responses: vec![first_raw, second_raw],
                }),
            };
            Ok(Extraction { outcome: Ok(outcome), records })
        }
    }
}

/// Outcome counts for the stage report. Under stub/replay backends
/// `transport_failed` is always zero and the first three partition the
/// corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Counts {
    pub substantive: usize,
    pub non_substantive: usize,
    pub invalid: usize,
    pub transport_failed: usize,
}

/// Per-item entry in the persisted report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Item {
    pub annotation_id: String,
    #[serde(flatten)]
    pub verdict: Stage1Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Stage1Verdict {
    Substantive { micro_idea: MicroIdea },
    NonSubstantive { reason: String },
    Invalid { detail: String, raw_responses: Vec<String> },
    TransportFailed { message: String },
}

/// The persisted stage-1 report (`stage1_report.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub template_id: String,
    pub template_hash: String,
    pub model_id: String,
    pub counts: Stage1Counts,
    /// Annotation ids whose statements exceed the word cap (accepted, not
    /// rewritten).
    pub over_length_statements: Vec<String>,
    pub items: Vec<Stage1Item>,
    pub record_fingerprints: Vec<String>,
}

impl Stage1Report {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serialization cannot fail");
        bytes.push(b'\n');
        bytes
    }
}

/// Full output of a stage-1 batch.
#[derive(Debug)]
pub struct Stage1Run {
    /// One slot per corpus annotation, in corpus order.
    pub outcomes: Vec<Result<FilterOutcome, GatewayError>>,
    /// All model records, in item order (re-prompts follow their first
    /// attempt).
    pub records: Vec<RunRecord>,
    pub report: Stage1Report,
}

impl Stage1Run {
    /// Micro-ideas of all substantive outcomes, in corpus order.
    pub fn micro_ideas(&self) -> Vec<MicroIdea> {
        self.outcomes
            .iter()
            .filter_map(|o| match o {
                Ok(FilterOutcome::Substantive { micro_idea }) => Some(micro_idea.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Run stage 1 over a whole corpus with up to `parallelism` annotations in
/// flight. Per-item failures never abort the batch; only configuration
/// problems (a template/variable mismatch) do.
pub fn run_stage1(
    corpus: &Corpus,
    reading: &Reading,
    template: &PromptTemplate,
    scheme: &CodingScheme,
    defaults: &RequestDefaults,
    gateway: &Gateway,
    parallelism: usize,
    depth_limit: usize,
) -> Result<Stage1Run, Stage1Error> {
    let annotations = corpus.annotations();
    let workers = parallelism.min(annotations.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Extraction, Stage1Error>>>> =
        annotations.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= annotations.len() {
                    break;
                }
                let bundle = build_bundle(&annotations[idx], corpus, depth_limit);
                let extraction = extract_micro_idea(&bundle, reading, template, scheme, defaults, gateway);
                *slots[idx].lock().expect("slot poisoned") = Some(extraction);
            });
        }
    });

    let mut outcomes = Vec::with_capacity(annotations.len());
    let mut records = Vec::new();
    let mut counts = Stage1Counts::default();
    let mut over_length = Vec::new();
    let mut items = Vec::with_capacity(annotations.len());
    for (annotation, slot) in annotations.iter().zip(slots) {
        let extraction = slot.into_inner().expect("slot poisoned").expect("worker filled every slot")?;
        records.extend(extraction.records);
        let verdict = match &extraction.outcome {
            Ok(FilterOutcome::Substantive { micro_idea }) => {
                counts.substantive += 1;
                if micro_idea.statement.split_whitespace().count() > STATEMENT_WORD_CAP {
                    over_length.push(annotation.id.clone());
                }
                Stage1Verdict::Substantive { micro_idea: micro_idea.clone() }
            }
            Ok(FilterOutcome::NonSubstantive { reason }) => {
                counts.non_substantive += 1;
                Stage1Verdict::NonSubstantive { reason: reason.clone() }
            }
            Ok(FilterOutcome::Invalid(invalid)) => {
                counts.invalid += 1;
                Stage1Verdict::Invalid {
                    detail: invalid.detail.clone(),
                    raw_responses: invalid.raw_responses.clone(),
                }
            }
            Err(err) => {
                counts.transport_failed += 1;
                Stage1Verdict::TransportFailed { message: err.to_string() }
            }
        };
        items.push(Stage1Item { annotation_id: annotation.id.clone(), verdict });
        outcomes.push(extraction.outcome);
    }

    let report = Stage1Report {
        template_id: template.template_id.clone(),
        template_hash: template.content_hash.clone(),
        model_id: defaults.model_id.clone(),
        counts,
        over_length_statements: over_length,
        items,
        record_fingerprints: records.iter().map(|r| r.request_fingerprint.clone()).collect(),
    };
    Ok(Stage1Run { outcomes, records, report })
}
