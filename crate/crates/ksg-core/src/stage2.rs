//! Stage 2: generate candidate synthesis nodes from reading material under
//! a configurable context mode. One request per reading; a bounds or
//! duplicate-title problem earns one corrective re-prompt, after which the
//! stage fails (stage 3 cannot run without nodes).

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Reading;
use crate::gateway::{Gateway, GatewayError, RequestDefaults, RunRecord};
use crate::graph::SynthesisNode;
use crate::payload::{extract_first_payload, stage2_hint};
use crate::prompts::{PromptTemplate, RenderError};

pub const STAGE2_SYSTEM_PROMPT: &str = "You distill course readings into discussion-ready synthesis \
    nodes. Follow the instructions exactly and reply with a single JSON object.";

/// Leading slice of full text used by [`ContextMode::AbstractOnly`].
pub const ABSTRACT_CHAR_BUDGET: usize = 2_000;

/// Character budget for [`ContextMode::FullText`]; longer texts are
/// head-truncated with a notice so prompts stay bounded and reproducible.
pub const FULLTEXT_CHAR_BUDGET: usize = 24_000;

/// How much of the reading the generation prompt sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Leading slice of the full text (the limited-context configuration).
    AbstractOnly,
    SummaryOnly,
    FullText,
    SummaryPlusInstructor,
}

impl ContextMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContextMode::AbstractOnly => "abstract",
            ContextMode::SummaryOnly => "summary",
            ContextMode::FullText => "fulltext",
            ContextMode::SummaryPlusInstructor => "summary_instructor",
        }
    }
}

impl FromStr for ContextMode {
    type Err = Stage2Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abstract" => Ok(ContextMode::AbstractOnly),
            "summary" => Ok(ContextMode::SummaryOnly),
            "fulltext" => Ok(ContextMode::FullText),
            "summary_instructor" => Ok(ContextMode::SummaryPlusInstructor),
            other => Err(Stage2Error::Config {
                mode: other.to_string(),
                field: "context_mode".to_string(),
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error("context mode '{mode}' requires the reading field '{field}'")]
    Config { mode: String, field: String },
    #[error("node bounds invalid: min_nodes {min} must be >= 1 and <= max_nodes {max}")]
    Bounds { min: usize, max: usize },
    #[error("stage 2 prompt render failed: {0}")]
    Render(#[from] RenderError),
    #[error("stage 2 transport failure: {0}")]
    Gateway(#[from] GatewayError),
    #[error("stage 2 failed after corrective re-prompt: {detail}")]
    Failure { detail: String, raw_responses: Vec<String> },
}

fn truncate_at_char_boundary(text: &str, budget: usize) -> &str {
    if text.len() <= budget {
        return text;
    }
    let mut end = budget;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

/// Assemble the generation context for a reading under a mode. Missing
/// required fields are configuration errors naming the mode and field.
pub fn build_stage2_context(reading: &Reading, mode: ContextMode) -> Result<String, Stage2Error> {
    let summary = || {
        reading.summary.clone().ok_or_else(|| Stage2Error::Config {
            mode: mode.as_str().to_string(),
            field: "summary".to_string(),
        })
    };
    match mode {
        ContextMode::AbstractOnly => {
            Ok(truncate_at_char_boundary(&reading.full_text, ABSTRACT_CHAR_BUDGET).to_string())
        }
        ContextMode::SummaryOnly => summary(),
        ContextMode::FullText => {
            let slice = truncate_at_char_boundary(&reading.full_text, FULLTEXT_CHAR_BUDGET);
            if slice.len() < reading.full_text.len() {
                Ok(format!(
                    "{slice}\n[context truncated at {FULLTEXT_CHAR_BUDGET} characters]"
                ))
            } else {
                Ok(slice.to_string())
            }
        }
        ContextMode::SummaryPlusInstructor => {
            let summary = summary()?;
            if reading.instructor_prompts.is_empty() {
                return Err(Stage2Error::Config {
                    mode: mode.as_str().to_string(),
                    field: "instructor_prompts".to_string(),
                });
            }
            let mut out = summary;
            out.push_str("\n\nInstructor prompts:\n");
            for (i, prompt) in reading.instructor_prompts.iter().enumerate() {
                out.push_str(&format!("{}. {prompt}\n", i + 1));
            }
            Ok(out.trim_end().to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stage2Payload {
    nodes: Vec<NodeDraft>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct NodeDraft {
    title: String,
    description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum DraftProblem {
    NoPayload,
    EmptyField(&'static str),
    CountOutOfBounds { count: usize },
    DuplicateTitle { title: String },
}

impl std::fmt::Display for DraftProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DraftProblem::NoPayload => write!(f, "no parseable node payload in model output"),
            DraftProblem::EmptyField(field) => write!(f, "a node has an empty {field}"),
            DraftProblem::CountOutOfBounds { count } => write!(f, "node count {count} outside bounds"),
            DraftProblem::DuplicateTitle { title } => write!(f, "duplicate node title '{title}'"),
        }
    }
}

fn parse_drafts(raw: &str, min_nodes: usize, max_nodes: usize) -> Result<Vec<NodeDraft>, DraftProblem> {
    extract_first_payload(raw, |payload: Stage2Payload| {
        let drafts = payload.nodes;
        if !(min_nodes..=max_nodes).contains(&drafts.len()) {
            return Err(DraftProblem::CountOutOfBounds { count: drafts.len() });
        }
        let mut seen = BTreeSet::new();
        for draft in &drafts {
            if draft.title.trim().is_empty() {
                return Err(DraftProblem::EmptyField("title"));
            }
            if draft.description.trim().is_empty() {
                return Err(DraftProblem::EmptyField("description"));
            }
            if !seen.insert(draft.title.trim().to_lowercase()) {
                return Err(DraftProblem::DuplicateTitle { title: draft.title.clone() });
            }
        }
        Ok(Stage2Payload { nodes: drafts })
    })
    .map(|payload| payload.nodes)
    .map_err(|rejection| rejection.unwrap_or(DraftProblem::NoPayload))
}

/// Output of stage 2: the nodes plus model records (1 or 2 requests).
#[derive(Debug)]
pub struct Stage2Run {
    pub nodes: Vec<SynthesisNode>,
    pub records: Vec<RunRecord>,
    pub context_mode: ContextMode,
}

impl Stage2Run {
    /// Deterministic fingerprint of the node set; runs must share this for
    /// cross-model comparison.
    pub fn node_set_fingerprint(&self) -> String {
        node_set_fingerprint(&self.nodes)
    }
}

pub fn node_set_fingerprint(nodes: &[SynthesisNode]) -> String {
    let mut parts: Vec<String> = nodes
        .iter()
        .map(|n| format!("{}\u{1f}{}\u{1f}{}", n.id, n.title, n.description))
        .collect();
    parts.sort();
    let joined = parts.join("\u{1e}");
    crate::hashing::sha256_hex(&["node_set", &joined])
}

/// Serialized form of stage-2 output (`synthesis_nodes.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub template_hash: String,
    pub model_id: String,
    pub context_mode: String,
    pub node_set_fingerprint: String,
    pub nodes: Vec<SynthesisNode>,
    pub record_fingerprints: Vec<String>,
}

impl Stage2Report {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serialization cannot fail");
        bytes.push(b'\n');
        bytes
    }
}

/// Generate synthesis nodes for a reading. The node count is clamped to
/// `[min_nodes, max_nodes]` by a single corrective re-prompt; persistent
/// problems abort the stage with the raw responses attached.
pub fn generate_nodes(
    reading: &Reading,
    mode: ContextMode,
    template: &PromptTemplate,
    defaults: &RequestDefaults,
    gateway: &Gateway,
    min_nodes: usize,
    max_nodes: usize,
) -> Result<Stage2Run, Stage2Error> {
    if min_nodes == 0 || max_nodes < min_nodes {
        return Err(Stage2Error::Bounds { min: min_nodes, max: max_nodes });
    }
    let context = build_stage2_context(reading, mode)?;
    let vars = [
        ("reading_title", reading.title.clone()),
        ("context", context),
        ("min_nodes", min_nodes.to_string()),
        ("max_nodes", max_nodes.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let prompt = template.render(&vars)?;
    let hint = stage2_hint(min_nodes, max_nodes);

    let mut records = Vec::new();
    let request = defaults.request(STAGE2_SYSTEM_PROMPT, prompt.clone(), Some(hint.clone()));
    let (result, record) = gateway.complete_with_record(&request);
    records.extend(record);
    let first_raw = result?.raw_text;

    let drafts = match parse_drafts(&first_raw, min_nodes, max_nodes) {
        Ok(drafts) => drafts,
        Err(problem) => {
            let retry_prompt = format!(
                "{prompt}\n\nYour previous reply was rejected: {problem}. Reply again with one JSON \
                 object of the form {{\"nodes\": [{{\"title\", \"description\"}}]}} containing between \
                 {min_nodes} and {max_nodes} nodes with distinct titles."
            );
            let retry = defaults.request(STAGE2_SYSTEM_PROMPT, retry_prompt, Some(hint));
            let (retry_result, retry_record) = gateway.complete_with_record(&retry);
            records.extend(retry_record);
            let second_raw = retry_result?.raw_text;
            match parse_drafts(&second_raw, min_nodes, max_nodes) {
                Ok(drafts) => drafts,
                Err(problem) => {
                    return Err(Stage2Error::Failure {
                        detail: problem.to_string(),
                        raw_responses: vec![first_raw, second_raw],
                    })
                }
            }
        }
    };

    let nodes = drafts
        .into_iter()
        .map(|d| SynthesisNode::new(&reading.id, mode.as_str(), d.title.trim(), d.description.trim()))
        .collect();
    Ok(Stage2Run { nodes, records, context_mode: mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{StubBackend, StubReply};
    use crate::prompts::{PromptRegistry, VersionTag};

    fn reading() -> Reading {
        Reading {
            id: "reading-clt".to_string(),
            title: "Managing Mental Effort".to_string(),
            full_text: "Managing Mental Effort\n\nWorking memory is narrow. Schemas widen it. Design \
                        choices shift the balance between useful and wasted effort."
                .to_string(),
            summary: Some(
                "Working memory is narrow. Schemas widen what learners can hold. Instruction should \
                 trim wasted effort. Worked examples help novices. Practice should fade support over \
                 time. Measuring effort remains difficult."
                    .to_string(),
            ),
            instructor_prompts: vec![
                "Where does the argument rely on lab studies?".to_string(),
                "How would you redesign one activity from this course?".to_string(),
            ],
        }
    }

    fn template() -> PromptTemplate {
        PromptRegistry::builtin().template(2, VersionTag::PBase).unwrap().clone()
    }

    #[test]
    fn summary_only_uses_summary_text() {
        let context = build_stage2_context(&reading(), ContextMode::SummaryOnly).unwrap();
        assert_eq!(context, reading().summary.unwrap());
    }

    #[test]
    fn summary_plus_instructor_numbers_prompts() {
        let context = build_stage2_context(&reading(), ContextMode::SummaryPlusInstructor).unwrap();
        assert!(context.contains("1. Where does the argument rely on lab studies?"));
        assert!(context.contains("2. How would you redesign one activity from this course?"));
        assert!(context.starts_with("Working memory is narrow."));
    }

    #[test]
    fn missing_summary_is_config_error_naming_mode_and_field() {
        let mut r = reading();
        r.summary = None;
        match build_stage2_context(&r, ContextMode::SummaryOnly) {
            Err(Stage2Error::Config { mode, field }) => {
                assert_eq!(mode, "summary");
                assert_eq!(field, "summary");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn fulltext_is_head_truncated_with_notice() {
        let mut r = reading();
        r.full_text = "x".repeat(FULLTEXT_CHAR_BUDGET + 100);
        let context = build_stage2_context(&r, ContextMode::FullText).unwrap();
        assert!(context.contains("[context truncated at"));
        assert!(context.len() < r.full_text.len() + 100);
    }

    #[test]
    fn well_formed_nodes_within_bounds_pass_through() {
        let payload = r#"{"nodes": [
            {"title": "One", "description": "First idea."},
            {"title": "Two", "description": "Second idea."},
            {"title": "Three", "description": "Third idea."},
            {"title": "Four", "description": "Fourth idea."},
            {"title": "Five", "description": "Fifth idea."}
        ]}"#;
        let stub = StubBackend::scripted().with_rule(|_| true, StubReply::Text(payload.to_string()));
        let gateway = Gateway::new(Box::new(stub));
        let run = generate_nodes(
            &reading(),
            ContextMode::SummaryPlusInstructor,
            &template(),
            &RequestDefaults::deterministic("stub-alpha"),
            &gateway,
            3,
            8,
        )
        .unwrap();
        assert_eq!(run.nodes.len(), 5);
        assert!(run.nodes.iter().all(|n| n.provenance.reading_id == "reading-clt"));
        assert!(run.nodes.iter().all(|n| n.provenance.context_mode == "summary_instructor"));
        assert_eq!(run.records.len(), 1);
    }

    #[test]
    fn too_few_nodes_reprompts_once_then_fails() {
        let payload = r#"{"nodes": [
            {"title": "One", "description": "First idea."},
            {"title": "Two", "description": "Second idea."}
        ]}"#;
        let stub = StubBackend::scripted().with_rule(|_| true, StubReply::Text(payload.to_string()));
        let gateway = Gateway::new(Box::new(stub));
        match generate_nodes(
            &reading(),
            ContextMode::SummaryOnly,
            &template(),
            &RequestDefaults::deterministic("stub-alpha"),
            &gateway,
            3,
            8,
        ) {
            Err(Stage2Error::Failure { detail, raw_responses }) => {
                assert!(detail.contains("node count 2"));
                assert_eq!(raw_responses.len(), 2);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_titles_casefolded_fail_after_reprompt() {
        let payload = r#"{"nodes": [
            {"title": "Same Title", "description": "First."},
            {"title": "same title", "description": "Second."},
            {"title": "Other", "description": "Third."}
        ]}"#;
        let stub = StubBackend::scripted().with_rule(|_| true, StubReply::Text(payload.to_string()));
        let gateway = Gateway::new(Box::new(stub));
        match generate_nodes(
            &reading(),
            ContextMode::SummaryOnly,
            &template(),
            &RequestDefaults::deterministic("stub-alpha"),
            &gateway,
            3,
            8,
        ) {
            Err(Stage2Error::Failure { detail, .. }) => assert!(detail.contains("duplicate node title")),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn corrective_reprompt_can_recover() {
        // First reply is out of bounds; the corrective reply is valid.
        let bad = r#"{"nodes": [{"title": "Only", "description": "One."}]}"#;
        let good = r#"{"nodes": [
            {"title": "One", "description": "First."},
            {"title": "Two", "description": "Second."},
            {"title": "Three", "description": "Third."}
        ]}"#;
        let stub = StubBackend::scripted()
            .with_prompt_rule("previous reply was rejected", StubReply::Text(good.to_string()))
            .with_rule(|_| true, StubReply::Text(bad.to_string()));
        let gateway = Gateway::new(Box::new(stub));
        let run = generate_nodes(
            &reading(),
            ContextMode::SummaryOnly,
            &template(),
            &RequestDefaults::deterministic("stub-alpha"),
            &gateway,
            3,
            8,
        )
        .unwrap();
        assert_eq!(run.nodes.len(), 3);
        assert_eq!(run.records.len(), 2);
    }

    #[test]
    fn synthesizer_fills_bounds_and_ids_are_stable() {
        let gateway = Gateway::new(Box::new(StubBackend::synthesizer()));
        let defaults = RequestDefaults::deterministic("stub-alpha");
        let run1 = generate_nodes(
            &reading(),
            ContextMode::SummaryPlusInstructor,
            &template(),
            &defaults,
            &gateway,
            4,
            10,
        )
        .unwrap();
        let run2 = generate_nodes(
            &reading(),
            ContextMode::SummaryPlusInstructor,
            &template(),
            &defaults,
            &gateway,
            4,
            10,
        )
        .unwrap();
        assert!(run1.nodes.len() >= 4 && run1.nodes.len() <= 10);
        assert_eq!(run1.nodes, run2.nodes);
        assert_eq!(run1.node_set_fingerprint(), run2.node_set_fingerprint());
        assert!(run1.nodes.iter().all(|n| n.id.starts_with("sn_")));
    }

    #[test]
    fn invalid_bounds_rejected() {
        let gateway = Gateway::new(Box::new(StubBackend::synthesizer()));
        assert!(matches!(
            generate_nodes(
                &reading(),
                ContextMode::SummaryOnly,
                &template(),
                &RequestDefaults::deterministic("stub-alpha"),
                &gateway,
                0,
                5,
            ),
            Err(Stage2Error::Bounds { .. })
        ));
    }
}
