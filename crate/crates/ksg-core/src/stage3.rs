//! Stage 3: link each micro-idea to synthesis nodes with epistemic
//! relations under a selectable coding scheme. The prompt carries every
//! node (id, title, description) in one request per micro-idea; a
//! micro-idea the model cannot confidently place goes to the uncategorized
//! sentinel. Invalid model output is re-prompted once, then recorded as
//! invalid and later assembled as a flagged uncategorized edge.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, RequestDefaults, RunRecord};
use crate::graph::{
    validate, EpistemicRelation, GraphMetadata, KnowledgeSynthesisGraph, MicroIdea, RelationLink,
    RelationTarget, Stance, SynthesisNode, ValidationReport, MAX_LINKS, UNCATEGORIZED,
};
use crate::payload::{extract_first_payload, stage3_hint};
use crate::prompts::{CodingScheme, PromptTemplate, RenderError};
use crate::stage1::InvalidOutput;

pub const STAGE3_SYSTEM_PROMPT: &str = "You map student micro-ideas onto synthesis nodes from a \
    course reading. Follow the instructions exactly and reply with a single JSON object.";

/// Per-micro-idea stage-3 verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkOutcome {
    /// 1 to [`MAX_LINKS`] relations; the first is the primary link.
    Linked { relations: Vec<EpistemicRelation> },
    Uncategorized { reason: String },
    Invalid(InvalidOutput),
}

impl LinkOutcome {
    /// Uncategorized is valid output: the model answered, it abstained.
    pub fn is_schema_valid(&self) -> bool {
        !matches!(self, LinkOutcome::Invalid(_))
    }
}

#[derive(Debug, Error)]
pub enum Stage3Error {
    #[error("stage 3 needs a non-empty synthesis node list")]
    NoNodes,
    #[error("stage 3 prompt render failed: {0}")]
    Render(#[from] RenderError),
    #[error("stage 3 outcomes misaligned: {micro_ideas} micro-ideas but {outcomes} outcomes")]
    Misaligned { micro_ideas: usize, outcomes: usize },
    #[error("assembled graph failed validation:\n{report}")]
    AssembledInvalid { report: ValidationReport },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stage3Payload {
    links: Vec<LinkDraft>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct LinkDraft {
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    function: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Stage3PayloadError {
    #[error("no parseable link payload in model output")]
    NoPayload,
    #[error("payload carries no links")]
    EmptyLinks,
    #[error("payload carries {count} links; at most {MAX_LINKS} allowed")]
    TooManyLinks { count: usize },
    #[error("uncategorized must be the only link and carry no stance or function")]
    MalformedUncategorized,
    #[error("link target '{target}' is not a known synthesis node")]
    DanglingTarget { target: String },
    #[error("stance '{stance}' is outside the scheme")]
    StanceDomain { stance: String },
    #[error("function '{function}' is outside the scheme")]
    FunctionDomain { function: String },
    #[error("category '{category}' is outside scheme '{scheme_id}'")]
    CategoryDomain { category: String, scheme_id: String },
    #[error("two-level scheme requires both stance and function")]
    MissingStanceOrFunction,
    #[error("flat scheme link must carry a category in the function slot and no stance")]
    FlatShape,
}

/// Parse and validate a stage-3 payload against the scheme and the known
/// node ids. Returns the validated outcome-shaped payload.
pub fn parse_stage3_payload(
    raw: &str,
    scheme: &CodingScheme,
    nodes: &[SynthesisNode],
    micro_idea_id: &str,
) -> Result<LinkOutcome, Stage3PayloadError> {
    let node_ids: std::collections::BTreeSet<&str> = nodes.iter().map(|n| n.id.as_str()).collect();
    extract_first_payload(raw, |payload: Stage3Payload| {
        let links = &payload.links;
        if links.is_empty() {
            return Err(Stage3PayloadError::EmptyLinks);
        }
        if links.len() > MAX_LINKS {
            return Err(Stage3PayloadError::TooManyLinks { count: links.len() });
        }
        if links.iter().any(|l| l.target == UNCATEGORIZED) {
            let only = &links[0];
            if links.len() != 1 || only.stance.is_some() || only.function.is_some() {
                return Err(Stage3PayloadError::MalformedUncategorized);
            }
            return Ok(payload);
        }
        for link in links {
            if !node_ids.contains(link.target.as_str()) {
                return Err(Stage3PayloadError::DanglingTarget { target: link.target.clone() });
            }
            if scheme.two_level() {
                let stance = link.stance.as_deref().ok_or(Stage3PayloadError::MissingStanceOrFunction)?;
                let function =
                    link.function.as_deref().ok_or(Stage3PayloadError::MissingStanceOrFunction)?;
                if Stance::parse(stance).is_none() {
                    return Err(Stage3PayloadError::StanceDomain { stance: stance.to_string() });
                }
                if crate::graph::RelationFunction::parse(function).is_none() {
                    return Err(Stage3PayloadError::FunctionDomain { function: function.to_string() });
                }
            } else {
                if link.stance.is_some() {
                    return Err(Stage3PayloadError::FlatShape);
                }
                let category = link.function.as_deref().ok_or(Stage3PayloadError::FlatShape)?;
                if !scheme.category_names().contains(&category.trim()) {
                    return Err(Stage3PayloadError::CategoryDomain {
                        category: category.to_string(),
                        scheme_id: scheme.scheme_id.clone(),
                    });
                }
            }
        }
        Ok(payload)
    })
    .map(|payload| payload_to_outcome(payload, scheme, micro_idea_id))
    .map_err(|rejection| rejection.unwrap_or(Stage3PayloadError::NoPayload))
}

fn payload_to_outcome(payload: Stage3Payload, scheme: &CodingScheme, micro_idea_id: &str) -> LinkOutcome {
    if payload.links[0].target == UNCATEGORIZED {
        return LinkOutcome::Uncategorized {
            reason: payload.links[0].rationale.clone().unwrap_or_default(),
        };
    }
    let relations = payload
        .links
        .into_iter()
        .map(|draft| {
            let link = if scheme.two_level() {
                RelationLink::TwoLevel {
                    stance: Stance::parse(draft.stance.as_deref().expect("validated"))
                        .expect("validated"),
                    function: crate::graph::RelationFunction::parse(
                        draft.function.as_deref().expect("validated"),
                    )
                    .expect("validated"),
                }
            } else {
                RelationLink::Flat {
                    category: draft.function.expect("validated").trim().to_string(),
                }
            };
            EpistemicRelation {
                micro_idea_id: micro_idea_id.to_string(),
                target: RelationTarget::Node(draft.target),
                link: Some(link),
                rationale: draft.rationale,
                scheme_id: scheme.scheme_id.clone(),
            }
        })
        .collect();
    LinkOutcome::Linked { relations }
}

fn nodes_block(nodes: &[SynthesisNode]) -> String {
    nodes
        .iter()
        .map(|n| format!("[{}] {} -- {}", n.id, n.title, n.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Result of linking one micro-idea.
#[derive(Debug)]
pub struct Linking {
    pub outcome: Result<LinkOutcome, GatewayError>,
    pub records: Vec<RunRecord>,
}

/// Link one micro-idea against the node set. Schema-invalid output earns
/// one corrective re-prompt, then [`LinkOutcome::Invalid`].
pub fn link_micro_idea(
    micro_idea: &MicroIdea,
    nodes: &[SynthesisNode],
    scheme: &CodingScheme,
    template: &PromptTemplate,
    defaults: &RequestDefaults,
    gateway: &Gateway,
) -> Result<Linking, Stage3Error> {
    if nodes.is_empty() {
        return Err(Stage3Error::NoNodes);
    }
    let vars = [
        ("scheme_guide", scheme.guide_text()),
        ("nodes_block", nodes_block(nodes)),
        ("micro_idea", format!("{} ({})", micro_idea.statement, micro_idea.label.as_str())),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let prompt = template.render(&vars)?;
    let hint = stage3_hint(&scheme.scheme_id);

    let mut records = Vec::new();
    let request = defaults.request(STAGE3_SYSTEM_PROMPT, prompt.clone(), Some(hint.clone()));
    let (result, record) = gateway.complete_with_record(&request);
    records.extend(record);
    let first_raw = match result {
        Ok(result) => result.raw_text,
        Err(err) => return Ok(Linking { outcome: Err(err), records }),
    };
    match parse_stage3_payload(&first_raw, scheme, nodes, &micro_idea.id) {
        Ok(outcome) => Ok(Linking { outcome: Ok(outcome), records }),
        Err(problem) => {
            let retry_prompt = format!(
                "{prompt}\n\nYour previous reply was rejected: {problem}. Reply again with one JSON \
                 object of the form {{\"links\": [...]}} using only the listed node ids (or \
                 \"uncategorized\") and only the category names given above."
            );
            let retry = defaults.request(STAGE3_SYSTEM_PROMPT, retry_prompt, Some(hint));
            let (retry_result, retry_record) = gateway.complete_with_record(&retry);
            records.extend(retry_record);
            let second_raw = match retry_result {
                Ok(result) => result.raw_text,
                Err(err) => return Ok(Linking { outcome: Err(err), records }),
            };
            let outcome = match parse_stage3_payload(&second_raw, scheme, nodes, &micro_idea.id) {
                Ok(outcome) => outcome,
                Err(problem) => LinkOutcome::Invalid(InvalidOutput {
                    detail: problem.to_string(),
                    raw_responses: vec![first_raw, second_raw],
                }),
            };
            Ok(Linking { outcome: Ok(outcome), records })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage3Counts {
    pub linked: usize,
    pub uncategorized: usize,
    pub invalid: usize,
    pub transport_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Item {
    pub micro_idea_id: String,
    #[serde(flatten)]
    pub verdict: Stage3Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Stage3Verdict {
    Linked { relations: Vec<EpistemicRelation> },
    Uncategorized { reason: String },
    Invalid { detail: String, raw_responses: Vec<String> },
    TransportFailed { message: String },
}

/// The persisted stage-3 report (`stage3_outcomes.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Report {
    pub template_id: String,
    pub template_hash: String,
    pub model_id: String,
    pub scheme_id: String,
    pub counts: Stage3Counts,
    pub items: Vec<Stage3Item>,
    pub record_fingerprints: Vec<String>,
}

impl Stage3Report {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serialization cannot fail");
        bytes.push(b'\n');
        bytes
    }

    /// Outcomes in item order, for consistency evaluation across runs.
    /// Transport failures count as invalid here since no output exists.
    pub fn outcomes(&self) -> Vec<LinkOutcome> {
        self.items
            .iter()
            .map(|item| match &item.verdict {
                Stage3Verdict::Linked { relations } => {
                    LinkOutcome::Linked { relations: relations.clone() }
                }
                Stage3Verdict::Uncategorized { reason } => {
                    LinkOutcome::Uncategorized { reason: reason.clone() }
                }
                Stage3Verdict::Invalid { detail, raw_responses } => LinkOutcome::Invalid(InvalidOutput {
                    detail: detail.clone(),
                    raw_responses: raw_responses.clone(),
                }),
                Stage3Verdict::TransportFailed { message } => LinkOutcome::Invalid(InvalidOutput {
                    detail: format!("transport: {message}"),
                    raw_responses: Vec::new(),
                }),
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct Stage3Run {
    /// One slot per micro-idea, order-aligned.
    pub outcomes: Vec<Result<LinkOutcome, GatewayError>>,
    pub records: Vec<RunRecord>,
    pub report: Stage3Report,
}

/// Link every micro-idea with up to `parallelism` in flight. Per-item
/// failures never abort the batch.
pub fn run_stage3(
    micro_ideas: &[MicroIdea],
    nodes: &[SynthesisNode],
    scheme: &CodingScheme,
    template: &PromptTemplate,
    defaults: &RequestDefaults,
    gateway: &Gateway,
    parallelism: usize,
) -> Result<Stage3Run, Stage3Error> {
    if nodes.is_empty() {
        return Err(Stage3Error::NoNodes);
    }
    let workers = parallelism.min(micro_ideas.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Linking, Stage3Error>>>> =
        micro_ideas.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= micro_ideas.len() {
                    break;
                }
                let linking = link_micro_idea(&micro_ideas[idx], nodes, scheme, template, defaults, gateway);
                *slots[idx].lock().expect("slot poisoned") = Some(linking);
            });
        }
    });

    let mut outcomes = Vec::with_capacity(micro_ideas.len());
    let mut records = Vec::new();
    let mut counts = Stage3Counts::default();
    let mut items = Vec::with_capacity(micro_ideas.len());
    for (micro_idea, slot) in micro_ideas.iter().zip(slots) {
        let linking = slot.into_inner().expect("slot poisoned").expect("worker filled every slot")?;
        records.extend(linking.records);
        let verdict = match &linking.outcome {
            Ok(LinkOutcome::Linked { relations }) => {
                counts.linked += 1;
                Stage3Verdict::Linked { relations: relations.clone() }
            }
            Ok(LinkOutcome::Uncategorized { reason }) => {
                counts.uncategorized += 1;
                Stage3Verdict::Uncategorized { reason: reason.clone() }
            }
            Ok(LinkOutcome::Invalid(invalid)) => {
                counts.invalid += 1;
                Stage3Verdict::Invalid {
                    detail: invalid.detail.clone(),
                    raw_responses: invalid.raw_responses.clone(),
                }
            }
            Err(err) => {
                counts.transport_failed += 1;
                Stage3Verdict::TransportFailed { message: err.to_string() }
            }
        };
        items.push(Stage3Item { micro_idea_id: micro_idea.id.clone(), verdict });
        outcomes.push(linking.outcome);
    }

    let report = Stage3Report {
        template_id: template.template_id.clone(),
        template_hash: template.content_hash.clone(),
        model_id: defaults.model_id.clone(),
        scheme_id: scheme.scheme_id.clone(),
        counts,
        items,
        record_fingerprints: records.iter().map(|r| r.request_fingerprint.clone()).collect(),
    };
    Ok(Stage3Run { outcomes, records, report })
}

/// Assemble the final graph from stage outputs. Invalid outcomes become
/// uncategorized relations flagged `invalid_output=true` in the rationale;
/// the assembled graph always passes validation.
pub fn assemble_graph(
    micro_ideas: &[MicroIdea],
    nodes: &[SynthesisNode],
    outcomes: &[LinkOutcome],
    scheme: &CodingScheme,
    metadata: GraphMetadata,
) -> Result<KnowledgeSynthesisGraph, Stage3Error> {
    if micro_ideas.len() != outcomes.len() {
        return Err(Stage3Error::Misaligned {
            micro_ideas: micro_ideas.len(),
            outcomes: outcomes.len(),
        });
    }
    let mut relations = Vec::new();
    for (micro_idea, outcome) in micro_ideas.iter().zip(outcomes) {
        match outcome {
            LinkOutcome::Linked { relations: rels } => relations.extend(rels.iter().cloned()),
            LinkOutcome::Uncategorized { reason } => relations.push(EpistemicRelation {
                micro_idea_id: micro_idea.id.clone(),
                target: RelationTarget::Uncategorized,
                link: None,
                rationale: (!reason.is_empty()).then(|| reason.clone()),
                scheme_id: scheme.scheme_id.clone(),
            }),
            LinkOutcome::Invalid(_) => relations.push(EpistemicRelation {
                micro_idea_id: micro_idea.id.clone(),
                target: RelationTarget::Uncategorized,
                link: None,
                rationale: Some("invalid_output=true".to_string()),
                scheme_id: scheme.scheme_id.clone(),
            }),
        }
    }
    let graph = KnowledgeSynthesisGraph {
        micro_ideas: micro_ideas.to_vec(),
        synthesis_nodes: nodes.to_vec(),
        relations,
        schemes: vec![scheme.clone()],
        metadata,
    };
    let report = validate(&graph);
    if !report.is_valid() {
        return Err(Stage3Error::AssembledInvalid { report });
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{StubBackend, StubReply};
    use crate::graph::MicroIdeaLabel;
    use crate::prompts::{builtin_schemes, PromptRegistry, VersionTag};

    fn nodes() -> Vec<SynthesisNode> {
        vec![
            SynthesisNode::new("reading-clt", "summary_instructor", "Working memory limits", "Narrow."),
            SynthesisNode::new("reading-clt", "summary_instructor", "Schema construction", "Widens."),
        ]
    }

    fn micro_idea() -> MicroIdea {
        MicroIdea::new("a1", "Worked examples reduce early load.", MicroIdeaLabel::Analytical)
    }

    fn scheme(id: &str) -> CodingScheme {
        builtin_schemes().into_iter().find(|s| s.scheme_id == id).unwrap()
    }

    fn template(tag: VersionTag) -> crate::prompts::PromptTemplate {
        PromptRegistry::builtin().template(3, tag).unwrap().clone()
    }

    #[test]
    fn two_level_payload_parses_to_linked() {
        let nodes = nodes();
        let raw = format!(
            r#"{{"links": [{{"target": "{}", "stance": "push_back", "function": "question", "rationale": "r"}}]}}"#,
            nodes[0].id
        );
        let outcome = parse_stage3_payload(&raw, &scheme("p3"), &nodes, "mi_x").unwrap();
        match outcome {
            LinkOutcome::Linked { relations } => {
                assert_eq!(relations.len(), 1);
                let link = relations[0].link.as_ref().unwrap();
                assert_eq!(link.stance(), Some(Stance::PushBack));
                assert_eq!(link.function_slot(), "question");
                assert_eq!(relations[0].scheme_id, "p3");
            }
            other => panic!("expected linked, got {other:?}"),
        }
    }

    #[test]
    fn uncategorized_payload_parses() {
        let outcome =
            parse_stage3_payload(r#"{"links": [{"target": "uncategorized"}]}"#, &scheme("p3"), &nodes(), "mi_x")
                .unwrap();
        assert!(matches!(outcome, LinkOutcome::Uncategorized { .. }));
    }

    #[test]
    fn unknown_target_is_dangling() {
        let err = parse_stage3_payload(
            r#"{"links": [{"target": "n99", "stance": "build_toward", "function": "ground"}]}"#,
            &scheme("p3"),
            &nodes(),
            "mi_x",
        )
        .unwrap_err();
        assert_eq!(err, Stage3PayloadError::DanglingTarget { target: "n99".to_string() });
    }

    #[test]
    fn flat_scheme_takes_category_in_function_slot() {
        let nodes = nodes();
        let raw = format!(r#"{{"links": [{{"target": "{}", "function": "critique"}}]}}"#, nodes[0].id);
        let outcome = parse_stage3_payload(&raw, &scheme("p2"), &nodes, "mi_x").unwrap();
        match outcome {
            LinkOutcome::Linked { relations } => {
                let link = relations[0].link.as_ref().unwrap();
                assert_eq!(link.stance(), None);
                assert_eq!(link.function_slot(), "critique");
            }
            other => panic!("expected linked, got {other:?}"),
        }
    }

    #[test]
    fn flat_scheme_rejects_stance_and_foreign_category() {
        let nodes = nodes();
        let with_stance = format!(
            r#"{{"links": [{{"target": "{}", "stance": "build_toward", "function": "support"}}]}}"#,
            nodes[0].id
        );
        assert_eq!(
            parse_stage3_payload(&with_stance, &scheme("p2"), &nodes, "mi_x").unwrap_err(),
            Stage3PayloadError::FlatShape
        );
        let foreign = format!(r#"{{"links": [{{"target": "{}", "function": "exemplify"}}]}}"#, nodes[0].id);
        assert!(matches!(
            parse_stage3_payload(&foreign, &scheme("p2"), &nodes, "mi_x").unwrap_err(),
            Stage3PayloadError::CategoryDomain { .. }
        ));
    }

    #[test]
    fn dangling_target_twice_becomes_invalid() {
        let stub = StubBackend::scripted().with_rule(
            |_| true,
            StubReply::Text(
                r#"{"links": [{"target": "n99", "stance": "build_toward", "function": "ground"}]}"#
                    .to_string(),
            ),
        );
        let gateway = Gateway::new(Box::new(stub));
        let linking = link_micro_idea(
            &micro_idea(),
            &nodes(),
            &scheme("p3"),
            &template(VersionTag::P3),
            &RequestDefaults::deterministic("stub-alpha"),
            &gateway,
        )
        .unwrap();
        match linking.outcome.unwrap() {
            LinkOutcome::Invalid(invalid) => {
                assert!(invalid.detail.contains("n99"));
                assert_eq!(invalid.raw_responses.len(), 2);
            }
            other => panic!("expected invalid, got {other:?}"),
        }
        assert_eq!(linking.records.len(), 2);
    }

    #[test]
    fn batch_counts_partition_micro_ideas() {
        let ideas = vec![
            MicroIdea::new("a1", "Working memory is narrow.", MicroIdeaLabel::Descriptive),
            MicroIdea::new("a2", "What if practice faded support?", MicroIdeaLabel::Generative),
            MicroIdea::new("a3", "The lab evidence may not transfer.", MicroIdeaLabel::Analytical),
        ];
        let gateway = Gateway::new(Box::new(StubBackend::synthesizer()));
        let run = run_stage3(
            &ideas,
            &nodes(),
            &scheme("p3"),
            &template(VersionTag::P3),
            &RequestDefaults::deterministic("stub-alpha"),
            &gateway,
            2,
        )
        .unwrap();
        assert_eq!(run.outcomes.len(), 3);
        let c = &run.report.counts;
        assert_eq!(c.linked + c.uncategorized + c.invalid + c.transport_failed, 3);
        assert_eq!(run.report.outcomes().len(), 3);
    }

    #[test]
    fn empty_micro_idea_list_is_fine() {
        let gateway = Gateway::new(Box::new(StubBackend::synthesizer()));
        let run = run_stage3(
            &[],
            &nodes(),
            &scheme("p3"),
            &template(VersionTag::P3),
            &RequestDefaults::deterministic("stub-alpha"),
            &gateway,
            2,
        )
        .unwrap();
        assert!(run.outcomes.is_empty());
        assert_eq!(run.report.counts, Stage3Counts::default());
    }

    #[test]
    fn empty_node_list_is_config_error() {
        let gateway = Gateway::new(Box::new(StubBackend::synthesizer()));
        assert!(matches!(
            run_stage3(
                &[micro_idea()],
                &[],
                &scheme("p3"),
                &template(VersionTag::P3),
                &RequestDefaults::deterministic("stub-alpha"),
                &gateway,
                1,
            ),
            Err(Stage3Error::NoNodes)
        ));
    }

    #[test]
    fn assemble_counts_and_flags() {
        let ideas = vec![
            MicroIdea::new("a1", "Statement one.", MicroIdeaLabel::Descriptive),
            MicroIdea::new("a2", "Statement two.", MicroIdeaLabel::Interpretive),
            MicroIdea::new("a3", "Statement three.", MicroIdeaLabel::Analytical),
            MicroIdea::new("a4", "Statement four.", MicroIdeaLabel::Generative),
        ];
        let nodes = nodes();
        let sch = scheme("p3");
        let linked = |idea: &MicroIdea| LinkOutcome::Linked {
            relations: vec![EpistemicRelation {
                micro_idea_id: idea.id.clone(),
                target: RelationTarget::Node(nodes[0].id.clone()),
                link: Some(RelationLink::TwoLevel {
                    stance: Stance::BuildToward,
                    function: crate::graph::RelationFunction::Ground,
                }),
                rationale: None,
                scheme_id: "p3".to_string(),
            }],
        };
        let outcomes = vec![
            linked(&ideas[0]),
            linked(&ideas[1]),
            linked(&ideas[2]),
            LinkOutcome::Uncategorized { reason: "no fit".to_string() },
        ];
        let graph = assemble_graph(&ideas, &nodes, &outcomes, &sch, GraphMetadata::default()).unwrap();
        assert_eq!(graph.micro_ideas.len(), 4);
        assert_eq!(graph.relations.len(), 4);
        let stance_bearing = graph.relations.iter().filter(|r| r.link.is_some()).count();
        assert_eq!(stance_bearing, 3);
        assert!(validate(&graph).is_valid());

        // Invalid outcome becomes a flagged uncategorized edge.
        let outcomes = vec![
            linked(&ideas[0]),
            linked(&ideas[1]),
            linked(&ideas[2]),
            LinkOutcome::Invalid(InvalidOutput { detail: "d".into(), raw_responses: vec![] }),
        ];
        let graph = assemble_graph(&ideas, &nodes, &outcomes, &sch, GraphMetadata::default()).unwrap();
        let flagged = graph
            .relations
            .iter()
            .find(|r| r.micro_idea_id == ideas[3].id)
            .unwrap();
        assert_eq!(flagged.target, RelationTarget::Uncategorized);
        assert_eq!(flagged.rationale.as_deref(), Some("invalid_output=true"));
    }

    #[test]
    fn assemble_with_no_micro_ideas_is_valid() {
        let graph =
            assemble_graph(&[], &nodes(), &[], &scheme("p3"), GraphMetadata::default()).unwrap();
        assert!(graph.micro_ideas.is_empty());
        assert_eq!(graph.synthesis_nodes.len(), 2);
        assert!(validate(&graph).is_valid());
    }

    #[test]
    fn assemble_rejects_misaligned_inputs() {
        assert!(matches!(
            assemble_graph(
                &[micro_idea()],
                &nodes(),
                &[],
                &scheme("p3"),
                GraphMetadata::default()
            ),
            Err(Stage3Error::Misaligned { .. })
        ));
    }
}
