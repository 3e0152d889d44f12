//! The Knowledge Synthesis Graph: micro-ideas and synthesis nodes joined by
//! epistemic relations, plus structural validation over the assembled value.
//!
//! The graph is bipartite by construction: a relation always runs from a
//! micro-idea to a synthesis node or to the distinguished uncategorized
//! sentinel. Values are immutable once assembled; every operation here
//! reads, canonicalizes, or derives a new value.

mod diff;
mod export;

pub use diff::{diff, patch, GraphDelta, PatchError, RankedRelation};
pub use export::{export, import_json, to_canonical_json, ExportError, ExportFormat, ImportError};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::hashing::{micro_idea_id, synthesis_node_id};
use crate::prompts::CodingScheme;

/// Upper bound on relations per micro-idea; the first relation in a
/// micro-idea's list is its primary link.
pub const MAX_LINKS: usize = 3;

/// Reserved relation-target word for micro-ideas no node could absorb.
pub const UNCATEGORIZED: &str = "uncategorized";

/// Epistemic function of a micro-idea (stage-1 taxonomy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroIdeaLabel {
    Descriptive,
    Interpretive,
    Analytical,
    Generative,
}

impl MicroIdeaLabel {
    pub const ALL: [MicroIdeaLabel; 4] = [
        MicroIdeaLabel::Descriptive,
        MicroIdeaLabel::Interpretive,
        MicroIdeaLabel::Analytical,
        MicroIdeaLabel::Generative,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MicroIdeaLabel::Descriptive => "descriptive",
            MicroIdeaLabel::Interpretive => "interpretive",
            MicroIdeaLabel::Analytical => "analytical",
            MicroIdeaLabel::Generative => "generative",
        }
    }

    /// Case-insensitive, whitespace-tolerant parse; `"Generative "` is
    /// accepted, `"evaluative"` is not.
    pub fn parse_lenient(value: &str) -> Option<MicroIdeaLabel> {
        let normalized = value.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|label| label.as_str() == normalized)
    }
}

impl fmt::Display for MicroIdeaLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Level-1 relation stance: build toward (+) or push back (-).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    BuildToward,
    PushBack,
}

impl Stance {
    pub const ALL: [Stance; 2] = [Stance::BuildToward, Stance::PushBack];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stance::BuildToward => "build_toward",
            Stance::PushBack => "push_back",
        }
    }

    pub fn parse(value: &str) -> Option<Stance> {
        Self::ALL.into_iter().find(|s| s.as_str() == value.trim())
    }
}

/// Level-2 relation function within a stance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationFunction {
    Ground,
    ExplainElaborate,
    NewIdea,
    Question,
}

impl RelationFunction {
    pub const ALL: [RelationFunction; 4] = [
        RelationFunction::Ground,
        RelationFunction::ExplainElaborate,
        RelationFunction::NewIdea,
        RelationFunction::Question,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RelationFunction::Ground => "ground",
            RelationFunction::ExplainElaborate => "explain_elaborate",
            RelationFunction::NewIdea => "new_idea",
            RelationFunction::Question => "question",
        }
    }

    pub fn parse(value: &str) -> Option<RelationFunction> {
        Self::ALL.into_iter().find(|f| f.as_str() == value.trim())
    }
}

/// A standalone epistemic statement distilled from one annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroIdea {
    pub id: String,
    pub source_annotation_id: String,
    pub statement: String,
    pub label: MicroIdeaLabel,
}

impl MicroIdea {
    /// Build a micro-idea with its stable derived id.
    pub fn new(source_annotation_id: &str, statement: &str, label: MicroIdeaLabel) -> Self {
        MicroIdea {
            id: micro_idea_id(source_annotation_id, statement),
            source_annotation_id: source_annotation_id.to_string(),
            statement: statement.to_string(),
            label,
        }
    }
}

/// Where a synthesis node came from: the reading and the context mode the
/// generating run used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeProvenance {
    pub reading_id: String,
    pub context_mode: String,
}

/// A reading-derived higher-level idea that micro-ideas link to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisNode {
    pub id: String,
    pub title: String,
    pub description: String,
    pub provenance: NodeProvenance,
}

impl SynthesisNode {
    /// Build a node with its stable derived id.
    pub fn new(reading_id: &str, context_mode: &str, title: &str, description: &str) -> Self {
        SynthesisNode {
            id: synthesis_node_id(reading_id, title),
            title: title.to_string(),
            description: description.to_string(),
            provenance: NodeProvenance {
                reading_id: reading_id.to_string(),
                context_mode: context_mode.to_string(),
            },
        }
    }
}

/// Relation endpoint: a synthesis node or the uncategorized sentinel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationTarget {
    Node(String),
    Uncategorized,
}

impl RelationTarget {
    pub fn as_wire(&self) -> &str {
        match self {
            RelationTarget::Node(id) => id,
            RelationTarget::Uncategorized => UNCATEGORIZED,
        }
    }
}

/// Relation payload. Two-level under the stance x function scheme; a single
/// scheme category (carried in the function slot on the wire) under flat
/// schemes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationLink {
    TwoLevel { stance: Stance, function: RelationFunction },
    Flat { category: String },
}

impl RelationLink {
    pub fn stance(&self) -> Option<Stance> {
        match self {
            RelationLink::TwoLevel { stance, .. } => Some(*stance),
            RelationLink::Flat { .. } => None,
        }
    }

    /// Wire value of the function slot: the function name, or the flat
    /// category name.
    pub fn function_slot(&self) -> &str {
        match self {
            RelationLink::TwoLevel { function, .. } => function.as_str(),
            RelationLink::Flat { category } => category,
        }
    }
}

/// Edge from a micro-idea to a synthesis node (or uncategorized).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EpistemicRelation {
    pub micro_idea_id: String,
    pub target: RelationTarget,
    pub link: Option<RelationLink>,
    pub rationale: Option<String>,
    pub scheme_id: String,
}

/// Graph-level provenance carried in exports. `run_id` is the
/// deterministic pipeline fingerprint, not the run-store directory name;
/// `created_at` is only set for live-backend runs so that replayed runs
/// export byte-identical graphs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMetadata {
    pub run_id: String,
    pub prompt_versions: BTreeMap<String, String>,
    pub model_ids: Vec<String>,
    pub created_at: Option<String>,
}

/// The assembled Knowledge Synthesis Graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeSynthesisGraph {
    pub micro_ideas: Vec<MicroIdea>,
    pub synthesis_nodes: Vec<SynthesisNode>,
    pub relations: Vec<EpistemicRelation>,
    pub schemes: Vec<CodingScheme>,
    pub metadata: GraphMetadata,
}

impl KnowledgeSynthesisGraph {
    /// Canonical form: components ordered by id (relations stably by
    /// micro-idea id, preserving each idea's primary-first order). Two
    /// structurally equal graphs canonicalize to equal values and export
    /// to identical bytes.
    pub fn canonicalized(&self) -> KnowledgeSynthesisGraph {
        let mut g = self.clone();
        g.micro_ideas.sort_by(|a, b| a.id.cmp(&b.id));
        g.synthesis_nodes.sort_by(|a, b| a.id.cmp(&b.id));
        g.relations.sort_by(|a, b| a.micro_idea_id.cmp(&b.micro_idea_id));
        g.schemes.sort_by(|a, b| a.scheme_id.cmp(&b.scheme_id));
        g
    }

    /// Relations of one micro-idea in stored order (primary first).
    pub fn relations_of(&self, micro_idea_id: &str) -> Vec<&EpistemicRelation> {
        self.relations.iter().filter(|r| r.micro_idea_id == micro_idea_id).collect()
    }
}

/// One violated invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// The offending id (micro-idea, node, relation target, or scheme).
    pub subject: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateMicroIdeaId,
    DuplicateNodeId,
    UnknownMicroIdea,
    DanglingTarget,
    UncoveredMicroIdea,
    MaxLinksExceeded,
    UncategorizedWithPayload,
    MissingLinkPayload,
    UnknownScheme,
    CategoryOutsideScheme,
    SchemeShapeMismatch,
}

/// Validation output. Violations are data, not errors: an invalid graph is
/// representable and reportable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn kinds(&self) -> Vec<ViolationKind> {
        self.violations.iter().map(|v| v.kind).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "{:?} [{}]: {}", v.kind, v.subject, v.detail)?;
        }
        Ok(())
    }
}

/// Check every structural invariant of the graph and enumerate violations
/// with the offending ids. An empty report means the graph is valid.
pub fn validate(graph: &KnowledgeSynthesisGraph) -> ValidationReport {
    let mut violations = Vec::new();

    let mut idea_ids = BTreeSet::new();
    for idea in &graph.micro_ideas {
        if !idea_ids.insert(idea.id.as_str()) {
            violations.push(Violation {
                kind: ViolationKind::DuplicateMicroIdeaId,
                subject: idea.id.clone(),
                detail: "micro-idea id appears more than once".to_string(),
            });
        }
    }
    let mut node_ids = BTreeSet::new();
    for node in &graph.synthesis_nodes {
        if !node_ids.insert(node.id.as_str()) {
            violations.push(Violation {
                kind: ViolationKind::DuplicateNodeId,
                subject: node.id.clone(),
                detail: "synthesis-node id appears more than once".to_string(),
            });
        }
    }
    let schemes: BTreeMap<&str, &CodingScheme> =
        graph.schemes.iter().map(|s| (s.scheme_id.as_str(), s)).collect();

    let mut links_per_idea: BTreeMap<&str, usize> = BTreeMap::new();
    for relation in &graph.relations {
        let rel_subject = relation.micro_idea_id.clone();
        if !idea_ids.contains(relation.micro_idea_id.as_str()) {
            violations.push(Violation {
                kind: ViolationKind::UnknownMicroIdea,
                subject: rel_subject.clone(),
                detail: "relation references a micro-idea absent from the graph".to_string(),
            });
        }
        *links_per_idea.entry(relation.micro_idea_id.as_str()).or_insert(0) += 1;

        match (&relation.target, &relation.link) {
            (RelationTarget::Node(node_id), Some(link)) => {
                if !node_ids.contains(node_id.as_str()) {
                    violations.push(Violation {
                        kind: ViolationKind::DanglingTarget,
                        subject: node_id.clone(),
                        detail: format!("relation from '{rel_subject}' targets an unknown node"),
                    });
                }
                match schemes.get(relation.scheme_id.as_str()) {
                    None => violations.push(Violation {
                        kind: ViolationKind::UnknownScheme,
                        subject: relation.scheme_id.clone(),
                        detail: format!("relation from '{rel_subject}' uses a scheme absent from the graph"),
                    }),
                    Some(scheme) => match (scheme.two_level(), link) {
                        (true, RelationLink::Flat { .. }) => violations.push(Violation {
                            kind: ViolationKind::SchemeShapeMismatch,
                            subject: rel_subject.clone(),
                            detail: format!("flat category under two-level scheme '{}'", scheme.scheme_id),
                        }),
                        (false, RelationLink::TwoLevel { .. }) => violations.push(Violation {
                            kind: ViolationKind::SchemeShapeMismatch,
                            subject: rel_subject.clone(),
                            detail: format!("stance/function pair under flat scheme '{}'", scheme.scheme_id),
                        }),
                        (false, RelationLink::Flat { category }) => {
                            if !scheme.category_names().contains(&category.as_str()) {
                                violations.push(Violation {
                                    kind: ViolationKind::CategoryOutsideScheme,
                                    subject: category.clone(),
                                    detail: format!(
                                        "relation from '{rel_subject}' uses a category outside scheme '{}'",
                                        scheme.scheme_id
                                    ),
                                });
                            }
                        }
                        (true, RelationLink::TwoLevel { .. }) => {}
                    },
                }
            }
            (RelationTarget::Node(node_id), None) => {
                if !node_ids.contains(node_id.as_str()) {
                    violations.push(Violation {
                        kind: ViolationKind::DanglingTarget,
                        subject: node_id.clone(),
                        detail: format!("relation from '{rel_subject}' targets an unknown node"),
                    });
                }
                violations.push(Violation {
                    kind: ViolationKind::MissingLinkPayload,
                    subject: rel_subject.clone(),
                    detail: "node-targeted relation carries neither stance/function nor a category".to_string(),
                });
            }
            (RelationTarget::Uncategorized, Some(_)) => violations.push(Violation {
                kind: ViolationKind::UncategorizedWithPayload,
                subject: rel_subject.clone(),
                detail: "uncategorized relation must not carry stance/function or a category".to_string(),
            }),
            (RelationTarget::Uncategorized, None) => {}
        }
    }

    for idea in &graph.micro_ideas {
        match links_per_idea.get(idea.id.as_str()) {
            None => violations.push(Violation {
                kind: ViolationKind::UncoveredMicroIdea,
                subject: idea.id.clone(),
                detail: "micro-idea has no relation (uncategorized counts as one)".to_string(),
            }),
            Some(&count) if count > MAX_LINKS => violations.push(Violation {
                kind: ViolationKind::MaxLinksExceeded,
                subject: idea.id.clone(),
                detail: format!("micro-idea has {count} relations; at most {MAX_LINKS} allowed"),
            }),
            Some(_) => {}
        }
    }

    ValidationReport { violations }
}
