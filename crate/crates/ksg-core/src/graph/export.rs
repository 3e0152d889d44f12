//! Graph serialization: canonical JSON (lossless, versioned), GraphML 1.0,
//! and Graphviz DOT. Export is a pure function of the graph value — the
//! graph is canonicalized first, so structurally equal graphs produce
//! identical bytes in every format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    validate, EpistemicRelation, GraphMetadata, KnowledgeSynthesisGraph, MicroIdea, RelationLink,
    RelationTarget, Stance, SynthesisNode, ValidationReport, UNCATEGORIZED,
};
use crate::prompts::CodingScheme;

pub const GRAPH_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    GraphMl,
    Dot,
}

impl ExportFormat {
    pub fn parse(value: &str) -> Option<ExportFormat> {
        match value.to_ascii_lowercase().as_str() {
            "json" => Some(ExportFormat::Json),
            "graphml" => Some(ExportFormat::GraphMl),
            "dot" => Some(ExportFormat::Dot),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("graph failed validation:\n{report}")]
    InvalidGraph { report: ValidationReport },
}

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("graph JSON is not parseable: {detail}")]
    Parse { detail: String },
    #[error("graph JSON does not match the schema at {path}: {detail}")]
    Schema { path: String, detail: String },
    #[error("unsupported graph schema_version '{found}' (expected '{expected}')")]
    SchemaVersion { found: String, expected: String },
}

/// Wire shape of a relation: stance and function share one flat layout,
/// with the flat-scheme category carried in the `function` slot.
#[derive(Debug, Serialize, Deserialize)]
struct RelationWire {
    micro_idea_id: String,
    target: String,
    stance: Option<Stance>,
    function: Option<String>,
    rationale: Option<String>,
    scheme_id: String,
}

impl From<&EpistemicRelation> for RelationWire {
    fn from(rel: &EpistemicRelation) -> Self {
        RelationWire {
            micro_idea_id: rel.micro_idea_id.clone(),
            target: rel.target.as_wire().to_string(),
            stance: rel.link.as_ref().and_then(|l| l.stance()),
            function: rel.link.as_ref().map(|l| l.function_slot().to_string()),
            rationale: rel.rationale.clone(),
            scheme_id: rel.scheme_id.clone(),
        }
    }
}

impl TryFrom<RelationWire> for EpistemicRelation {
    type Error = String;

    fn try_from(wire: RelationWire) -> Result<Self, Self::Error> {
        let target = if wire.target == UNCATEGORIZED {
            RelationTarget::Uncategorized
        } else {
            RelationTarget::Node(wire.target)
        };
        let link = match (wire.stance, wire.function) {
            (Some(stance), Some(function)) => {
                let function = super::RelationFunction::parse(&function)
                    .ok_or_else(|| format!("'{function}' is not a relation function"))?;
                Some(RelationLink::TwoLevel { stance, function })
            }
            (None, Some(category)) => Some(RelationLink::Flat { category }),
            (Some(_), None) => return Err("stance given without a function".to_string()),
            (None, None) => None,
        };
        Ok(EpistemicRelation {
            micro_idea_id: wire.micro_idea_id,
            target,
            link,
            rationale: wire.rationale,
            scheme_id: wire.scheme_id,
        })
    }
}

impl Serialize for EpistemicRelation {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RelationWire::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EpistemicRelation {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = RelationWire::deserialize(deserializer)?;
        EpistemicRelation::try_from(wire).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    schema_version: String,
    metadata: GraphMetadata,
    schemes: Vec<CodingScheme>,
    micro_ideas: Vec<MicroIdea>,
    synthesis_nodes: Vec<SynthesisNode>,
    relations: Vec<EpistemicRelation>,
}

/// Serialize a graph. Refuses invalid graphs, returning the validation
/// report instead of bytes.
pub fn export(graph: &KnowledgeSynthesisGraph, format: ExportFormat) -> Result<Vec<u8>, ExportError> {
    let report = validate(graph);
    if !report.is_valid() {
        return Err(ExportError::InvalidGraph { report });
    }
    let canonical = graph.canonicalized();
    Ok(match format {
        ExportFormat::Json => to_json(&canonical),
        ExportFormat::GraphMl => to_graphml(&canonical).into_bytes(),
        ExportFormat::Dot => to_dot(&canonical).into_bytes(),
    })
}

/// Canonical JSON bytes without the validity gate; used for on-disk run
/// artifacts and fingerprints where the caller has already validated.
pub fn to_canonical_json(graph: &KnowledgeSynthesisGraph) -> Vec<u8> {
    to_json(&graph.canonicalized())
}

fn to_json(canonical: &KnowledgeSynthesisGraph) -> Vec<u8> {
    let file = GraphFile {
        schema_version: GRAPH_SCHEMA_VERSION.to_string(),
        metadata: canonical.metadata.clone(),
        schemes: canonical.schemes.clone(),
        micro_ideas: canonical.micro_ideas.clone(),
        synthesis_nodes: canonical.synthesis_nodes.clone(),
        relations: canonical.relations.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("graph serialization cannot fail");
    bytes.push(b'\n');
    bytes
}

/// Parse canonical graph JSON. Violations present in the source survive
/// the round trip — import never repairs, it only decodes.
pub fn import_json(bytes: &[u8]) -> Result<KnowledgeSynthesisGraph, ImportError> {
    let mut deserializer = serde_json::Deserializer::from_slice(bytes);
    let file: GraphFile = serde_path_to_error::deserialize(&mut deserializer).map_err(|err| {
        let inner = err.inner();
        if inner.is_data() {
            ImportError::Schema { path: err.path().to_string(), detail: inner.to_string() }
        } else {
            ImportError::Parse { detail: inner.to_string() }
        }
    })?;
    if file.schema_version != GRAPH_SCHEMA_VERSION {
        return Err(ImportError::SchemaVersion {
            found: file.schema_version,
            expected: GRAPH_SCHEMA_VERSION.to_string(),
        });
    }
    Ok(KnowledgeSynthesisGraph {
        micro_ideas: file.micro_ideas,
        synthesis_nodes: file.synthesis_nodes,
        relations: file.relations,
        schemes: file.schemes,
        metadata: file.metadata,
    })
}

fn xml_escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            other => out.push(other),
        }
    }
    out
}

fn uses_uncategorized(graph: &KnowledgeSynthesisGraph) -> bool {
    graph.relations.iter().any(|r| r.target == RelationTarget::Uncategorized)
}

fn to_graphml(g: &KnowledgeSynthesisGraph) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\"");
    out.push_str(" xmlns:xsi=\"http://www.w3.org/2001/XMLSchema-instance\"");
    out.push_str(" xsi:schemaLocation=\"http://graphml.graphdrawing.org/xmlns");
    out.push_str(" http://graphml.graphdrawing.org/xmlns/1.0/graphml.xsd\">\n");
    for (id, target, name) in [
        ("kind", "node", "kind"),
        ("text", "node", "text"),
        ("label", "node", "label"),
        ("stance", "edge", "stance"),
        ("function", "edge", "function"),
        ("scheme", "edge", "scheme"),
        ("rationale", "edge", "rationale"),
    ] {
        out.push_str(&format!(
            "  <key id=\"{id}\" for=\"{target}\" attr.name=\"{name}\" attr.type=\"string\"/>\n"
        ));
    }
    out.push_str("  <graph id=\"ksg\" edgedefault=\"directed\">\n");
    for idea in &g.micro_ideas {
        out.push_str(&format!("    <node id=\"{}\">\n", xml_escape(&idea.id)));
        out.push_str("      <data key=\"kind\">micro_idea</data>\n");
        out.push_str(&format!("      <data key=\"text\">{}</data>\n", xml_escape(&idea.statement)));
        out.push_str(&format!("      <data key=\"label\">{}</data>\n", idea.label.as_str()));
        out.push_str("    </node>\n");
    }
    for node in &g.synthesis_nodes {
        out.push_str(&format!("    <node id=\"{}\">\n", xml_escape(&node.id)));
        out.push_str("      <data key=\"kind\">synthesis_node</data>\n");
        out.push_str(&format!("      <data key=\"text\">{}</data>\n", xml_escape(&node.title)));
        out.push_str("    </node>\n");
    }
    if uses_uncategorized(g) {
        out.push_str(&format!("    <node id=\"{UNCATEGORIZED}\">\n"));
        out.push_str("      <data key=\"kind\">uncategorized</data>\n");
        out.push_str(&format!("      <data key=\"text\">{UNCATEGORIZED}</data>\n"));
        out.push_str("    </node>\n");
    }
    for (index, rel) in g.relations.iter().enumerate() {
        out.push_str(&format!(
            "    <edge id=\"e{index}\" source=\"{}\" target=\"{}\">\n",
            xml_escape(&rel.micro_idea_id),
            xml_escape(rel.target.as_wire()),
        ));
        if let Some(link) = &rel.link {
            if let Some(stance) = link.stance() {
                out.push_str(&format!("      <data key=\"stance\">{}</data>\n", stance.as_str()));
            }
            out.push_str(&format!(
                "      <data key=\"function\">{}</data>\n",
                xml_escape(link.function_slot())
            ));
        }
        out.push_str(&format!("      <data key=\"scheme\">{}</data>\n", xml_escape(&rel.scheme_id)));
        if let Some(rationale) = &rel.rationale {
            out.push_str(&format!("      <data key=\"rationale\">{}</data>\n", xml_escape(rationale)));
        }
        out.push_str("    </edge>\n");
    }
    out.push_str("  </graph>\n</graphml>\n");
    out
}

fn dot_escape(value: &str) -> String {
    value.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn to_dot(g: &KnowledgeSynthesisGraph) -> String {
    let mut out = String::new();
    out.push_str("digraph ksg {\n  rankdir=LR;\n");
    for idea in &g.micro_ideas {
        out.push_str(&format!(
            "  \"{}\" [shape=box, kind=\"micro_idea\", category=\"{}\", label=\"{}\"];\n",
            dot_escape(&idea.id),
            idea.label.as_str(),
            dot_escape(&idea.statement),
        ));
    }
    for node in &g.synthesis_nodes {
        out.push_str(&format!(
            "  \"{}\" [shape=ellipse, kind=\"synthesis_node\", label=\"{}\"];\n",
            dot_escape(&node.id),
            dot_escape(&node.title),
        ));
    }
    if uses_uncategorized(g) {
        out.push_str(&format!(
            "  \"{UNCATEGORIZED}\" [shape=diamond, kind=\"uncategorized\", label=\"{UNCATEGORIZED}\"];\n"
        ));
    }
    for rel in &g.relations {
        let mut attrs = Vec::new();
        if let Some(link) = &rel.link {
            if let Some(stance) = link.stance() {
                attrs.push(format!("stance=\"{}\"", stance.as_str()));
            }
            attrs.push(format!("function=\"{}\"", dot_escape(link.function_slot())));
        }
        attrs.push(format!("scheme=\"{}\"", dot_escape(&rel.scheme_id)));
        out.push_str(&format!(
            "  \"{}\" -> \"{}\" [{}];\n",
            dot_escape(&rel.micro_idea_id),
            dot_escape(rel.target.as_wire()),
            attrs.join(", "),
        ));
    }
    out.push_str("}\n");
    out
}
