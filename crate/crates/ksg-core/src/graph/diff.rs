//! Structured graph deltas. `patch(a, diff(a, b))` reconstructs `b`
//! (up to canonical ordering), which is what prompt-version comparisons
//! and a future interactive editor need.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EpistemicRelation, GraphMetadata, KnowledgeSynthesisGraph, MicroIdea, SynthesisNode};
use crate::prompts::CodingScheme;

/// A relation together with its rank inside its micro-idea's relation list
/// (rank 0 = primary). Rank makes deltas order-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRelation {
    pub rank: usize,
    #[serde(flatten)]
    pub relation: EpistemicRelation,
}

/// Added/removed components between two graphs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphDelta {
    /// Present when the two graphs' metadata differ; holds the second
    /// graph's metadata.
    pub metadata: Option<GraphMetadata>,
    pub schemes_added: Vec<CodingScheme>,
    pub schemes_removed: Vec<CodingScheme>,
    pub micro_ideas_added: Vec<MicroIdea>,
    pub micro_ideas_removed: Vec<MicroIdea>,
    pub nodes_added: Vec<SynthesisNode>,
    pub nodes_removed: Vec<SynthesisNode>,
    pub relations_added: Vec<RankedRelation>,
    pub relations_removed: Vec<RankedRelation>,
}

impl GraphDelta {
    pub fn is_empty(&self) -> bool {
        self.metadata.is_none()
            && self.schemes_added.is_empty()
            && self.schemes_removed.is_empty()
            && self.micro_ideas_added.is_empty()
            && self.micro_ideas_removed.is_empty()
            && self.nodes_added.is_empty()
            && self.nodes_removed.is_empty()
            && self.relations_added.is_empty()
            && self.relations_removed.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("delta removes a {what} that the base graph does not contain")]
    MissingRemoval { what: &'static str },
}

/// Multiset difference: returns (in `b` but not `a`, in `a` but not `b`),
/// matching equal values pairwise.
fn multiset_diff<T: PartialEq + Clone>(a: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
    let mut remaining: Vec<Option<&T>> = b.iter().map(Some).collect();
    let mut removed = Vec::new();
    for item in a {
        match remaining.iter_mut().find(|slot| slot.map_or(false, |x| x == item)) {
            Some(slot) => *slot = None,
            None => removed.push(item.clone()),
        }
    }
    let added = remaining.into_iter().flatten().cloned().collect();
    (added, removed)
}

fn remove_once<T: PartialEq>(items: &mut Vec<T>, needle: &T, what: &'static str) -> Result<(), PatchError> {
    match items.iter().position(|x| x == needle) {
        Some(idx) => {
            items.remove(idx);
            Ok(())
        }
        None => Err(PatchError::MissingRemoval { what }),
    }
}

/// Relations of a canonical graph annotated with per-micro-idea ranks.
fn ranked_relations(canonical: &KnowledgeSynthesisGraph) -> Vec<RankedRelation> {
    let mut ranks: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    canonical
        .relations
        .iter()
        .map(|rel| {
            let rank = ranks.entry(rel.micro_idea_id.as_str()).or_insert(0);
            let current = *rank;
            *rank += 1;
            RankedRelation { rank: current, relation: rel.clone() }
        })
        .collect()
}

/// Structured delta from `a` to `b`. `diff(g, g)` is empty.
pub fn diff(a: &KnowledgeSynthesisGraph, b: &KnowledgeSynthesisGraph) -> GraphDelta {
    let ca = a.canonicalized();
    let cb = b.canonicalized();
    let (schemes_added, schemes_removed) = multiset_diff(&ca.schemes, &cb.schemes);
    let (micro_ideas_added, micro_ideas_removed) = multiset_diff(&ca.micro_ideas, &cb.micro_ideas);
    let (nodes_added, nodes_removed) = multiset_diff(&ca.synthesis_nodes, &cb.synthesis_nodes);
    let (relations_added, relations_removed) =
        multiset_diff(&ranked_relations(&ca), &ranked_relations(&cb));
    GraphDelta {
        metadata: (ca.metadata != cb.metadata).then(|| cb.metadata.clone()),
        schemes_added,
        schemes_removed,
        micro_ideas_added,
        micro_ideas_removed,
        nodes_added,
        nodes_removed,
        relations_added,
        relations_removed,
    }
}

/// Apply a delta produced by [`diff`]. Returns the patched graph in
/// canonical form; `patch(a, diff(a, b)) == b.canonicalized()`.
pub fn patch(a: &KnowledgeSynthesisGraph, delta: &GraphDelta) -> Result<KnowledgeSynthesisGraph, PatchError> {
    let ca = a.canonicalized();
    let mut schemes = ca.schemes.clone();
    for s in &delta.schemes_removed {
        remove_once(&mut schemes, s, "scheme")?;
    }
    schemes.extend(delta.schemes_added.iter().cloned());

    let mut micro_ideas = ca.micro_ideas.clone();
    for m in &delta.micro_ideas_removed {
        remove_once(&mut micro_ideas, m, "micro-idea")?;
    }
    micro_ideas.extend(delta.micro_ideas_added.iter().cloned());

    let mut nodes = ca.synthesis_nodes.clone();
    for n in &delta.nodes_removed {
        remove_once(&mut nodes, n, "synthesis node")?;
    }
    nodes.extend(delta.nodes_added.iter().cloned());

    let mut relations = ranked_relations(&ca);
    for r in &delta.relations_removed {
        remove_once(&mut relations, r, "relation")?;
    }
    relations.extend(delta.relations_added.iter().cloned());
    relations.sort_by(|x, y| {
        x.relation
            .micro_idea_id
            .cmp(&y.relation.micro_idea_id)
            .then(x.rank.cmp(&y.rank))
    });

    let patched = KnowledgeSynthesisGraph {
        micro_ideas,
        synthesis_nodes: nodes,
        relations: relations.into_iter().map(|r| r.relation).collect(),
        schemes,
        metadata: delta.metadata.clone().unwrap_or(ca.metadata),
    };
    Ok(patched.canonicalized())
}
