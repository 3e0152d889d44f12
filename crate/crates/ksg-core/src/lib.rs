//! Knowledge Synthesis Graph construction toolkit.
//!
//! Ingests student social-annotation corpora, runs a three-stage
//! LLM pipeline (micro-idea extraction, synthesis-node generation,
//! epistemic-relation linking) against pluggable backends, and evaluates
//! pipeline quality with agreement and consistency metrics under versioned
//! prompt configurations.

pub mod corpus;
pub mod eval;
pub mod gateway;
pub mod graph;
pub mod hashing;
pub mod payload;
pub mod pipeline;
pub mod prompts;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod store;
pub mod timefmt;

pub use corpus::{Annotation, Corpus, GoldCoding, GoldLabel, Reading};
pub use gateway::{CompletionRequest, CompletionResult, Gateway, RunRecord};
pub use graph::{
    validate, EpistemicRelation, KnowledgeSynthesisGraph, MicroIdea, MicroIdeaLabel, RelationFunction,
    Stance, SynthesisNode,
};
pub use prompts::{builtin_schemes, CodingScheme, PromptRegistry, VersionTag};

/// Version string recorded in run manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
