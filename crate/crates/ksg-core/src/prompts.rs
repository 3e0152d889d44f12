//! Prompt template registry and coding-scheme definitions.
//!
//! Templates are plain text with `{name}` placeholders and no conditional
//! logic; each carries a content hash so runs can pin exactly which prompt
//! text produced them. Schemes define the category vocabulary a stage-3
//! linking pass (or the stage-1 labeler) is allowed to use.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// Prompt configuration tag. Stage 1 ships `p_base`/`p1`/`p2`; stage 3
/// ships all four.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionTag {
    PBase,
    P1,
    P2,
    P3,
}

impl VersionTag {
    pub const ALL: [VersionTag; 4] = [VersionTag::PBase, VersionTag::P1, VersionTag::P2, VersionTag::P3];

    pub fn as_str(&self) -> &'static str {
        match self {
            VersionTag::PBase => "p_base",
            VersionTag::P1 => "p1",
            VersionTag::P2 => "p2",
            VersionTag::P3 => "p3",
        }
    }
}

impl fmt::Display for VersionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VersionTag {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p_base" => Ok(VersionTag::PBase),
            "p1" => Ok(VersionTag::P1),
            "p2" => Ok(VersionTag::P2),
            "p3" => Ok(VersionTag::P3),
            other => Err(RegistryError::UnknownVersionTag { tag: other.to_string() }),
        }
    }
}

/// One category in a coding scheme: a name the model must echo back and a
/// definition shown in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub name: String,
    pub description: String,
}

impl CategoryDef {
    fn new(name: &str, description: &str) -> Self {
        CategoryDef { name: name.to_string(), description: description.to_string() }
    }
}

/// Category structure of a scheme: flat list, or the two-level
/// stance x function grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemeShape {
    Flat { categories: Vec<CategoryDef> },
    TwoLevel { stances: Vec<CategoryDef>, functions: Vec<CategoryDef> },
}

/// A coding scheme for stage 1 labeling or stage 3 relation linking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingScheme {
    pub scheme_id: String,
    pub stage: u8,
    pub shape: SchemeShape,
}

impl CodingScheme {
    pub fn two_level(&self) -> bool {
        matches!(self.shape, SchemeShape::TwoLevel { .. })
    }

    /// Flat category names, in declared order. Empty for two-level schemes.
    pub fn category_names(&self) -> Vec<&str> {
        match &self.shape {
            SchemeShape::Flat { categories } => categories.iter().map(|c| c.name.as_str()).collect(),
            SchemeShape::TwoLevel { .. } => Vec::new(),
        }
    }

    pub fn stance_names(&self) -> Vec<&str> {
        match &self.shape {
            SchemeShape::TwoLevel { stances, .. } => stances.iter().map(|c| c.name.as_str()).collect(),
            SchemeShape::Flat { .. } => Vec::new(),
        }
    }

    pub fn function_names(&self) -> Vec<&str> {
        match &self.shape {
            SchemeShape::TwoLevel { functions, .. } => functions.iter().map(|c| c.name.as_str()).collect(),
            SchemeShape::Flat { .. } => Vec::new(),
        }
    }

    /// Prompt fragment listing the scheme's categories with definitions.
    pub fn guide_text(&self) -> String {
        let mut out = String::new();
        match &self.shape {
            SchemeShape::Flat { categories } => {
                for c in categories {
                    out.push_str(&format!("- {}: {}\n", c.name, c.description));
                }
            }
            SchemeShape::TwoLevel { stances, functions } => {
                out.push_str("Stances:\n");
                for c in stances {
                    out.push_str(&format!("- {}: {}\n", c.name, c.description));
                }
                out.push_str("Functions:\n");
                for c in functions {
                    out.push_str(&format!("- {}: {}\n", c.name, c.description));
                }
            }
        }
        out.trim_end().to_string()
    }

    fn validate(&self) -> Result<(), RegistryError> {
        let check_unique = |defs: &[CategoryDef], what: &str| -> Result<(), RegistryError> {
            let mut seen = BTreeSet::new();
            for d in defs {
                if d.name.trim().is_empty() {
                    return Err(RegistryError::InvalidScheme {
                        scheme_id: self.scheme_id.clone(),
                        detail: format!("empty {what} name"),
                    });
                }
                if !seen.insert(d.name.clone()) {
                    return Err(RegistryError::InvalidScheme {
                        scheme_id: self.scheme_id.clone(),
                        detail: format!("duplicate {what} name '{}'", d.name),
                    });
                }
            }
            Ok(())
        };
        match &self.shape {
            SchemeShape::Flat { categories } => {
                if categories.is_empty() {
                    return Err(RegistryError::InvalidScheme {
                        scheme_id: self.scheme_id.clone(),
                        detail: "flat scheme needs at least one category".to_string(),
                    });
                }
                check_unique(categories, "category")
            }
            SchemeShape::TwoLevel { stances, functions } => {
                if stances.is_empty() || functions.is_empty() {
                    return Err(RegistryError::InvalidScheme {
                        scheme_id: self.scheme_id.clone(),
                        detail: "two-level scheme needs stances and functions".to_string(),
                    });
                }
                check_unique(stances, "stance")?;
                check_unique(functions, "function")
            }
        }
    }
}

/// Wire form for `schemes/*.json` files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemeWire {
    scheme_id: String,
    stage: u8,
    two_level: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    categories: Vec<CategoryDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    stances: Vec<CategoryDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    functions: Vec<CategoryDef>,
}

impl TryFrom<SchemeWire> for CodingScheme {
    type Error = RegistryError;

    fn try_from(wire: SchemeWire) -> Result<Self, Self::Error> {
        let shape = if wire.two_level {
            if !wire.categories.is_empty() {
                return Err(RegistryError::InvalidScheme {
                    scheme_id: wire.scheme_id,
                    detail: "two-level scheme must use stances/functions, not categories".to_string(),
                });
            }
            SchemeShape::TwoLevel { stances: wire.stances, functions: wire.functions }
        } else {
            if !wire.stances.is_empty() || !wire.functions.is_empty() {
                return Err(RegistryError::InvalidScheme {
                    scheme_id: wire.scheme_id,
                    detail: "flat scheme must use categories, not stances/functions".to_string(),
                });
            }
            SchemeShape::Flat { categories: wire.categories }
        };
        let scheme = CodingScheme { scheme_id: wire.scheme_id, stage: wire.stage, shape };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl From<&CodingScheme> for SchemeWire {
    fn from(scheme: &CodingScheme) -> Self {
        match &scheme.shape {
            SchemeShape::Flat { categories } => SchemeWire {
                scheme_id: scheme.scheme_id.clone(),
                stage: scheme.stage,
                two_level: false,
                categories: categories.clone(),
                stances: Vec::new(),
                functions: Vec::new(),
            },
            SchemeShape::TwoLevel { stances, functions } => SchemeWire {
                scheme_id: scheme.scheme_id.clone(),
                stage: scheme.stage,
                two_level: true,
                categories: Vec::new(),
                stances: stances.clone(),
                functions: functions.clone(),
            },
        }
    }
}

impl Serialize for CodingScheme {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        SchemeWire::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CodingScheme {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = SchemeWire::deserialize(deserializer)?;
        CodingScheme::try_from(wire).map_err(serde::de::Error::custom)
    }
}

/// A versioned prompt template with a declared, closed placeholder set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub stage: u8,
    pub version_tag: VersionTag,
    pub body: String,
    pub scheme_ref: Option<String>,
    pub content_hash: String,
    placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(stage: u8, version_tag: VersionTag, body: String, scheme_ref: Option<String>) -> Self {
        let content_hash = sha256_hex(&[&body]);
        let placeholders = extract_placeholders(&body);
        PromptTemplate {
            template_id: format!("stage{stage}/{version_tag}"),
            stage,
            version_tag,
            body,
            scheme_ref,
            content_hash,
            placeholders,
        }
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    /// Substitute every placeholder in a single pass. Strict: a missing
    /// variable and an unused variable are both errors. Values are
    /// inserted literally; placeholder-like text inside a value is never
    /// re-expanded.
    pub fn render(&self, variables: &BTreeMap<String, String>) -> Result<String, RenderError> {
        for name in variables.keys() {
            if !self.placeholders.contains(name) {
                return Err(RenderError::ExtraVariable { name: name.clone() });
            }
        }
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start..];
            match placeholder_at(after) {
                Some(name) => {
                    let value = variables
                        .get(name)
                        .ok_or_else(|| RenderError::MissingVariable { name: name.to_string() })?;
                    out.push_str(value);
                    rest = &after[name.len() + 2..];
                }
                None => {
                    out.push('{');
                    rest = &after[1..];
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// If `input` starts with a well-formed `{name}` placeholder, return the name.
fn placeholder_at(input: &str) -> Option<&str> {
    let rest = input.strip_prefix('{')?;
    let end = rest.find('}')?;
    let name = &rest[..end];
    let mut chars = name.chars();
    let first = chars.next()?;
    if !(first.is_ascii_lowercase() || first == '_') {
        return None;
    }
    if chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
        Some(name)
    } else {
        None
    }
}

/// All `{name}` placeholders in a template body.
pub fn extract_placeholders(body: &str) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    let mut rest = body;
    while let Some(start) = rest.find('{') {
        let after = &rest[start..];
        match placeholder_at(after) {
            Some(name) => {
                found.insert(name.to_string());
                rest = &after[name.len() + 2..];
            }
            None => rest = &after[1..],
        }
    }
    found
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("missing variable for placeholder '{{{name}}}'")]
    MissingVariable { name: String },
    #[error("variable '{name}' does not match any placeholder in the template")]
    ExtraVariable { name: String },
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("no template for stage {stage} with version tag '{tag}'")]
    UnknownTemplate { stage: u8, tag: String },
    #[error("unknown coding scheme '{scheme_id}'")]
    UnknownScheme { scheme_id: String },
    #[error("unknown version tag '{tag}' (expected p_base, p1, p2, or p3)")]
    UnknownVersionTag { tag: String },
    #[error("invalid coding scheme '{scheme_id}': {detail}")]
    InvalidScheme { scheme_id: String, detail: String },
    #[error("failed to read {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("failed to parse {path}: {detail}")]
    Parse { path: String, detail: String },
}

/// The scheme id used for stage-1 micro-idea labels.
pub const STAGE1_SCHEME_ID: &str = "micro_idea_labels";

/// All shipped schemes: the stage-1 label taxonomy and the four stage-3
/// relation schemes.
pub fn builtin_schemes() -> Vec<CodingScheme> {
    vec![
        CodingScheme {
            scheme_id: STAGE1_SCHEME_ID.to_string(),
            stage: 1,
            shape: SchemeShape::Flat {
                categories: vec![
                    CategoryDef::new(
                        "descriptive",
                        "Restates or condenses what the text says to establish shared ground.",
                    ),
                    CategoryDef::new(
                        "interpretive",
                        "Explains meaning, significance, or implications beyond a restatement.",
                    ),
                    CategoryDef::new(
                        "analytical",
                        "Examines reasoning, evidence, assumptions, or limitations and judges their strength.",
                    ),
                    CategoryDef::new(
                        "generative",
                        "Proposes a new idea, hypothesis, or design move that opens further inquiry.",
                    ),
                ],
            },
        },
        CodingScheme {
            scheme_id: "p_base".to_string(),
            stage: 3,
            shape: SchemeShape::Flat {
                categories: vec![
                    CategoryDef::new("support", "Backs the node's claim with agreement or corroborating reasoning."),
                    CategoryDef::new("challenge", "Disputes or complicates the node's claim."),
                    CategoryDef::new("exemplify", "Supplies a concrete example or case for the node."),
                    CategoryDef::new("question", "Raises a question directed at the node."),
                ],
            },
        },
        CodingScheme {
            scheme_id: "p1".to_string(),
            stage: 3,
            shape: SchemeShape::Flat {
                categories: vec![
                    CategoryDef::new("evidence", "Brings data, citations, or observed cases that bear on the node."),
                    CategoryDef::new("explain", "Unpacks how or why the node's claim works."),
                    CategoryDef::new("challenge", "Argues against the node or exposes a flaw."),
                    CategoryDef::new("qualify", "Narrows the node's claim with conditions or boundaries."),
                    CategoryDef::new("summarize", "Condenses node-relevant content without adding new ground."),
                    CategoryDef::new("extend", "Carries the node's idea into new territory or applications."),
                ],
            },
        },
        CodingScheme {
            scheme_id: "p2".to_string(),
            stage: 3,
            shape: SchemeShape::Flat {
                categories: vec![
                    CategoryDef::new("support", "Advances or agrees with the node."),
                    CategoryDef::new("critique", "Contests or problematizes the node."),
                    CategoryDef::new("reflect", "Relates the node to one's own thinking or experience."),
                ],
            },
        },
        CodingScheme {
            scheme_id: "p3".to_string(),
            stage: 3,
            shape: SchemeShape::TwoLevel {
                stances: vec![
                    CategoryDef::new(
                        "build_toward",
                        "The micro-idea advances the node: it supports, extends, or refines the idea.",
                    ),
                    CategoryDef::new(
                        "push_back",
                        "The micro-idea resists the node: it qualifies, complicates, or contests the idea.",
                    ),
                ],
                functions: vec![
                    CategoryDef::new("ground", "Anchors the node in evidence, examples, or counter-examples."),
                    CategoryDef::new(
                        "explain_elaborate",
                        "Works through the node's meaning by adding detail or taking the reasoning apart.",
                    ),
                    CategoryDef::new(
                        "new_idea",
                        "Brings in a concept that redirects or enriches the synthesis around the node.",
                    ),
                    CategoryDef::new(
                        "question",
                        "Interrogates the node, probing for detail or challenging its soundness.",
                    ),
                ],
            },
        },
    ]
}

/// Immutable store of prompt templates and coding schemes.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<(u8, VersionTag), PromptTemplate>,
    schemes: BTreeMap<String, CodingScheme>,
}

impl PromptRegistry {
    /// Registry with the shipped templates and schemes compiled in.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        let builtin_templates = [
            (1u8, VersionTag::PBase, include_str!("../../../prompts/stage1/p_base.txt"), Some(STAGE1_SCHEME_ID)),
            (1, VersionTag::P1, include_str!("../../../prompts/stage1/p1.txt"), Some(STAGE1_SCHEME_ID)),
            (1, VersionTag::P2, include_str!("../../../prompts/stage1/p2.txt"), Some(STAGE1_SCHEME_ID)),
            (2, VersionTag::PBase, include_str!("../../../prompts/stage2/p_base.txt"), None),
            (3, VersionTag::PBase, include_str!("../../../prompts/stage3/p_base.txt"), Some("p_base")),
            (3, VersionTag::P1, include_str!("../../../prompts/stage3/p1.txt"), Some("p1")),
            (3, VersionTag::P2, include_str!("../../../prompts/stage3/p2.txt"), Some("p2")),
            (3, VersionTag::P3, include_str!("../../../prompts/stage3/p3.txt"), Some("p3")),
        ];
        for (stage, tag, body, scheme_ref) in builtin_templates {
            templates.insert(
                (stage, tag),
                PromptTemplate::new(stage, tag, body.to_string(), scheme_ref.map(str::to_string)),
            );
        }
        let schemes = builtin_schemes().into_iter().map(|s| (s.scheme_id.clone(), s)).collect();
        PromptRegistry { templates, schemes }
    }

    /// Load a registry from a directory with the layout
    /// `<root>/prompts/stage{1,2,3}/{p_base,p1,p2,p3}.txt` and
    /// `<root>/schemes/*.json`. Files that are absent are simply not
    /// registered; lookups for them fail.
    pub fn from_dir(root: &Path) -> Result<Self, RegistryError> {
        let mut templates = BTreeMap::new();
        for stage in [1u8, 2, 3] {
            for tag in VersionTag::ALL {
                let path = root.join("prompts").join(format!("stage{stage}")).join(format!("{tag}.txt"));
                if !path.exists() {
                    continue;
                }
                let body = std::fs::read_to_string(&path)
                    .map_err(|e| RegistryError::Io { path: path.display().to_string(), detail: e.to_string() })?;
                let scheme_ref = match stage {
                    1 => Some(STAGE1_SCHEME_ID.to_string()),
                    3 => Some(tag.as_str().to_string()),
                    _ => None,
                };
                templates.insert((stage, tag), PromptTemplate::new(stage, tag, body, scheme_ref));
            }
        }
        let mut schemes = BTreeMap::new();
        let schemes_dir = root.join("schemes");
        if schemes_dir.is_dir() {
            let mut paths: Vec<_> = std::fs::read_dir(&schemes_dir)
                .map_err(|e| RegistryError::Io { path: schemes_dir.display().to_string(), detail: e.to_string() })?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
                .collect();
            paths.sort();
            for path in paths {
                let bytes = std::fs::read(&path)
                    .map_err(|e| RegistryError::Io { path: path.display().to_string(), detail: e.to_string() })?;
                let scheme: CodingScheme = serde_json::from_slice(&bytes)
                    .map_err(|e| RegistryError::Parse { path: path.display().to_string(), detail: e.to_string() })?;
                schemes.insert(scheme.scheme_id.clone(), scheme);
            }
        }
        Ok(PromptRegistry { templates, schemes })
    }

    pub fn template(&self, stage: u8, tag: VersionTag) -> Result<&PromptTemplate, RegistryError> {
        self.templates
            .get(&(stage, tag))
            .ok_or(RegistryError::UnknownTemplate { stage, tag: tag.as_str().to_string() })
    }

    pub fn scheme(&self, scheme_id: &str) -> Result<&CodingScheme, RegistryError> {
        self.schemes
            .get(scheme_id)
            .ok_or_else(|| RegistryError::UnknownScheme { scheme_id: scheme_id.to_string() })
    }

    pub fn schemes(&self) -> impl Iterator<Item = &CodingScheme> {
        self.schemes.values()
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }
}
