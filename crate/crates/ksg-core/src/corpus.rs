//! Corpus ingestion: annotations (JSON or CSV), course readings, and
//! expert gold codings. Loading is pure and single-threaded; the resulting
//! [`Corpus`] is immutable and safe to share across threads.
//!
//! Authors are pseudonymized at ingestion with a stable hash, so no raw
//! identity leaves the loader. Pseudonymization is idempotent: reloading an
//! exported corpus keeps the same pseudonyms.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::MicroIdeaLabel;
use crate::hashing::{pseudonymize_author, sha256_hex};
use crate::timefmt::looks_like_iso8601;

/// One student contribution: a comment anchored to a quoted passage of a
/// reading, optionally replying to another annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub author: String,
    pub body: String,
    #[serde(default)]
    pub quoted_passage: String,
    pub parent_id: Option<String>,
    pub document_id: String,
    pub created_at: Option<String>,
}

/// Course reading material: full text plus optional summary and
/// instructor prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reading {
    pub id: String,
    pub title: String,
    pub full_text: String,
    pub summary: Option<String>,
    pub instructor_prompts: Vec<String>,
}

impl Reading {
    /// Deterministic fingerprint over every field.
    pub fn fingerprint(&self) -> String {
        let prompts = self.instructor_prompts.join("\u{1f}");
        sha256_hex(&[
            "reading",
            &self.id,
            &self.title,
            &self.full_text,
            self.summary.as_deref().unwrap_or(""),
            &prompts,
        ])
    }
}

/// Expert-assigned label for one annotation, including the filtered
/// (non-substantive) verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldLabel {
    Descriptive,
    Interpretive,
    Analytical,
    Generative,
    Filtered,
}

impl GoldLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            GoldLabel::Descriptive => "descriptive",
            GoldLabel::Interpretive => "interpretive",
            GoldLabel::Analytical => "analytical",
            GoldLabel::Generative => "generative",
            GoldLabel::Filtered => "filtered",
        }
    }

    pub fn parse(value: &str) -> Option<GoldLabel> {
        match value.trim().to_ascii_lowercase().as_str() {
            "descriptive" => Some(GoldLabel::Descriptive),
            "interpretive" => Some(GoldLabel::Interpretive),
            "analytical" => Some(GoldLabel::Analytical),
            "generative" => Some(GoldLabel::Generative),
            "filtered" => Some(GoldLabel::Filtered),
            _ => None,
        }
    }

    pub fn from_micro_idea_label(label: MicroIdeaLabel) -> GoldLabel {
        match label {
            MicroIdeaLabel::Descriptive => GoldLabel::Descriptive,
            MicroIdeaLabel::Interpretive => GoldLabel::Interpretive,
            MicroIdeaLabel::Analytical => GoldLabel::Analytical,
            MicroIdeaLabel::Generative => GoldLabel::Generative,
        }
    }
}

/// One expert coding row: annotation id plus label-or-filtered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldCoding {
    pub annotation_id: String,
    pub label: GoldLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Json,
    Csv,
}

impl CorpusFormat {
    /// Infer from a file extension; defaults to JSON.
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Json,
        }
    }
}

/// Optional mapping from source column names to the canonical CSV columns,
/// for adapting platform exports without rewriting files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CsvColumnMap {
    /// canonical column name -> source column name
    #[serde(flatten)]
    pub columns: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("failed to parse {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("row {row}: malformed field '{field}': {detail}")]
    MalformedField { row: usize, field: String, detail: String },
    #[error("missing required column '{column}'")]
    MissingColumn { column: String },
    #[error("duplicate annotation id '{id}'")]
    DuplicateId { id: String },
    #[error("dangling parent_id(s): {}", ids.join(", "))]
    DanglingParents { ids: Vec<String> },
    #[error("reply cycle detected through annotation '{id}'")]
    CycleDetected { id: String },
    #[error("reading at {path} has empty full text")]
    EmptyFullText { path: String },
    #[error("reading summary is not shorter than the full text")]
    SummaryNotShorter,
    #[error("duplicate gold coding for annotation '{annotation_id}'")]
    DuplicateGold { annotation_id: String },
    #[error("row {row}: unknown gold label '{label}'")]
    UnknownGoldLabel { row: usize, label: String },
}

const CSV_COLUMNS: [&str; 7] =
    ["id", "author", "body", "quoted_passage", "parent_id", "document_id", "created_at"];

#[derive(Debug, Serialize, Deserialize)]
struct CorpusFile {
    annotations: Vec<Annotation>,
}

/// An immutable, validated annotation corpus in stable input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    annotations: Vec<Annotation>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    /// Validate raw annotations into a corpus: unique ids, resolvable and
    /// acyclic reply threading, non-empty bodies, plausible timestamps.
    /// Authors are pseudonymized here.
    pub fn from_annotations(mut annotations: Vec<Annotation>) -> Result<Corpus, CorpusError> {
        for (row, ann) in annotations.iter_mut().enumerate() {
            if ann.id.trim().is_empty() {
                return Err(CorpusError::MalformedField {
                    row,
                    field: "id".to_string(),
                    detail: "empty id".to_string(),
                });
            }
            if ann.body.trim().is_empty() {
                return Err(CorpusError::MalformedField {
                    row,
                    field: "body".to_string(),
                    detail: "body is empty after trimming whitespace".to_string(),
                });
            }
            if ann.document_id.trim().is_empty() {
                return Err(CorpusError::MalformedField {
                    row,
                    field: "document_id".to_string(),
                    detail: "empty document id".to_string(),
                });
            }
            if let Some(ts) = &ann.created_at {
                if !looks_like_iso8601(ts) {
                    return Err(CorpusError::MalformedField {
                        row,
                        field: "created_at".to_string(),
                        detail: format!("'{ts}' is not an ISO-8601 timestamp"),
                    });
                }
            }
            ann.author = pseudonymize_author(&ann.author);
        }

        let mut by_id = BTreeMap::new();
        for (idx, ann) in annotations.iter().enumerate() {
            if by_id.insert(ann.id.clone(), idx).is_some() {
                return Err(CorpusError::DuplicateId { id: ann.id.clone() });
            }
        }

        let mut dangling = BTreeSet::new();
        for ann in &annotations {
            if let Some(parent) = &ann.parent_id {
                if !by_id.contains_key(parent) {
                    dangling.insert(parent.clone());
                }
            }
        }
        if !dangling.is_empty() {
            return Err(CorpusError::DanglingParents { ids: dangling.into_iter().collect() });
        }

        // Each annotation has at most one parent, so any cycle is a simple
        // loop reachable by walking parents.
        for ann in &annotations {
            let mut seen = BTreeSet::new();
            let mut current = ann;
            seen.insert(current.id.as_str());
            while let Some(parent_id) = &current.parent_id {
                if !seen.insert(parent_id.as_str()) {
                    return Err(CorpusError::CycleDetected { id: parent_id.clone() });
                }
                current = &annotations[by_id[parent_id]];
            }
        }

        Ok(Corpus { annotations, by_id })
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Annotation> {
        self.by_id.get(id).map(|&idx| &self.annotations[idx])
    }

    /// Ancestor chain of an annotation, root-first, truncated to the
    /// `depth_limit` nearest ancestors. The annotation itself is excluded;
    /// an unknown id or `depth_limit == 0` yields an empty chain. Never
    /// visits an id twice.
    pub fn thread_context(&self, annotation_id: &str, depth_limit: usize) -> Vec<&Annotation> {
        let mut chain = Vec::new();
        let mut visited = BTreeSet::new();
        visited.insert(annotation_id);
        let mut current = self.get(annotation_id);
        while chain.len() < depth_limit {
            let parent = match current.and_then(|a| a.parent_id.as_deref()) {
                Some(pid) if visited.insert(pid) => self.get(pid),
                _ => None,
            };
            match parent {
                Some(p) => {
                    chain.push(p);
                    current = Some(p);
                }
                None => break,
            }
        }
        chain.reverse();
        chain
    }

    /// Canonical JSON layout: `{"annotations":[...]}` with every field
    /// present. Reloading these bytes yields a structurally equal corpus.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let file = CorpusFile { annotations: self.annotations.clone() };
        let mut bytes = serde_json::to_vec_pretty(&file).expect("corpus serialization cannot fail");
        bytes.push(b'\n');
        bytes
    }

    /// Deterministic fingerprint of the whole corpus.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&[
            "corpus",
            std::str::from_utf8(&self.to_canonical_json()).expect("canonical json is utf-8"),
        ])
    }
}

/// Load annotations from a JSON or CSV file into a validated corpus.
pub fn load_annotations(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    load_annotations_mapped(path, format, None)
}

/// [`load_annotations`] with an optional CSV column mapping.
pub fn load_annotations_mapped(
    path: &Path,
    format: CorpusFormat,
    column_map: Option<&CsvColumnMap>,
) -> Result<Corpus, CorpusError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CorpusError::Io { path: path.display().to_string(), detail: e.to_string() })?;
    let annotations = match format {
        CorpusFormat::Json => parse_annotations_json(&raw, path)?,
        CorpusFormat::Csv => parse_annotations_csv(&raw, column_map)?,
    };
    Corpus::from_annotations(annotations)
}

fn parse_annotations_json(raw: &str, path: &Path) -> Result<Vec<Annotation>, CorpusError> {
    let mut deserializer = serde_json::Deserializer::from_str(raw);
    let file: CorpusFile = serde_path_to_error::deserialize(&mut deserializer).map_err(|err| {
        CorpusError::Parse {
            path: path.display().to_string(),
            detail: format!("{} (at {})", err.inner(), err.path()),
        }
    })?;
    Ok(file.annotations)
}

fn parse_annotations_csv(raw: &str, column_map: Option<&CsvColumnMap>) -> Result<Vec<Annotation>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Parse { path: "<csv>".to_string(), detail: e.to_string() })?
        .clone();
    let mut column_index = BTreeMap::new();
    for canonical in CSV_COLUMNS {
        let source_name = column_map
            .and_then(|m| m.columns.get(canonical))
            .map(String::as_str)
            .unwrap_or(canonical);
        let idx = headers
            .iter()
            .position(|h| h == source_name)
            .ok_or_else(|| CorpusError::MissingColumn { column: source_name.to_string() })?;
        column_index.insert(canonical, idx);
    }

    let mut annotations = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CorpusError::MalformedField {
            row,
            field: "<record>".to_string(),
            detail: e.to_string(),
        })?;
        let field = |name: &str| -> Result<String, CorpusError> {
            record
                .get(column_index[name])
                .map(str::to_string)
                .ok_or_else(|| CorpusError::MalformedField {
                    row,
                    field: name.to_string(),
                    detail: "missing value".to_string(),
                })
        };
        let optional = |value: String| if value.is_empty() { None } else { Some(value) };
        annotations.push(Annotation {
            id: field("id")?,
            author: field("author")?,
            body: field("body")?,
            quoted_passage: field("quoted_passage")?,
            parent_id: optional(field("parent_id")?),
            document_id: field("document_id")?,
            created_at: optional(field("created_at")?),
        });
    }
    Ok(annotations)
}

/// Load a reading. The reading id is the text file's stem and the title is
/// its first non-empty line. Instructor prompts are one per line, in file
/// order; blank lines are skipped.
pub fn load_reading(
    text_path: &Path,
    summary_path: Option<&Path>,
    prompts_path: Option<&Path>,
) -> Result<Reading, CorpusError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p)
            .map_err(|e| CorpusError::Io { path: p.display().to_string(), detail: e.to_string() })
    };
    let full_text = read(text_path)?;
    if full_text.trim().is_empty() {
        return Err(CorpusError::EmptyFullText { path: text_path.display().to_string() });
    }
    let id = text_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("reading")
        .to_string();
    let title = full_text
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("Untitled reading")
        .trim()
        .to_string();
    let summary = match summary_path {
        Some(p) => {
            let text = read(p)?;
            let trimmed = text.trim().to_string();
            if trimmed.is_empty() {
                None
            } else {
                if trimmed.len() >= full_text.len() {
                    return Err(CorpusError::SummaryNotShorter);
                }
                Some(trimmed)
            }
        }
        None => None,
    };
    let instructor_prompts = match prompts_path {
        Some(p) => read(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    Ok(Reading { id, title, full_text, summary, instructor_prompts })
}

/// Load gold codings from a CSV with columns `annotation_id,label`.
pub fn load_gold_codings(path: &Path) -> Result<Vec<GoldCoding>, CorpusError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CorpusError::Io { path: path.display().to_string(), detail: e.to_string() })?;
    let mut reader = csv::ReaderBuilder::new().from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Parse { path: path.display().to_string(), detail: e.to_string() })?
        .clone();
    let id_idx = headers
        .iter()
        .position(|h| h == "annotation_id")
        .ok_or_else(|| CorpusError::MissingColumn { column: "annotation_id".to_string() })?;
    let label_idx = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| CorpusError::MissingColumn { column: "label".to_string() })?;

    let mut seen = BTreeSet::new();
    let mut codings = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CorpusError::MalformedField {
            row,
            field: "<record>".to_string(),
            detail: e.to_string(),
        })?;
        let annotation_id = record.get(id_idx).unwrap_or_default().to_string();
        let label_raw = record.get(label_idx).unwrap_or_default();
        let label = GoldLabel::parse(label_raw)
            .ok_or_else(|| CorpusError::UnknownGoldLabel { row, label: label_raw.to_string() })?;
        if !seen.insert(annotation_id.clone()) {
            return Err(CorpusError::DuplicateGold { annotation_id });
        }
        codings.push(GoldCoding { annotation_id, label });
    }
    Ok(codings)
}
