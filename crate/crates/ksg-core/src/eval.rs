//! Evaluation harness: agreement with expert gold labels (stage 1) and
//! execution rate / cross-model linking consistency (stage 3), emitted as
//! deterministic JSON and plot-ready CSV.
//!
//! Filtering is part of the agreement label space: gold `filtered` versus
//! a model non-substantive verdict counts as agreement in an extended
//! five-class matrix, so filtered items are never silently dropped.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldCoding, GoldLabel};
use crate::graph::{RelationTarget, Stance};
use crate::stage1::{FilterOutcome, Stage1Report, Stage1Verdict};
use crate::stage3::LinkOutcome;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("label lists differ in length: gold {gold}, predicted {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("metric input is empty")]
    Empty,
    #[error("observed label {label} is not in the declared class list")]
    ClassNotCovered { label: String },
    #[error("consistency needs at least two models")]
    NeedTwoModels,
    #[error("model '{model_id}' has {found} outcomes, expected {expected}")]
    MisalignedModels { model_id: String, expected: usize, found: usize },
    #[error("no overlapping items between run outputs and gold codings")]
    NoOverlap,
}

/// Rows are gold classes, columns are predicted classes, in `classes` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_pairs<T: Ord + Clone + Debug>(
        gold: &[T],
        pred: &[T],
        classes: &[T],
        names: impl Fn(&T) -> String,
    ) -> Result<ConfusionMatrix, EvalError> {
        check_lengths(gold, pred)?;
        let index: BTreeMap<&T, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
        for (g, p) in gold.iter().zip(pred) {
            let gi = *index.get(g).ok_or_else(|| EvalError::ClassNotCovered { label: format!("{g:?}") })?;
            let pi = *index.get(p).ok_or_else(|| EvalError::ClassNotCovered { label: format!("{p:?}") })?;
            counts[gi][pi] += 1;
        }
        Ok(ConfusionMatrix { classes: classes.iter().map(names).collect(), counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

fn check_lengths<T>(gold: &[T], pred: &[T]) -> Result<(), EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Cohen's kappa value plus the degenerate-marginals flag for the
/// p_e = 1 case (both raters constant and equal), which is defined as 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaOutcome {
    pub value: f64,
    pub degenerate_marginals: bool,
}

/// Chance-corrected agreement between two label lists:
/// kappa = (p_o - p_e) / (1 - p_e), with p_e from the raters' marginal
/// distributions over the union of observed labels.
pub fn cohen_kappa<T: Ord + Clone>(gold: &[T], pred: &[T]) -> Result<KappaOutcome, EvalError> {
    check_lengths(gold, pred)?;
    let n = gold.len() as u64;
    let agree = gold.iter().zip(pred).filter(|(g, p)| g == p).count() as u64;
    let mut gold_marginals: BTreeMap<&T, u64> = BTreeMap::new();
    let mut pred_marginals: BTreeMap<&T, u64> = BTreeMap::new();
    for g in gold {
        *gold_marginals.entry(g).or_insert(0) += 1;
    }
    for p in pred {
        *pred_marginals.entry(p).or_insert(0) += 1;
    }
    let marginal_products: u64 = gold_marginals
        .iter()
        .map(|(label, gc)| gc * pred_marginals.get(label).copied().unwrap_or(0))
        .sum();
    if marginal_products == n * n {
        return Ok(KappaOutcome { value: 1.0, degenerate_marginals: true });
    }
    let po = agree as f64 / n as f64;
    let pe = marginal_products as f64 / (n as f64 * n as f64);
    Ok(KappaOutcome { value: (po - pe) / (1.0 - pe), degenerate_marginals: false })
}

/// Per-class and averaged F1.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores<T> {
    /// (class, F1) in declared class order. F1 = 0 when precision and
    /// recall are both undefined (absent class convention).
    pub per_class: Vec<(T, f64)>,
    /// Unweighted mean over the declared class list.
    pub macro_f1: f64,
    /// Mean weighted by gold support.
    pub weighted_f1: f64,
}

/// Per-class F1 = 2PR/(P+R); macro averages over `classes` (absent classes
/// contribute 0), weighted averages by gold support.
pub fn f1_scores<T: Ord + Clone + Debug>(
    gold: &[T],
    pred: &[T],
    classes: &[T],
) -> Result<F1Scores<T>, EvalError> {
    check_lengths(gold, pred)?;
    let declared: std::collections::BTreeSet<&T> = classes.iter().collect();
    for label in gold.iter().chain(pred) {
        if !declared.contains(label) {
            return Err(EvalError::ClassNotCovered { label: format!("{label:?}") });
        }
    }
    let n = gold.len() as f64;
    let mut per_class = Vec::with_capacity(classes.len());
    let mut macro_sum = 0.0;
    let mut weighted_sum = 0.0;
    for class in classes {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_count = 0u64;
        for (g, p) in gold.iter().zip(pred) {
            match (g == class, p == class) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_count += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_count > 0 { tp as f64 / (tp + fn_count) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let support = (tp + fn_count) as f64;
        macro_sum += f1;
        weighted_sum += f1 * support;
        per_class.push((class.clone(), f1));
    }
    Ok(F1Scores {
        per_class,
        macro_f1: macro_sum / classes.len() as f64,
        weighted_f1: weighted_sum / n,
    })
}

/// Output that counts toward the execution rate: anything schema-valid.
pub trait SchemaValidity {
    fn is_schema_valid(&self) -> bool;
}

impl SchemaValidity for FilterOutcome {
    fn is_schema_valid(&self) -> bool {
        FilterOutcome::is_schema_valid(self)
    }
}

impl SchemaValidity for LinkOutcome {
    fn is_schema_valid(&self) -> bool {
        LinkOutcome::is_schema_valid(self)
    }
}

/// Fraction of outcomes that are schema-valid (linked and uncategorized
/// both count; invalid does not).
pub fn execution_rate<T: SchemaValidity>(outcomes: &[T]) -> Result<f64, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let valid = outcomes.iter().filter(|o| o.is_schema_valid()).count();
    Ok(valid as f64 / outcomes.len() as f64)
}

/// Complement of [`execution_rate`]; the two sum to 1 exactly.
pub fn invalid_fraction<T: SchemaValidity>(outcomes: &[T]) -> Result<f64, EvalError> {
    Ok(1.0 - execution_rate(outcomes)?)
}

/// Canonicalized primary output of one stage-3 outcome. Invalid output
/// never matches anything.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum CanonicalOutput {
    Uncategorized,
    Link { target: String, stance: Option<Stance>, function: String },
}

fn canonical_output(outcome: &LinkOutcome) -> Option<CanonicalOutput> {
    match outcome {
        LinkOutcome::Invalid(_) => None,
        LinkOutcome::Uncategorized { .. } => Some(CanonicalOutput::Uncategorized),
        LinkOutcome::Linked { relations } => {
            let primary = relations.first()?;
            match &primary.target {
                RelationTarget::Uncategorized => Some(CanonicalOutput::Uncategorized),
                RelationTarget::Node(id) => {
                    let link = primary.link.as_ref()?;
                    Some(CanonicalOutput::Link {
                        target: id.clone(),
                        stance: link.stance(),
                        function: link.function_slot().to_string(),
                    })
                }
            }
        }
    }
}

/// Fraction of items on which at least two models produce identical
/// canonicalized primary outputs.
pub fn linking_consistency(per_model: &[(String, Vec<LinkOutcome>)]) -> Result<f64, EvalError> {
    if per_model.len() < 2 {
        return Err(EvalError::NeedTwoModels);
    }
    let n_items = per_model[0].1.len();
    for (model_id, outcomes) in per_model {
        if outcomes.len() != n_items {
            return Err(EvalError::MisalignedModels {
                model_id: model_id.clone(),
                expected: n_items,
                found: outcomes.len(),
            });
        }
    }
    if n_items == 0 {
        return Err(EvalError::Empty);
    }
    let mut consistent = 0usize;
    for item in 0..n_items {
        let mut counts: BTreeMap<CanonicalOutput, usize> = BTreeMap::new();
        for (_, outcomes) in per_model {
            if let Some(canon) = canonical_output(&outcomes[item]) {
                *counts.entry(canon).or_insert(0) += 1;
            }
        }
        if counts.values().any(|&c| c >= 2) {
            consistent += 1;
        }
    }
    Ok(consistent as f64 / n_items as f64)
}

impl GoldLabel {
    pub const ALL: [GoldLabel; 5] = [
        GoldLabel::Descriptive,
        GoldLabel::Interpretive,
        GoldLabel::Analytical,
        GoldLabel::Generative,
        GoldLabel::Filtered,
    ];
}

/// Stage-1 agreement against expert gold codings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub prompt_version: String,
    pub model_id: String,
    /// Paired items entering the metrics.
    pub n_items: usize,
    /// Run items with no gold coding.
    pub n_skipped_no_gold: usize,
    /// Run items whose model output was invalid (nothing to pair).
    pub n_skipped_invalid: usize,
    /// Gold codings referencing no run item.
    pub n_gold_unmatched: usize,
    pub kappa: f64,
    pub degenerate_marginals: bool,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
    pub confusion: ConfusionMatrix,
}

/// Pair a stage-1 report with gold codings in the extended five-class
/// space (four labels plus filtered) and compute agreement metrics.
pub fn agreement_report(
    stage1: &Stage1Report,
    gold_codings: &[GoldCoding],
) -> Result<AgreementReport, EvalError> {
    let gold_map: BTreeMap<&str, GoldLabel> =
        gold_codings.iter().map(|g| (g.annotation_id.as_str(), g.label)).collect();
    let item_ids: std::collections::BTreeSet<&str> =
        stage1.items.iter().map(|i| i.annotation_id.as_str()).collect();
    let n_gold_unmatched =
        gold_map.keys().filter(|id| !item_ids.contains(*id)).count();
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut skipped_no_gold = 0usize;
    let mut skipped_invalid = 0usize;
    for item in &stage1.items {
        let Some(&gold_label) = gold_map.get(item.annotation_id.as_str()) else {
            skipped_no_gold += 1;
            continue;
        };
        let model_label = match &item.verdict {
            Stage1Verdict::Substantive { micro_idea } => {
                GoldLabel::from_micro_idea_label(micro_idea.label)
            }
            Stage1Verdict::NonSubstantive { .. } => GoldLabel::Filtered,
            Stage1Verdict::Invalid { .. } | Stage1Verdict::TransportFailed { .. } => {
                skipped_invalid += 1;
                continue;
            }
        };
        gold.push(gold_label);
        pred.push(model_label);
    }
    if gold.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let classes = GoldLabel::ALL.to_vec();
    let kappa = cohen_kappa(&gold, &pred)?;
    let f1 = f1_scores(&gold, &pred, &classes)?;
    let confusion =
        ConfusionMatrix::from_pairs(&gold, &pred, &classes, |c| c.as_str().to_string())?;
    Ok(AgreementReport {
        prompt_version: stage1.template_id.clone(),
        model_id: stage1.model_id.clone(),
        n_items: gold.len(),
        n_skipped_no_gold: skipped_no_gold,
        n_skipped_invalid: skipped_invalid,
        n_gold_unmatched,
        kappa: kappa.value,
        degenerate_marginals: kappa.degenerate_marginals,
        macro_f1: f1.macro_f1,
        weighted_f1: f1.weighted_f1,
        per_class_f1: f1
            .per_class
            .into_iter()
            .map(|(c, v)| (c.as_str().to_string(), v))
            .collect(),
        confusion,
    })
}

/// Cross-model execution rate and linking consistency for one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub scheme_id: String,
    pub model_ids: Vec<String>,
    pub n_items: usize,
    pub execution_rate_per_model: BTreeMap<String, f64>,
    pub linking_consistency: f64,
}

/// Compute the consistency report over aligned per-model outcome lists.
pub fn consistency_report(
    scheme_id: &str,
    per_model: &[(String, Vec<LinkOutcome>)],
) -> Result<ConsistencyReport, EvalError> {
    let consistency = linking_consistency(per_model)?;
    let mut rates = BTreeMap::new();
    for (model_id, outcomes) in per_model {
        rates.insert(model_id.clone(), execution_rate(outcomes)?);
    }
    Ok(ConsistencyReport {
        scheme_id: scheme_id.to_string(),
        model_ids: per_model.iter().map(|(m, _)| m.clone()).collect(),
        n_items: per_model[0].1.len(),
        execution_rate_per_model: rates,
        linking_consistency: consistency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalReport {
    Agreement(AgreementReport),
    Consistency(ConsistencyReport),
}

/// Serialize a report. Byte-deterministic for equal inputs; the CSV column
/// orders are fixed.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(report).expect("report serialization cannot fail");
            bytes.push(b'\n');
            bytes
        }
        ReportFormat::Csv => match report {
            EvalReport::Agreement(r) => agreement_csv(r),
            EvalReport::Consistency(r) => consistency_csv(r),
        },
    }
}

fn agreement_csv(report: &AgreementReport) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "prompt_version".to_string(),
        "model_id".to_string(),
        "n_items".to_string(),
        "kappa".to_string(),
        "macro_f1".to_string(),
        "weighted_f1".to_string(),
    ];
    header.extend(GoldLabel::ALL.iter().map(|c| format!("f1_{}", c.as_str())));
    writer.write_record(&header).expect("csv write cannot fail");
    let mut row = vec![
        report.prompt_version.clone(),
        report.model_id.clone(),
        report.n_items.to_string(),
        report.kappa.to_string(),
        report.macro_f1.to_string(),
        report.weighted_f1.to_string(),
    ];
    for class in GoldLabel::ALL {
        row.push(report.per_class_f1.get(class.as_str()).copied().unwrap_or(0.0).to_string());
    }
    writer.write_record(&row).expect("csv write cannot fail");
    writer.into_inner().expect("csv buffer cannot fail")
}

fn consistency_csv(report: &ConsistencyReport) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["scheme_id", "model_id", "execution_rate", "linking_consistency", "n_items"])
        .expect("csv write cannot fail");
    for model_id in &report.model_ids {
        writer
            .write_record([
                report.scheme_id.as_str(),
                model_id.as_str(),
                &report.execution_rate_per_model[model_id].to_string(),
                &report.linking_consistency.to_string(),
                &report.n_items.to_string(),
            ])
            .expect("csv write cannot fail");
    }
    writer.into_inner().expect("csv buffer cannot fail")
}
