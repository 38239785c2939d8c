//! Faithfulness metrics over (source, summary) pairs and corpus reports.

use serde::{Deserialize, Serialize};

use crate::aligner::bertscore;
use crate::corpus::{sentence_key, Example, Sentence};
use crate::embed::{Embedder, Matrix};
use crate::error::{Error, Result};
use crate::matcher::{resolve_with_matrix, MatchConfig, Matcher, ResolvedMention};
use crate::prepared::PreparedExample;
use crate::rescore::fragment_stats;

/// One summary per example; the default summaries are the references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub example_id: String,
    pub summary: Vec<Sentence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailment: Option<f64>,
}

impl SummaryRecord {
    pub fn from_reference(example: &Example) -> Self {
        SummaryRecord {
            example_id: example.example_id.clone(),
            summary: example.reference.clone(),
            entailment: None,
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        self.summary.iter().flat_map(|s| s.tokens.iter().cloned()).collect()
    }
}

/// Store key for a summary sentence.
pub fn summary_key(example_id: &str, sent_id: &str) -> String {
    format!("{example_id}/summary/{sent_id}")
}

/// Fraction of summary mentions with no synonym anywhere in the source.
pub fn hallucination_rate(
    summary: &[ResolvedMention],
    source: &[ResolvedMention],
    matcher: &Matcher<'_>,
) -> f64 {
    if summary.is_empty() {
        return 0.0;
    }
    let unsupported = summary.iter().filter(|m| !matcher.is_supported(m, source)).count();
    unsupported as f64 / summary.len() as f64
}

/// Fraction of summary mentions supported by the source; undefined without
/// mentions.
pub fn entity_precision(
    summary: &[ResolvedMention],
    source: &[ResolvedMention],
    matcher: &Matcher<'_>,
) -> Option<f64> {
    (!summary.is_empty()).then(|| 1.0 - hallucination_rate(summary, source, matcher))
}

/// Source-supported reference concepts, one representative per synonym class.
pub fn supported_concepts<'m>(
    reference: &'m [ResolvedMention],
    source: &[ResolvedMention],
    matcher: &Matcher<'_>,
) -> Vec<&'m ResolvedMention> {
    let mut concepts: Vec<&ResolvedMention> = Vec::new();
    for m in reference {
        if !matcher.is_supported(m, source) {
            continue;
        }
        if concepts.iter().any(|g| matcher.is_synonym(g, m).synonym) {
            continue;
        }
        concepts.push(m);
    }
    concepts
}

/// Share of supported reference concepts that the summary mentions.
pub fn faithful_adjusted_recall(
    summary: &[ResolvedMention],
    reference: &[ResolvedMention],
    source: &[ResolvedMention],
    matcher: &Matcher<'_>,
) -> Option<f64> {
    let concepts = supported_concepts(reference, source, matcher);
    if concepts.is_empty() {
        return None;
    }
    let covered = concepts
        .iter()
        .filter(|g| summary.iter().any(|m| matcher.is_synonym(g, m).synonym))
        .count();
    Some(covered as f64 / concepts.len() as f64)
}

pub fn compression(source: &[String], summary: &[String]) -> Result<f64> {
    if summary.is_empty() {
        return Err(Error::invalid("compression needs a non-empty summary"));
    }
    Ok(source.len() as f64 / summary.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub example_id: String,
    pub hallucination_rate: f64,
    pub entity_precision: Option<f64>,
    pub bs_precision: f64,
    pub bs_recall: f64,
    pub bs_f1: f64,
    pub far: Option<f64>,
    pub coverage: f64,
    pub density: f64,
    pub compression: f64,
    pub entailment: Option<f64>,
}

/// Metrics of one summary. BERTScore compares the whole summary with the
/// whole source.
pub fn example_metrics(
    prep: &PreparedExample<'_>,
    summary: &SummaryRecord,
    summary_matrices: &[Matrix],
    match_config: &MatchConfig,
    matcher: &Matcher<'_>,
) -> Result<ExampleMetrics> {
    let eid = &prep.example.example_id;
    if summary_matrices.len() != summary.summary.len() {
        return Err(Error::LengthMismatch {
            left: summary.summary.len(),
            right: summary_matrices.len(),
        });
    }
    let tokens = summary.tokens();
    if tokens.is_empty() {
        return Err(Error::validation(eid, "summary", "summary has no tokens"));
    }
    let mut mentions = Vec::new();
    for (s, m) in summary.summary.iter().zip(summary_matrices) {
        mentions.extend(resolve_with_matrix(&summary_key(eid, &s.sent_id), s, m, match_config)?);
    }
    let reference: Vec<ResolvedMention> = prep.reference_mentions.iter().flatten().cloned().collect();
    let dim = summary_matrices.first().map_or(0, Matrix::dim);
    let summary_matrix = Matrix::concat(dim, summary_matrices.iter())?;
    let source_matrix = Matrix::concat(dim, prep.source_matrices.iter())?;
    let source_tokens = prep.example.source_tokens();
    let bs = if source_matrix.is_empty() {
        Default::default()
    } else {
        bertscore(&summary_matrix, &source_matrix)?
    };
    let fs = fragment_stats(&tokens, &source_tokens)?;
    Ok(ExampleMetrics {
        example_id: eid.clone(),
        hallucination_rate: hallucination_rate(&mentions, &prep.source_mentions, matcher),
        entity_precision: entity_precision(&mentions, &prep.source_mentions, matcher),
        bs_precision: bs.precision,
        bs_recall: bs.recall,
        bs_f1: bs.f1,
        far: faithful_adjusted_recall(&mentions, &reference, &prep.source_mentions, matcher),
        coverage: fs.coverage,
        density: fs.density,
        compression: compression(&source_tokens, &tokens)?,
        entailment: summary.entailment,
    })
}

/// Embeds every summary sentence. A sentence identical to a corpus sentence
/// of the same id reuses that sentence's stored rows; anything else is looked
/// up under its summary key.
pub fn embed_summary(summary: &SummaryRecord, example: &Example, embedder: &dyn Embedder) -> Result<Vec<Matrix>> {
    summary
        .summary
        .iter()
        .map(|s| {
            let known = example
                .reference_sentence(&s.sent_id)
                .or_else(|| example.source_sentence(&s.sent_id))
                .is_some_and(|c| c.tokens == s.tokens);
            let key = if known {
                sentence_key(&summary.example_id, &s.sent_id)
            } else {
                summary_key(&summary.example_id, &s.sent_id)
            };
            embedder.embed(&key, &s.tokens)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeans {
    pub hallucination_rate: Option<f64>,
    pub entity_precision: Option<f64>,
    pub bs_precision: Option<f64>,
    pub bs_recall: Option<f64>,
    pub bs_f1: Option<f64>,
    pub far: Option<f64>,
    pub coverage: Option<f64>,
    pub density: Option<f64>,
    pub compression: Option<f64>,
    pub entailment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub per_example: Vec<ExampleMetrics>,
    pub corpus_means: CorpusMeans,
}

/// Unweighted mean over the defined values.
fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (n, sum) = values.flatten().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

pub fn corpus_report(mut rows: Vec<ExampleMetrics>) -> FaithfulnessReport {
    rows.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let col = |f: fn(&ExampleMetrics) -> Option<f64>| mean_of(rows.iter().map(f));
    let corpus_means = CorpusMeans {
        hallucination_rate: col(|r| Some(r.hallucination_rate)),
        entity_precision: col(|r| r.entity_precision),
        bs_precision: col(|r| Some(r.bs_precision)),
        bs_recall: col(|r| Some(r.bs_recall)),
        bs_f1: col(|r| Some(r.bs_f1)),
        far: col(|r| r.far),
        coverage: col(|r| Some(r.coverage)),
        density: col(|r| Some(r.density)),
        compression: col(|r| Some(r.compression)),
        entailment: col(|r| r.entailment),
    };
    FaithfulnessReport {
        per_example: rows,
        corpus_means,
    }
}
