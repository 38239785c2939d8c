//! Supportedness labels for reference sentences, the data-filtering
//! baselines built on them, and corpus-level hallucination diagnostics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::aligner::Alignment;
use crate::corpus::{Example, Sentence};
use crate::error::{Error, Result};
use crate::matcher::{Matcher, ResolvedMention};
use crate::prepared::PreparedExample;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub support_bs_threshold: f64,
    pub filter_token_coverage: f64,
    pub filter_halluc_rate: f64,
    pub bucket_count: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            support_bs_threshold: 0.75,
            filter_token_coverage: 0.75,
            filter_halluc_rate: 0.10,
            bucket_count: 10,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("support_bs_threshold", self.support_bs_threshold),
            ("filter_token_coverage", self.filter_token_coverage),
            ("filter_halluc_rate", self.filter_halluc_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("gate.{name} = {v} outside [0, 1]")));
            }
        }
        if self.bucket_count < 2 {
            return Err(Error::invalid("gate.bucket_count must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportLabel {
    pub example_id: String,
    pub ref_sent_id: String,
    pub supported: bool,
    pub halluc_mentions: Vec<String>,
    pub bs_precision: f64,
}

impl SupportLabel {
    pub fn class(&self, config: &GateConfig) -> SupportClass {
        let entity_ok = self.halluc_mentions.is_empty();
        let bs_ok = self.bs_precision >= config.support_bs_threshold;
        match (entity_ok, bs_ok) {
            (true, true) => SupportClass::Supported,
            (false, true) => SupportClass::EntityOnly,
            (true, false) => SupportClass::BertScoreOnly,
            (false, false) => SupportClass::FailsBoth,
        }
    }
}

/// Which supportedness checks a sentence fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportClass {
    FailsBoth,
    /// Hallucinated entities despite a passing BERTScore.
    EntityOnly,
    /// Entities all supported, BERTScore below threshold.
    BertScoreOnly,
    Supported,
}

/// Entities are checked against the whole source; BERTScore precision
/// comes from the sentence's aligned evidence.
pub fn classify_sentence(
    ref_mentions: &[ResolvedMention],
    alignment: &Alignment,
    source_mentions: &[ResolvedMention],
    matcher: &Matcher<'_>,
    config: &GateConfig,
) -> SupportLabel {
    let halluc_mentions: Vec<String> = ref_mentions
        .iter()
        .filter(|m| !matcher.is_supported(m, source_mentions))
        .map(|m| m.mention_id.clone())
        .collect();
    let supported =
        halluc_mentions.is_empty() && alignment.bs_precision >= config.support_bs_threshold;
    SupportLabel {
        example_id: alignment.example_id.clone(),
        ref_sent_id: alignment.ref_sent_id.clone(),
        supported,
        halluc_mentions,
        bs_precision: alignment.bs_precision,
    }
}

/// Labels every reference sentence; `alignments` must follow reference order.
pub fn classify_example(
    prep: &PreparedExample<'_>,
    alignments: &[Alignment],
    matcher: &Matcher<'_>,
    config: &GateConfig,
) -> Result<Vec<SupportLabel>> {
    prep.example
        .reference
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let alignment = alignments
                .iter()
                .find(|a| a.ref_sent_id == r.sent_id)
                .ok_or_else(|| {
                    Error::validation(
                        &prep.example.example_id,
                        "alignment",
                        format!("missing alignment for {}", r.sent_id),
                    )
                })?;
            Ok(classify_sentence(
                &prep.reference_mentions[i],
                alignment,
                &prep.source_mentions,
                matcher,
                config,
            ))
        })
        .collect()
}

pub fn filter_no_admission(example: &Example) -> bool {
    example
        .source_notes
        .iter()
        .any(|n| n.note_type.trim().eq_ignore_ascii_case("admission"))
}

/// Fraction of reference tokens that occur anywhere in the source. An empty
/// reference has coverage 0.
pub fn token_coverage(example: &Example) -> f64 {
    let source: HashSet<&String> = example.source_sentences().flat_map(|s| &s.tokens).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for t in example.reference.iter().flat_map(|s| &s.tokens) {
        total += 1;
        hit += usize::from(source.contains(t));
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Hallucinated mentions over all reference mentions; 0 when there are none.
pub fn example_halluc_rate(example: &Example, labels: &[SupportLabel]) -> f64 {
    let total: usize = example.reference.iter().map(|s| s.entities.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let halluc: usize = labels.iter().map(|l| l.halluc_mentions.len()).sum();
    halluc as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub token_coverage: f64,
    pub halluc_rate: f64,
}

/// Keeps an example iff coverage ≥ threshold and hallucination rate ≤ limit.
pub fn filter_unsupported(example: &Example, labels: &[SupportLabel], config: &GateConfig) -> FilterDecision {
    let token_coverage = token_coverage(example);
    let halluc_rate = example_halluc_rate(example, labels);
    FilterDecision {
        keep: token_coverage >= config.filter_token_coverage && halluc_rate <= config.filter_halluc_rate,
        token_coverage,
        halluc_rate,
    }
}

/// Per-sentence loss masks; `true` marks tokens inside hallucinated spans.
pub fn halluc_ent_masks(references: &[Sentence], labels: &[SupportLabel]) -> Vec<Vec<bool>> {
    references
        .iter()
        .map(|s| {
            let mut mask = vec![false; s.tokens.len()];
            let halluc: HashSet<&str> = labels
                .iter()
                .filter(|l| l.ref_sent_id == s.sent_id)
                .flat_map(|l| l.halluc_mentions.iter().map(String::as_str))
                .collect();
            for m in s.entities.iter().filter(|m| halluc.contains(m.mention_id.as_str())) {
                for k in m.token_span.start..m.token_span.end.min(mask.len()) {
                    mask[k] = true;
                }
            }
            mask
        })
        .collect()
}

/// `floor(value × bins)`, with 1.0 landing in the top bin.
pub fn bin_index(value: f64, bins: usize) -> usize {
    ((value.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)
}

/// Token-coverage quality bucket of an example.
pub fn quality_bucket(example: &Example, config: &GateConfig) -> usize {
    bin_index(token_coverage(example), config.bucket_count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub example_id: String,
    pub ref_sent_id: String,
    pub mask: Vec<bool>,
}

/// Pearson correlation; `None` when either series has zero variance or the
/// series are shorter than two.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub fails_both: usize,
    pub entity_only: usize,
    pub bs_only: usize,
    pub supported: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub example_count: usize,
    pub sentence_count: usize,
    /// Counts over 20 equal bins of [0, 1].
    pub example_halluc_histogram: Vec<usize>,
    pub sentence_halluc_histogram: Vec<usize>,
    /// Example token coverage vs. example hallucination rate; null if undefined.
    pub coverage_halluc_pearson: Option<f64>,
    pub classes: ClassCounts,
}

/// `labels[i]` holds the labels of `corpus[i]`.
pub fn diagnostics(corpus: &[Example], labels: &[Vec<SupportLabel>], config: &GateConfig) -> Result<Diagnostics> {
    if corpus.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: corpus.len(),
            right: labels.len(),
        });
    }
    let mut example_hist = vec![0usize; HISTOGRAM_BINS];
    let mut sentence_hist = vec![0usize; HISTOGRAM_BINS];
    let mut classes = ClassCounts::default();
    let mut coverages = Vec::with_capacity(corpus.len());
    let mut rates = Vec::with_capacity(corpus.len());
    let mut sentence_count = 0;
    for (ex, ls) in corpus.iter().zip(labels) {
        let rate = example_halluc_rate(ex, ls);
        example_hist[bin_index(rate, HISTOGRAM_BINS)] += 1;
        coverages.push(token_coverage(ex));
        rates.push(rate);
        for s in &ex.reference {
            sentence_count += 1;
            let label = ls.iter().find(|l| l.ref_sent_id == s.sent_id);
            let halluc = label.map_or(0, |l| l.halluc_mentions.len());
            let srate = if s.entities.is_empty() {
                0.0
            } else {
                halluc as f64 / s.entities.len() as f64
            };
            sentence_hist[bin_index(srate, HISTOGRAM_BINS)] += 1;
            if let Some(l) = label {
                match l.class(config) {
                    SupportClass::FailsBoth => classes.fails_both += 1,
                    SupportClass::EntityOnly => classes.entity_only += 1,
                    SupportClass::BertScoreOnly => classes.bs_only += 1,
                    SupportClass::Supported => classes.supported += 1,
                }
            }
        }
    }
    Ok(Diagnostics {
        example_count: corpus.len(),
        sentence_count,
        example_halluc_histogram: example_hist,
        sentence_halluc_histogram: sentence_hist,
        coverage_halluc_pearson: pearson(&coverages, &rates),
        classes,
    })
}
