//! Soft entity matching: code overlap, embedding overlap, TF-IDF overlap and
//! their aggregate decide whether two mentions are synonyms, and whether a
//! reference mention is supported by any source mention.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{sentence_key, EntityMention, EntityType, Example, Sentence, TokenSpan};
use crate::embed::{cosine, Embedder, Matrix};
use crate::error::{Error, Result};

/// Slack for inclusive threshold comparisons on computed floats.
const THRESHOLD_EPS: f64 = 1e-9;

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "he", "her", "his",
    "in", "is", "it", "its", "of", "on", "or", "she", "that", "the", "their", "this", "to",
    "was", "were", "which", "with",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub code_threshold: f64,
    pub embed_threshold: f64,
    pub agg_threshold: f64,
    pub stopwords: BTreeSet<String>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            code_threshold: 0.4,
            embed_threshold: 0.75,
            agg_threshold: 0.4,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("code_threshold", self.code_threshold),
            ("embed_threshold", self.embed_threshold),
            ("agg_threshold", self.agg_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("match.{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Document frequencies with sentences as documents.
#[derive(Debug, Clone, Default)]
pub struct DocFrequencyTable {
    doc_count: usize,
    df: HashMap<String, usize>,
}

impl DocFrequencyTable {
    pub fn from_documents<'a, I, D>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a String>,
    {
        let mut table = DocFrequencyTable::default();
        for doc in docs {
            table.doc_count += 1;
            let distinct: HashSet<&String> = doc.into_iter().collect();
            for t in distinct {
                *table.df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        table.doc_count = table.doc_count.max(1);
        table
    }

    /// Every source and reference sentence of the corpus is one document.
    pub fn from_corpus(corpus: &[Example]) -> Self {
        Self::from_documents(corpus.iter().flat_map(|ex| {
            ex.source_sentences()
                .chain(ex.reference.iter())
                .map(|s| s.tokens.iter())
        }))
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn df(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    /// Smoothed idf: `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, token: &str) -> f64 {
        ((1.0 + self.doc_count as f64) / (1.0 + self.df(token) as f64)).ln() + 1.0
    }
}

/// A mention with the features pairwise matching needs: span tokens, codes
/// and pooled span vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedMention {
    pub mention_id: String,
    pub sent_key: String,
    pub token_span: TokenSpan,
    pub etype: EntityType,
    pub text: String,
    pub codes: Vec<String>,
    pub tokens: Vec<String>,
    /// Mean of span rows after dropping stopwords and punctuation-only tokens.
    pub embed_vector: Vec<f32>,
    /// Mean of all span rows; the concept embedding used for completion.
    pub span_vector: Vec<f32>,
}

fn is_punctuation_only(t: &str) -> bool {
    !t.is_empty() && t.chars().all(|c| c.is_ascii_punctuation())
}

fn mean_of(matrix: &Matrix, rows: &[usize]) -> Vec<f32> {
    let mut acc = vec![0f64; matrix.dim()];
    for &r in rows {
        for (a, &x) in acc.iter_mut().zip(matrix.row(r)) {
            *a += f64::from(x);
        }
    }
    let n = rows.len().max(1) as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

impl ResolvedMention {
    /// `matrix` holds the sentence embeddings, one row per sentence token.
    pub fn resolve(
        sent_key: &str,
        sentence: &Sentence,
        mention: &EntityMention,
        matrix: &Matrix,
        stopwords: &BTreeSet<String>,
    ) -> Result<Self> {
        if matrix.rows() != sentence.tokens.len() || mention.token_span.end > matrix.rows() {
            return Err(Error::Embedding {
                key: sent_key.to_string(),
                message: format!(
                    "sent_id {}: {} rows for {} tokens",
                    sentence.sent_id,
                    matrix.rows(),
                    sentence.tokens.len()
                ),
            });
        }
        let span: Vec<usize> = (mention.token_span.start..mention.token_span.end).collect();
        let kept: Vec<usize> = span
            .iter()
            .copied()
            .filter(|&i| {
                let t = &sentence.tokens[i];
                !stopwords.contains(t) && !is_punctuation_only(t)
            })
            .collect();
        let kept = if kept.is_empty() { span.clone() } else { kept };
        Ok(ResolvedMention {
            mention_id: mention.mention_id.clone(),
            sent_key: sent_key.to_string(),
            token_span: mention.token_span,
            etype: mention.etype,
            text: mention.text.clone(),
            codes: mention.codes.clone(),
            tokens: sentence.span_tokens(mention).to_vec(),
            embed_vector: mean_of(matrix, &kept),
            span_vector: mean_of(matrix, &span),
        })
    }

    /// Identical type, surface tokens and code set.
    pub fn same_surface(&self, other: &ResolvedMention) -> bool {
        self.etype == other.etype
            && self.tokens == other.tokens
            && self.codes.iter().collect::<BTreeSet<_>>() == other.codes.iter().collect::<BTreeSet<_>>()
    }
}

/// Resolves every mention of a sentence, embedding it through `embedder`.
pub fn resolve_sentence(
    example_id: &str,
    sentence: &Sentence,
    embedder: &dyn Embedder,
    config: &MatchConfig,
) -> Result<Vec<ResolvedMention>> {
    if sentence.entities.is_empty() {
        return Ok(Vec::new());
    }
    let key = sentence_key(example_id, &sentence.sent_id);
    let matrix = embedder.embed(&key, &sentence.tokens)?;
    resolve_with_matrix(&key, sentence, &matrix, config)
}

pub fn resolve_with_matrix(
    key: &str,
    sentence: &Sentence,
    matrix: &Matrix,
    config: &MatchConfig,
) -> Result<Vec<ResolvedMention>> {
    sentence
        .entities
        .iter()
        .map(|m| ResolvedMention::resolve(key, sentence, m, matrix, &config.stopwords))
        .collect()
}

/// `|cx ∩ cy| / (|cx| + |cy|)` over code sets; 0 if either is empty.
pub fn code_overlap(x: &[String], y: &[String]) -> f64 {
    let cx: BTreeSet<&String> = x.iter().collect();
    let cy: BTreeSet<&String> = y.iter().collect();
    if cx.is_empty() || cy.is_empty() {
        return 0.0;
    }
    cx.intersection(&cy).count() as f64 / (cx.len() + cy.len()) as f64
}

/// Cosine of the filtered span means, clamped at 0.
pub fn embed_overlap(x: &ResolvedMention, y: &ResolvedMention) -> f64 {
    cosine(&x.embed_vector, &y.embed_vector).max(0.0)
}

/// Cosine of raw-count TF × smoothed-IDF vectors over the mention tokens.
pub fn tfidf_overlap(x: &[String], y: &[String], dft: &DocFrequencyTable) -> f64 {
    fn weights<'t>(toks: &'t [String], dft: &DocFrequencyTable) -> HashMap<&'t str, f64> {
        let mut tf: HashMap<&str, f64> = HashMap::new();
        for t in toks {
            *tf.entry(t.as_str()).or_insert(0.0) += 1.0;
        }
        tf.into_iter()
            .map(|(t, c)| (t, c * dft.idf(t)))
            .collect()
    }
    let wx = weights(x, dft);
    let wy = weights(y, dft);
    let norm = |w: &HashMap<&str, f64>| w.values().map(|v| v * v).sum::<f64>().sqrt();
    let (nx, ny) = (norm(&wx), norm(&wy));
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    // Sorted keys keep the summation order independent of hash state.
    let mut shared: Vec<&&str> = wx.keys().filter(|k| wy.contains_key(**k)).collect();
    shared.sort();
    let dot: f64 = shared.into_iter().map(|k| wx[*k] * wy[*k]).sum();
    (dot / (nx * ny)).clamp(0.0, 1.0)
}

pub fn agg_overlap(code: f64, embed: f64, tfidf: f64) -> f64 {
    (code.max(0.0) + embed.max(0.0) + tfidf.max(0.0)) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SynonymDecision {
    pub synonym: bool,
    pub code: f64,
    pub embed: f64,
    pub tfidf: f64,
    pub agg: f64,
}

/// Matching context shared by every module that asks "is this supported?".
#[derive(Debug, Clone, Copy)]
pub struct Matcher<'a> {
    pub config: &'a MatchConfig,
    pub dft: &'a DocFrequencyTable,
}

impl<'a> Matcher<'a> {
    pub fn new(config: &'a MatchConfig, dft: &'a DocFrequencyTable) -> Self {
        Matcher { config, dft }
    }

    /// Synonym iff same type and any of code, embed or agg overlap reaches
    /// its threshold. Code-less pairs are judged on mention overlap only.
    /// Identical surfaces always match.
    pub fn is_synonym(&self, x: &ResolvedMention, y: &ResolvedMention) -> SynonymDecision {
        let both_uncoded = x.codes.is_empty() && y.codes.is_empty();
        let code = if both_uncoded { 0.0 } else { code_overlap(&x.codes, &y.codes) };
        let embed = embed_overlap(x, y);
        let tfidf = tfidf_overlap(&x.tokens, &y.tokens, self.dft);
        let agg = agg_overlap(code, embed, tfidf);
        let reaches = |v: f64, t: f64| v >= t - THRESHOLD_EPS;
        let by_score = (!both_uncoded && reaches(code, self.config.code_threshold))
            || reaches(embed, self.config.embed_threshold)
            || reaches(agg, self.config.agg_threshold);
        SynonymDecision {
            synonym: x.etype == y.etype && (by_score || x.same_surface(y)),
            code,
            embed,
            tfidf,
            agg,
        }
    }

    /// The best synonym among `candidates` (highest agg overlap, then lowest
    /// mention id), or `None`.
    pub fn support_mention<'c>(
        &self,
        mention: &ResolvedMention,
        candidates: &'c [ResolvedMention],
    ) -> Option<&'c ResolvedMention> {
        candidates
            .iter()
            .filter(|c| c.etype == mention.etype)
            .filter_map(|c| {
                let d = self.is_synonym(mention, c);
                d.synonym.then_some((c, d.agg))
            })
            .max_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then_with(|| b.0.mention_id.cmp(&a.0.mention_id))
            })
            .map(|(c, _)| c)
    }

    pub fn is_supported(&self, mention: &ResolvedMention, candidates: &[ResolvedMention]) -> bool {
        self.support_mention(mention, candidates).is_some()
    }
}
