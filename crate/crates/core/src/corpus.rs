//! Corpus data model, the JSONL corpus format, and a lexicon tagger for
//! corpora that arrive without entity annotations.
//!
//! One [`Example`] is one admission: ordered source notes plus the reference
//! summary sentences. Everything downstream works on the token lists stored
//! here and never re-tokenizes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Diagnosis,
    Medication,
    Procedure,
    Treatment,
    Test,
}

impl EntityType {
    pub const ALL: [EntityType; 5] = [
        EntityType::Diagnosis,
        EntityType::Medication,
        EntityType::Procedure,
        EntityType::Treatment,
        EntityType::Test,
    ];

    /// Diagnoses and medications always carry ontology codes.
    pub fn requires_codes(self) -> bool {
        matches!(self, EntityType::Diagnosis | EntityType::Medication)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Diagnosis => "diagnosis",
            EntityType::Medication => "medication",
            EntityType::Procedure => "procedure",
            EntityType::Treatment => "treatment",
            EntityType::Test => "test",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown entity type {s:?}")))
    }
}

/// Half-open token range `[start, end)` within a sentence. Serialized as a
/// two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        TokenSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, idx: usize) -> bool {
        idx >= self.start && idx < self.end
    }

    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for TokenSpan {
    fn from(v: [usize; 2]) -> Self {
        TokenSpan::new(v[0], v[1])
    }
}

impl From<TokenSpan> for [usize; 2] {
    fn from(s: TokenSpan) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub mention_id: String,
    pub etype: EntityType,
    pub text: String,
    pub token_span: TokenSpan,
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
}

impl Sentence {
    /// Builds an unannotated sentence, tokenizing `text`.
    pub fn from_text(sent_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Sentence {
            sent_id: sent_id.into(),
            text,
            tokens,
            entities: Vec::new(),
        }
    }

    /// Tokens covered by a mention's span.
    pub fn span_tokens(&self, mention: &EntityMention) -> &[String] {
        let end = mention.token_span.end.min(self.tokens.len());
        let start = mention.token_span.start.min(end);
        &self.tokens[start..end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceNote {
    pub note_id: String,
    pub note_type: String,
    pub order_index: u64,
    pub sentences: Vec<Sentence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub source_notes: Vec<SourceNote>,
    pub reference: Vec<Sentence>,
}

impl Example {
    /// Source sentences in note order.
    pub fn source_sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.source_notes.iter().flat_map(|n| n.sentences.iter())
    }

    /// All source tokens, concatenated in note order.
    pub fn source_tokens(&self) -> Vec<String> {
        self.source_sentences()
            .flat_map(|s| s.tokens.iter().cloned())
            .collect()
    }

    pub fn reference_tokens(&self) -> Vec<String> {
        self.reference
            .iter()
            .flat_map(|s| s.tokens.iter().cloned())
            .collect()
    }

    pub fn reference_sentence(&self, sent_id: &str) -> Option<&Sentence> {
        self.reference.iter().find(|s| s.sent_id == sent_id)
    }

    pub fn source_sentence(&self, sent_id: &str) -> Option<&Sentence> {
        self.source_sentences().find(|s| s.sent_id == sent_id)
    }

    /// Checks every model invariant, naming the example and field on failure.
    pub fn validate(&self) -> Result<()> {
        let id = &self.example_id;
        if id.is_empty() {
            return Err(Error::validation(id, "example_id", "must be non-empty"));
        }
        let mut prev_order: Option<u64> = None;
        for note in &self.source_notes {
            if let Some(prev) = prev_order {
                if note.order_index <= prev {
                    return Err(Error::validation(
                        id,
                        "order_index",
                        format!(
                            "note {} has order_index {} after {}",
                            note.note_id, note.order_index, prev
                        ),
                    ));
                }
            }
            prev_order = Some(note.order_index);
        }
        let mut seen = HashSet::new();
        for sent in self.source_sentences().chain(self.reference.iter()) {
            if !seen.insert(sent.sent_id.as_str()) {
                return Err(Error::validation(
                    id,
                    "sent_id",
                    format!("duplicate sent_id {}", sent.sent_id),
                ));
            }
            validate_sentence(id, sent)?;
        }
        Ok(())
    }
}

fn validate_sentence(example_id: &str, sent: &Sentence) -> Result<()> {
    if sent.tokens.is_empty() && !sent.entities.is_empty() {
        return Err(Error::validation(
            example_id,
            "tokens",
            format!("sentence {} has entities but no tokens", sent.sent_id),
        ));
    }
    for m in &sent.entities {
        if m.token_span.is_empty() || m.token_span.end > sent.tokens.len() {
            return Err(Error::validation(
                example_id,
                "token_span",
                format!(
                    "mention {} span [{}, {}) invalid for sentence {} with {} tokens",
                    m.mention_id,
                    m.token_span.start,
                    m.token_span.end,
                    sent.sent_id,
                    sent.tokens.len()
                ),
            ));
        }
        if m.codes.is_empty() && m.etype.requires_codes() {
            return Err(Error::validation(
                example_id,
                "codes",
                format!("{} mention {} has no codes", m.etype, m.mention_id),
            ));
        }
    }
    for (i, a) in sent.entities.iter().enumerate() {
        for b in &sent.entities[i + 1..] {
            if a.token_span.overlaps(&b.token_span) {
                return Err(Error::validation(
                    example_id,
                    "token_span",
                    format!(
                        "overlapping mentions {} and {} in sentence {}",
                        a.mention_id, b.mention_id, sent.sent_id
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// Store key of a sentence: `example_id/sent_id`.
pub fn sentence_key(example_id: &str, sent_id: &str) -> String {
    format!("{example_id}/{sent_id}")
}

/// Whitespace split, strip leading/trailing ASCII punctuation, lowercase.
/// Tokens that are pure punctuation vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Reads a JSONL corpus. Blank lines are skipped; every example is validated
/// and example ids must be unique.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        example.validate()?;
        if !ids.insert(example.example_id.clone()) {
            return Err(Error::validation(
                &example.example_id,
                "example_id",
                "duplicate example_id in corpus",
            ));
        }
        out.push(example);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut writer: W, corpus: &[Example]) -> Result<()> {
    for example in corpus {
        serde_json::to_writer(&mut writer, example).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub etype: EntityType,
    pub codes: Vec<String>,
}

/// Surface phrase → (type, codes). Phrases are stored normalized with the
/// corpus tokenizer and joined by single spaces.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, LexiconEntry>,
    max_phrase_tokens: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, phrase: &str, etype: EntityType, codes: Vec<String>) -> Result<()> {
        let tokens = tokenize(phrase);
        if tokens.is_empty() {
            return Err(Error::invalid(format!("empty lexicon phrase {phrase:?}")));
        }
        self.max_phrase_tokens = self.max_phrase_tokens.max(tokens.len());
        self.entries
            .insert(tokens.join(" "), LexiconEntry { etype, codes });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, phrase: &str) -> Option<&LexiconEntry> {
        self.entries.get(phrase)
    }

    /// Tab-separated lines: `phrase<TAB>etype<TAB>code,code,...`. The code
    /// column may be empty or absent. `#` starts a comment line.
    pub fn parse_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let phrase = cols.next().unwrap_or_default();
            let etype: EntityType = cols
                .next()
                .ok_or_else(|| Error::Parse {
                    line: idx + 1,
                    message: "missing etype column".into(),
                })?
                .parse()
                .map_err(|e: Error| Error::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            let codes = cols
                .next()
                .map(|c| {
                    c.split(',')
                        .map(str::trim)
                        .filter(|c| !c.is_empty())
                        .map(String::from)
                        .collect()
                })
                .unwrap_or_default();
            lex.insert(phrase, etype, codes).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(lex)
    }
}

/// Longest-match, left-to-right tagging against the lexicon. Sentences that
/// already carry entities are returned unchanged.
pub fn tag_entities(sentence: &Sentence, lexicon: &Lexicon) -> Sentence {
    let mut out = sentence.clone();
    if !sentence.entities.is_empty() || lexicon.is_empty() {
        return out;
    }
    let tokens: Vec<String> = sentence.tokens.iter().map(|t| t.to_lowercase()).collect();
    let mut i = 0;
    while i < tokens.len() {
        let longest = lexicon.max_phrase_tokens.min(tokens.len() - i);
        let hit = (1..=longest).rev().find_map(|len| {
            let phrase = tokens[i..i + len].join(" ");
            lexicon.get(&phrase).map(|entry| (len, phrase, entry))
        });
        match hit {
            Some((len, phrase, entry)) => {
                out.entities.push(EntityMention {
                    mention_id: format!("{}:m{}", sentence.sent_id, out.entities.len()),
                    etype: entry.etype,
                    text: phrase,
                    token_span: TokenSpan::new(i, i + len),
                    codes: entry.codes.clone(),
                });
                i += len;
            }
            None => i += 1,
        }
    }
    out
}
