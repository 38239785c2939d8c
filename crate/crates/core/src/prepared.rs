use std::collections::HashMap;

use crate::corpus::{sentence_key, Example, Sentence};
use crate::embed::{Embedder, Matrix};
use crate::error::Result;
use crate::matcher::{resolve_with_matrix, MatchConfig, ResolvedMention};

/// One example with every sentence embedded and every mention resolved, so
/// the aligner, quality gate and metrics share a single embedding pass.
#[derive(Debug, Clone)]
pub struct PreparedExample<'a> {
    pub example: &'a Example,
    pub source: Vec<&'a Sentence>,
    pub source_keys: Vec<String>,
    pub source_matrices: Vec<Matrix>,
    /// Mentions of every source sentence, in sentence then span order.
    pub source_mentions: Vec<ResolvedMention>,
    pub reference_matrices: Vec<Matrix>,
    pub reference_mentions: Vec<Vec<ResolvedMention>>,
    source_index: HashMap<String, usize>,
}

impl<'a> PreparedExample<'a> {
    pub fn new(example: &'a Example, embedder: &dyn Embedder, config: &MatchConfig) -> Result<Self> {
        let source: Vec<&Sentence> = example.source_sentences().collect();
        let mut source_keys = Vec::with_capacity(source.len());
        let mut source_matrices = Vec::with_capacity(source.len());
        let mut source_mentions = Vec::new();
        let mut source_index = HashMap::new();
        for (i, s) in source.iter().enumerate() {
            let key = sentence_key(&example.example_id, &s.sent_id);
            let m = embedder.embed(&key, &s.tokens)?;
            source_mentions.extend(resolve_with_matrix(&key, s, &m, config)?);
            source_index.insert(key.clone(), i);
            source_keys.push(key);
            source_matrices.push(m);
        }
        let mut reference_matrices = Vec::with_capacity(example.reference.len());
        let mut reference_mentions = Vec::with_capacity(example.reference.len());
        for r in &example.reference {
            let key = sentence_key(&example.example_id, &r.sent_id);
            let m = embedder.embed(&key, &r.tokens)?;
            reference_mentions.push(resolve_with_matrix(&key, r, &m, config)?);
            reference_matrices.push(m);
        }
        Ok(PreparedExample {
            example,
            source,
            source_keys,
            source_matrices,
            source_mentions,
            reference_matrices,
            reference_mentions,
            source_index,
        })
    }

    /// Position of a source sentence given its store key.
    pub fn source_position(&self, key: &str) -> Option<usize> {
        self.source_index.get(key).copied()
    }

    pub fn source_position_by_id(&self, sent_id: &str) -> Option<usize> {
        self.source.iter().position(|s| s.sent_id == sent_id)
    }

    pub fn reference_position(&self, sent_id: &str) -> Option<usize> {
        self.example.reference.iter().position(|s| s.sent_id == sent_id)
    }

    /// Concatenated matrix of the given source sentences, in the given order.
    pub fn context_matrix(&self, dim: usize, src_ids: &[String]) -> Result<Matrix> {
        let parts: Vec<&Matrix> = src_ids
            .iter()
            .filter_map(|id| self.source_position_by_id(id))
            .map(|i| &self.source_matrices[i])
            .collect();
        Matrix::concat(dim, parts)
    }

    pub fn context_tokens(&self, src_ids: &[String]) -> Vec<String> {
        src_ids
            .iter()
            .filter_map(|id| self.source_position_by_id(id))
            .flat_map(|i| self.source[i].tokens.iter().cloned())
            .collect()
    }

    pub fn context_text(&self, src_ids: &[String]) -> String {
        src_ids
            .iter()
            .filter_map(|id| self.source_position_by_id(id))
            .map(|i| self.source[i].text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}
