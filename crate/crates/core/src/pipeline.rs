//! Corpus-level glue shared by the command-line stages: JSONL I/O, the
//! reference-sentence neighbor index and per-sentence corruption sampling.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{sentence_key, Sentence};
use crate::corrupt::{
    apply_plan, build_distractors, derive_seed, emit_redress, sample_plan, CorruptOptions,
    CorruptedSentence, CorruptionPlan, DistractorSet, RedressMode, RedressRecord,
};
use crate::embed::{pool_sentence, SentenceIndex, TokenOrigin};
use crate::error::{Error, Result};
use crate::matcher::{Matcher, ResolvedMention};
use crate::prepared::PreparedExample;

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a, W: Write>(
    mut writer: W,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut writer, row).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Pooled vectors of every reference sentence in the corpus, plus their
/// resolved mentions keyed by store key. Distractors are drawn from here.
pub struct ReferenceIndex {
    pub index: SentenceIndex,
    pub mentions: HashMap<String, Vec<ResolvedMention>>,
    vectors: HashMap<String, Vec<f32>>,
}

impl ReferenceIndex {
    pub fn build(preps: &[PreparedExample<'_>], dim: usize) -> Result<Self> {
        let mut index = SentenceIndex::new(dim);
        let mut mentions = HashMap::new();
        let mut vectors = HashMap::new();
        for prep in preps {
            for (i, r) in prep.example.reference.iter().enumerate() {
                let matrix = &prep.reference_matrices[i];
                if matrix.is_empty() {
                    continue;
                }
                let key = sentence_key(&prep.example.example_id, &r.sent_id);
                let v = pool_sentence(matrix)?;
                index.push(key.clone(), &v)?;
                vectors.insert(key.clone(), v);
                mentions.insert(key, prep.reference_mentions[i].clone());
            }
        }
        Ok(ReferenceIndex {
            index,
            mentions,
            vectors,
        })
    }

    /// Distractor set of a reference sentence; empty when it has no tokens.
    pub fn distractors(&self, key: &str, matcher: &Matcher<'_>) -> Result<DistractorSet> {
        match self.vectors.get(key) {
            Some(v) => build_distractors(key, v, &self.index, &self.mentions, matcher),
            None => Ok(DistractorSet {
                anchor_key: key.to_string(),
                entities: Vec::new(),
            }),
        }
    }
}

/// One sampled corruption of a reference sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub example_id: String,
    pub ref_sent_id: String,
    pub sample_index: usize,
    pub seed: u64,
    pub plan: CorruptionPlan,
    pub sentence: Sentence,
    pub origins: Vec<TokenOrigin>,
}

impl CorruptionRecord {
    pub fn corrupted(&self) -> CorruptedSentence {
        CorruptedSentence {
            sentence: self.sentence.clone(),
            origins: self.origins.clone(),
        }
    }
}

pub struct SentenceCorruptions {
    pub records: Vec<CorruptionRecord>,
    pub train: Vec<RedressRecord>,
    pub inference: Vec<RedressRecord>,
}

/// Draws `samples` corruption plans for one reference sentence, each seeded
/// from `(global_seed, example_id, sent_id, sample_index)`.
pub fn corrupt_reference_sentence(
    prep: &PreparedExample<'_>,
    ref_index: usize,
    references: &ReferenceIndex,
    matcher: &Matcher<'_>,
    options: &CorruptOptions,
    global_seed: u64,
    samples: usize,
) -> Result<SentenceCorruptions> {
    let eid = &prep.example.example_id;
    let s = &prep.example.reference[ref_index];
    let key = sentence_key(eid, &s.sent_id);
    let mentions = &prep.reference_mentions[ref_index];
    let distractors = references.distractors(&key, matcher)?;
    let mut out = SentenceCorruptions {
        records: Vec::with_capacity(samples),
        train: Vec::with_capacity(samples),
        inference: Vec::with_capacity(samples),
    };
    for sample_index in 0..samples {
        let seed = derive_seed(global_seed, &[eid, &s.sent_id], sample_index as u64);
        let plan = sample_plan(s, mentions, &distractors, seed, options, matcher);
        let corrupted = apply_plan(s, &key, &plan);
        for mode in [RedressMode::Train, RedressMode::Inference] {
            let rec = emit_redress(s, mentions, &distractors, &plan, &corrupted, mode, options, matcher);
            match mode {
                RedressMode::Train => out.train.push(rec),
                RedressMode::Inference => out.inference.push(rec),
            }
        }
        out.records.push(CorruptionRecord {
            example_id: eid.clone(),
            ref_sent_id: s.sent_id.clone(),
            sample_index,
            seed,
            plan,
            sentence: corrupted.sentence,
            origins: corrupted.origins,
        });
    }
    Ok(out)
}

/// Groups corruption records of one example by reference sentence, in
/// sample order.
pub fn corruptions_by_sentence(records: &[CorruptionRecord]) -> HashMap<String, Vec<CorruptedSentence>> {
    let mut sorted: Vec<&CorruptionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.ref_sent_id, a.sample_index).cmp(&(&b.ref_sent_id, b.sample_index)));
    let mut out: HashMap<String, Vec<CorruptedSentence>> = HashMap::new();
    for r in sorted {
        out.entry(r.ref_sent_id.clone()).or_default().push(r.corrupted());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: u32,
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let rows = vec![Row { a: 1 }, Row { a: 2 }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "{\"a\":1}\n{\"a\":2}\n");
        assert_eq!(read_jsonl::<Row, _>(&buf[..]).unwrap(), rows);
        let err = read_jsonl::<Row, _>(&b"{\"a\":1}\n\n{oops\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }
}
