//! Positive and negative revision tuples with copy-rate control codes, and
//! the over-generation prompts for unsupported sentences.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::Alignment;
use crate::corrupt::{select_most_unsupported, CorruptedSentence};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::gate::SupportLabel;
use crate::prepared::PreparedExample;

pub const REVISION_SEP: &str = "<SEP>";
pub const DECILES: usize = 10;
/// Revision candidates requested per unsupported sentence.
pub const INFERENCE_SWEEP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RedressWorst,
    RandomOtherRef,
    RedressRandomNegative,
    SelfWithOtherContext,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodePair {
    pub input_frac: f64,
    pub source_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionRecord {
    pub example_id: String,
    pub ref_sent_id: String,
    pub input_text: String,
    pub context_sent_ids: Vec<String>,
    pub context_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    pub input_frac: f64,
    pub source_frac: f64,
    pub input_frac_bin: usize,
    pub source_frac_bin: usize,
    pub provenance: Provenance,
    pub serialized_input: String,
}

/// `<IF_b> <SF_b> r_in <SEP> S`.
pub fn serialize_input(input_bin: usize, source_bin: usize, input_text: &str, context_text: &str) -> String {
    format!("<IF_{input_bin}> <SF_{source_bin}> {input_text} {REVISION_SEP} {context_text}")
}

/// Fraction of `tokens` (with multiplicity) whose string occurs in `other`.
fn copied_fraction(tokens: &[String], other: &[String]) -> f64 {
    let vocab: HashSet<&str> = other.iter().map(String::as_str).collect();
    let hits = tokens.iter().filter(|t| vocab.contains(t.as_str())).count();
    hits as f64 / tokens.len() as f64
}

pub fn compute_codes(r_out: &[String], r_in: &[String], context: &[String]) -> Result<CodePair> {
    if r_out.is_empty() {
        return Err(Error::invalid("revision target has no tokens"));
    }
    Ok(CodePair {
        input_frac: copied_fraction(r_out, r_in),
        source_frac: copied_fraction(r_out, context),
    })
}

/// Fraction of the input already found in the context: the input-copy code
/// used when no target exists.
pub fn inference_input_frac(r_in: &[String], context: &[String]) -> Result<f64> {
    if r_in.is_empty() {
        return Err(Error::invalid("revision input has no tokens"));
    }
    Ok(copied_fraction(r_in, context))
}

pub fn decile(frac: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::invalid(format!("fraction {frac} outside [0, 1]")));
    }
    Ok(((frac * DECILES as f64).floor() as usize).min(DECILES - 1))
}

struct Side<'t> {
    text: &'t str,
    tokens: &'t [String],
}

struct Context {
    ids: Vec<String>,
    text: String,
    tokens: Vec<String>,
}

fn context_of(prep: &PreparedExample<'_>, alignment: &Alignment) -> Context {
    Context {
        ids: alignment.aligned_src_ids.clone(),
        text: prep.context_text(&alignment.aligned_src_ids),
        tokens: prep.context_tokens(&alignment.aligned_src_ids),
    }
}

fn record(
    example_id: &str,
    ref_sent_id: &str,
    input: &Side<'_>,
    context: &Context,
    target: &Side<'_>,
    polarity: Polarity,
    provenance: Provenance,
) -> Result<RevisionRecord> {
    let codes = compute_codes(target.tokens, input.tokens, &context.tokens)?;
    let input_frac_bin = decile(codes.input_frac)?;
    let source_frac_bin = decile(codes.source_frac)?;
    Ok(RevisionRecord {
        example_id: example_id.to_string(),
        ref_sent_id: ref_sent_id.to_string(),
        input_text: input.text.to_string(),
        context_sent_ids: context.ids.clone(),
        context_text: context.text.clone(),
        target_text: Some(target.text.to_string()),
        polarity: Some(polarity),
        input_frac: codes.input_frac,
        source_frac: codes.source_frac,
        input_frac_bin,
        source_frac_bin,
        provenance,
        serialized_input: serialize_input(input_frac_bin, source_frac_bin, input.text, &context.text),
    })
}

fn alignment_map(alignments: &[Alignment]) -> HashMap<&str, &Alignment> {
    alignments.iter().map(|a| (a.ref_sent_id.as_str(), a)).collect()
}

/// Number of records [`build_contrast_sets`] emits for one supported sentence.
pub fn template_count(has_other_aligned_reference: bool) -> usize {
    if has_other_aligned_reference {
        4
    } else {
        2
    }
}

/// Builds the four tuple templates for every supported reference sentence,
/// in reference order:
///
/// 1. positive `(r̂_u, S, r)` where `r̂_u` is the least supported corruption;
/// 2. positive `(r*, S, r)` with `r*` a random other aligned reference sentence;
/// 3. negative `(r̂_u, S, r̂_n)` with `r̂_n` a random other corruption;
/// 4. negative `(r, S*, r)` where `S*` is the alignment of the same `r*`.
///
/// Templates 2 and 4 are skipped when no other reference sentence has
/// aligned evidence.
pub fn build_contrast_sets<R: Rng>(
    prep: &PreparedExample<'_>,
    labels: &[SupportLabel],
    alignments: &[Alignment],
    corruptions: &HashMap<String, Vec<CorruptedSentence>>,
    embedder: &dyn Embedder,
    rng: &mut R,
) -> Result<Vec<RevisionRecord>> {
    let example = prep.example;
    let eid = example.example_id.as_str();
    let by_ref = alignment_map(alignments);
    let aligned_refs: Vec<usize> = example
        .reference
        .iter()
        .enumerate()
        .filter(|(_, r)| by_ref.get(r.sent_id.as_str()).is_some_and(|a| !a.aligned_src_ids.is_empty()))
        .map(|(i, _)| i)
        .collect();

    let mut out = Vec::new();
    for (ri, r) in example.reference.iter().enumerate() {
        let supported = labels
            .iter()
            .any(|l| l.ref_sent_id == r.sent_id && l.supported);
        if !supported {
            continue;
        }
        let alignment = by_ref
            .get(r.sent_id.as_str())
            .filter(|a| !a.aligned_src_ids.is_empty())
            .ok_or_else(|| Error::validation(eid, "alignment", format!("supported sentence {} has no aligned evidence", r.sent_id)))?;
        let candidates = corruptions.get(&r.sent_id).map(Vec::as_slice).unwrap_or(&[]);
        if candidates.len() < 2 {
            return Err(Error::validation(
                eid,
                "corruptions",
                format!("{} needs at least 2 corruption candidates, found {}", r.sent_id, candidates.len()),
            ));
        }
        let context = context_of(prep, alignment);
        let context_matrix = prep.context_matrix(embedder.dim(), &context.ids)?;
        let matrices = candidates
            .iter()
            .map(|c| embedder.gather(&c.origins, &c.sentence.tokens))
            .collect::<Result<Vec<_>>>()?;
        let u = select_most_unsupported(&matrices, &context_matrix)?;
        let worst = Side {
            text: &candidates[u].sentence.text,
            tokens: &candidates[u].sentence.tokens,
        };
        let original = Side {
            text: &r.text,
            tokens: &r.tokens,
        };

        let others: Vec<usize> = aligned_refs.iter().copied().filter(|&i| i != ri).collect();
        let star = (!others.is_empty()).then(|| others[rng.random_range(0..others.len())]);
        let mut n = rng.random_range(0..candidates.len() - 1);
        if n >= u {
            n += 1;
        }

        out.push(record(eid, &r.sent_id, &worst, &context, &original, Polarity::Positive, Provenance::RedressWorst)?);
        if let Some(si) = star {
            let rs = &example.reference[si];
            let input = Side {
                text: &rs.text,
                tokens: &rs.tokens,
            };
            out.push(record(eid, &r.sent_id, &input, &context, &original, Polarity::Positive, Provenance::RandomOtherRef)?);
        }
        let negative = Side {
            text: &candidates[n].sentence.text,
            tokens: &candidates[n].sentence.tokens,
        };
        out.push(record(eid, &r.sent_id, &worst, &context, &negative, Polarity::Negative, Provenance::RedressRandomNegative)?);
        if let Some(si) = star {
            let other_context = context_of(prep, by_ref[example.reference[si].sent_id.as_str()]);
            out.push(record(
                eid,
                &r.sent_id,
                &original,
                &other_context,
                &original,
                Polarity::Negative,
                Provenance::SelfWithOtherContext,
            )?);
        }
    }
    Ok(out)
}

/// Ten prompts per unsupported sentence: the input code is fixed to the
/// input's overlap with its evidence, the source code sweeps every decile
/// (set to the decile midpoint).
pub fn build_inference_prompts(
    prep: &PreparedExample<'_>,
    labels: &[SupportLabel],
    alignments: &[Alignment],
) -> Result<Vec<RevisionRecord>> {
    let example = prep.example;
    let eid = example.example_id.as_str();
    let by_ref = alignment_map(alignments);
    let mut out = Vec::new();
    for r in &example.reference {
        let unsupported = labels
            .iter()
            .any(|l| l.ref_sent_id == r.sent_id && !l.supported);
        if !unsupported {
            continue;
        }
        let alignment = by_ref
            .get(r.sent_id.as_str())
            .ok_or_else(|| Error::validation(eid, "alignment", format!("unsupported sentence {} has no alignment", r.sent_id)))?;
        let context = context_of(prep, alignment);
        let input_frac = inference_input_frac(&r.tokens, &context.tokens)
            .map_err(|e| Error::validation(eid, "reference", format!("{}: {e}", r.sent_id)))?;
        let input_frac_bin = decile(input_frac)?;
        for source_frac_bin in 0..INFERENCE_SWEEP {
            out.push(RevisionRecord {
                example_id: eid.to_string(),
                ref_sent_id: r.sent_id.clone(),
                input_text: r.text.clone(),
                context_sent_ids: context.ids.clone(),
                context_text: context.text.clone(),
                target_text: None,
                polarity: None,
                input_frac,
                source_frac: (source_frac_bin as f64 + 0.5) / DECILES as f64,
                input_frac_bin,
                source_frac_bin,
                provenance: Provenance::Inference,
                serialized_input: serialize_input(input_frac_bin, source_frac_bin, &r.text, &context.text),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn code_examples() {
        let same = compute_codes(&toks("a b c"), &toks("a b c"), &toks("x")).unwrap();
        assert_eq!(same.input_frac, 1.0);
        assert_eq!(same.source_frac, 0.0);
        let c = compute_codes(&toks("a b c d"), &toks("a b"), &toks("b c d")).unwrap();
        assert_eq!((c.input_frac, c.source_frac), (0.5, 0.75));
        assert!(compute_codes(&[], &toks("a"), &toks("a")).is_err());
    }

    #[test]
    fn multiplicity_counts() {
        let c = compute_codes(&toks("a a b"), &toks("a"), &[]).unwrap();
        assert!((c.input_frac - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn decile_examples() {
        assert_eq!(decile(0.0).unwrap(), 0);
        assert_eq!(decile(1.0).unwrap(), 9);
        assert_eq!(decile(0.23).unwrap(), 2);
        assert_eq!(decile(0.999).unwrap(), 9);
        assert!(decile(-0.01).is_err());
        assert!(decile(1.01).is_err());
        assert!(decile(f64::NAN).is_err());
    }

    #[test]
    fn serialized_form() {
        assert_eq!(serialize_input(3, 7, "x y", "s t"), "<IF_3> <SF_7> x y <SEP> s t");
    }

    #[test]
    fn template_counts() {
        assert_eq!(template_count(true), 4);
        assert_eq!(template_count(false), 2);
    }
}
