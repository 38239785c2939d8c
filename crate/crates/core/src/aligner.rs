//! Greedy importance-weighted alignment of reference sentences to source
//! evidence, with an improvement filter and entity-coverage completion.
//!
//! Each step picks the source sentence with the best importance-weighted mean
//! of per-token alignment scores, then lowers the importance of tokens it
//! covered: `w ← min(w, 1 − align)`. After at most `max_extractions` steps,
//! picks whose coverage gain is too small are dropped. Reference mentions the
//! source supports but the survivors miss pull in the source sentence holding
//! the closest synonym.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, greedy_align_scores, Matrix};
use crate::error::{Error, Result};
use crate::matcher::Matcher;
use crate::prepared::PreparedExample;

/// Importance at or below this is treated as fully covered.
pub const COVERED_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub max_extractions: usize,
    pub avg_improve_min: f64,
    pub max_improve_min: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            max_extractions: 5,
            avg_improve_min: 0.01,
            max_improve_min: 0.05,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.avg_improve_min < 0.0 || self.max_improve_min < 0.0 {
            return Err(Error::invalid("align improvement thresholds must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub example_id: String,
    pub ref_sent_id: String,
    pub aligned_src_ids: Vec<String>,
    pub completion_ids: Vec<String>,
    pub bs_precision: f64,
    pub per_token_best: Vec<f64>,
}

/// One greedy extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignStep {
    pub src_id: String,
    pub scores: Vec<f64>,
    pub improvement: Vec<f64>,
    pub importance_after: Vec<f64>,
}

impl AlignStep {
    pub fn passes(&self, config: &AlignConfig) -> bool {
        passes_improvement(&self.improvement, config)
    }
}

pub fn passes_improvement(improvement: &[f64], config: &AlignConfig) -> bool {
    if improvement.is_empty() {
        return false;
    }
    let mean = improvement.iter().sum::<f64>() / improvement.len() as f64;
    let max = improvement.iter().copied().fold(0.0, f64::max);
    mean >= config.avg_improve_min || max >= config.max_improve_min
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignTrace {
    pub steps: Vec<AlignStep>,
    pub survivors: Vec<String>,
}

/// A source sentence offered to the greedy loop.
#[derive(Debug, Clone, Copy)]
pub struct AlignCandidate<'a> {
    pub sent_id: &'a str,
    pub matrix: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub sent_id: String,
    pub scores: Vec<f64>,
    pub weighted: f64,
}

fn weighted_score(importance: &[f64], scores: &[f64]) -> f64 {
    let total: f64 = importance.iter().sum();
    let num: f64 = importance.iter().zip(scores).map(|(w, a)| w * a).sum();
    num / total
}

fn pick_best(importance: &[f64], scored: &[(&str, Vec<f64>)]) -> Result<(usize, f64)> {
    if importance.iter().all(|&w| w <= 0.0) {
        return Err(Error::invalid("importance is all zero; reference fully covered"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (id, scores)) in scored.iter().enumerate() {
        let s = weighted_score(importance, scores);
        best = match best {
            Some((bi, bs)) if bs > s || (bs == s && scored[bi].0 <= *id) => Some((bi, bs)),
            _ => Some((i, s)),
        };
    }
    best.ok_or_else(|| Error::invalid("no candidate sentences"))
}

/// Candidate maximizing `Σ w·align / Σ w`; ties go to the smaller sent_id.
pub fn select_next(
    reference: &Matrix,
    importance: &[f64],
    candidates: &[AlignCandidate<'_>],
) -> Result<Selection> {
    if importance.len() != reference.rows() {
        return Err(Error::LengthMismatch {
            left: importance.len(),
            right: reference.rows(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate sentences"));
    }
    let scored = candidates
        .iter()
        .map(|c| Ok((c.sent_id, greedy_align_scores(reference, c.matrix)?)))
        .collect::<Result<Vec<_>>>()?;
    let (index, weighted) = pick_best(importance, &scored)?;
    Ok(Selection {
        index,
        sent_id: candidates[index].sent_id.to_string(),
        scores: scored[index].1.clone(),
        weighted,
    })
}

/// `w' = min(w, 1 − align)`, elementwise.
pub fn update_importance(importance: &[f64], scores: &[f64]) -> Result<Vec<f64>> {
    if importance.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: importance.len(),
            right: scores.len(),
        });
    }
    Ok(importance
        .iter()
        .zip(scores)
        .map(|(&w, &a)| w.min(1.0 - a))
        .collect())
}

/// Per-token coverage gain `max(0, new − prev_best)`.
pub fn improvement(prev_best: &[f64], new_scores: &[f64]) -> Result<Vec<f64>> {
    if prev_best.len() != new_scores.len() {
        return Err(Error::LengthMismatch {
            left: prev_best.len(),
            right: new_scores.len(),
        });
    }
    Ok(prev_best
        .iter()
        .zip(new_scores)
        .map(|(&p, &n)| (n - p).max(0.0))
        .collect())
}

/// Runs the greedy loop and the improvement filter.
pub fn greedy_trace(
    reference: &Matrix,
    candidates: &[AlignCandidate<'_>],
    config: &AlignConfig,
) -> Result<AlignTrace> {
    let mut remaining = candidates
        .iter()
        .map(|c| Ok((c.sent_id, greedy_align_scores(reference, c.matrix)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut importance = vec![1.0; reference.rows()];
    let mut steps = Vec::new();
    while steps.len() < config.max_extractions && !remaining.is_empty() {
        if importance.iter().all(|&w| w <= COVERED_EPS) {
            break;
        }
        let (idx, _) = pick_best(&importance, &remaining)?;
        let (id, scores) = remaining.remove(idx);
        let prev_best: Vec<f64> = importance.iter().map(|w| 1.0 - w).collect();
        let gain = improvement(&prev_best, &scores)?;
        importance = update_importance(&importance, &scores)?;
        steps.push(AlignStep {
            src_id: id.to_string(),
            scores,
            improvement: gain,
            importance_after: importance.clone(),
        });
    }
    let survivors = steps
        .iter()
        .filter(|s| s.passes(config))
        .map(|s| s.src_id.clone())
        .collect();
    Ok(AlignTrace { steps, survivors })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn mean_best(scores: &[f64]) -> f64 {
    scores.iter().map(|s| s.max(0.0)).sum::<f64>() / scores.len() as f64
}

/// Greedy-matching BERTScore without idf weighting. Precision averages over
/// candidate tokens, recall over reference tokens; negatives clamp to 0.
pub fn bertscore(candidate: &Matrix, reference: &Matrix) -> Result<BertScore> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::invalid("bertscore needs non-empty matrices"));
    }
    let precision = mean_best(&greedy_align_scores(candidate, reference)?);
    let recall = mean_best(&greedy_align_scores(reference, candidate)?);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BertScore {
        precision,
        recall,
        f1,
    })
}

/// Aligns reference sentence `ref_index` of a prepared example.
pub fn align_reference_sentence(
    prep: &PreparedExample<'_>,
    ref_index: usize,
    config: &AlignConfig,
    matcher: &Matcher<'_>,
) -> Result<(Alignment, AlignTrace)> {
    let reference = &prep.example.reference[ref_index];
    if prep.source.is_empty() {
        return Err(Error::validation(
            &prep.example.example_id,
            "source_notes",
            format!("no source sentences to align {}", reference.sent_id),
        ));
    }
    let ref_matrix = &prep.reference_matrices[ref_index];
    let candidates: Vec<AlignCandidate<'_>> = prep
        .source
        .iter()
        .zip(&prep.source_matrices)
        .filter(|(_, m)| !m.is_empty())
        .map(|(s, m)| AlignCandidate {
            sent_id: &s.sent_id,
            matrix: m,
        })
        .collect();
    let trace = greedy_trace(ref_matrix, &candidates, config)?;

    let mut aligned: Vec<usize> = trace
        .survivors
        .iter()
        .filter_map(|id| prep.source_position_by_id(id))
        .collect();
    let mut completion = Vec::new();
    for mention in &prep.reference_mentions[ref_index] {
        if !matcher.is_supported(mention, &prep.source_mentions) {
            continue;
        }
        let covered = prep.source_mentions.iter().any(|c| {
            prep.source_position(&c.sent_key)
                .is_some_and(|pos| aligned.contains(&pos))
                && matcher.is_synonym(mention, c).synonym
        });
        if covered {
            continue;
        }
        let best = prep
            .source_mentions
            .iter()
            .filter(|c| matcher.is_synonym(mention, c).synonym)
            .filter_map(|c| {
                prep.source_position(&c.sent_key)
                    .map(|pos| (pos, c, cosine(&mention.span_vector, &c.span_vector)))
            })
            .max_by(|a, b| {
                a.2.total_cmp(&b.2)
                    .then_with(|| b.0.cmp(&a.0))
                    .then_with(|| b.1.mention_id.cmp(&a.1.mention_id))
            });
        if let Some((pos, _, _)) = best {
            if !aligned.contains(&pos) {
                aligned.push(pos);
                completion.push(pos);
            }
        }
    }

    let mut per_token_best = vec![0.0f64; ref_matrix.rows()];
    for &pos in &aligned {
        let scores = greedy_align_scores(ref_matrix, &prep.source_matrices[pos])?;
        for (b, s) in per_token_best.iter_mut().zip(scores) {
            *b = b.max(s.max(0.0));
        }
    }
    let bs_precision = if per_token_best.is_empty() {
        0.0
    } else {
        per_token_best.iter().sum::<f64>() / per_token_best.len() as f64
    };
    let id_of = |pos: &usize| prep.source[*pos].sent_id.clone();
    Ok((
        Alignment {
            example_id: prep.example.example_id.clone(),
            ref_sent_id: reference.sent_id.clone(),
            aligned_src_ids: aligned.iter().map(id_of).collect(),
            completion_ids: completion.iter().map(id_of).collect(),
            per_token_best,
            bs_precision,
        },
        trace,
    ))
}

/// Aligns every reference sentence of the example, in reference order.
pub fn align_example(
    prep: &PreparedExample<'_>,
    config: &AlignConfig,
    matcher: &Matcher<'_>,
) -> Result<Vec<Alignment>> {
    (0..prep.example.reference.len())
        .map(|i| align_reference_sentence(prep, i, config, matcher).map(|(a, _)| a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_importance_cases() {
        assert!((update_importance(&[1.0], &[0.6]).unwrap()[0] - 0.4).abs() < 1e-12);
        assert_eq!(update_importance(&[0.3], &[0.5]).unwrap(), vec![0.3]);
        assert_eq!(update_importance(&[0.2, 0.7], &[0.0, 0.0]).unwrap(), vec![0.2, 0.7]);
        assert!(update_importance(&[1.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn improvement_cases() {
        assert_eq!(improvement(&[0.3, 0.5], &[0.3, 0.5]).unwrap(), vec![0.0, 0.0]);
        let got = improvement(&[0.4, 0.0], &[0.42, 0.0]).unwrap();
        assert!((got[0] - 0.02).abs() < 1e-12 && got[1] == 0.0);
        assert_eq!(improvement(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), vec![0.0, 0.0]);
        assert!(improvement(&[0.1], &[]).is_err());
    }

    #[test]
    fn select_next_single_and_ties() {
        let r = Matrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        let a = Matrix::from_rows(2, &[[0.0f32, 1.0]]).unwrap();
        let b = Matrix::from_rows(2, &[[0.0f32, 1.0]]).unwrap();
        let only = [AlignCandidate { sent_id: "z", matrix: &a }];
        assert_eq!(select_next(&r, &[1.0], &only).unwrap().sent_id, "z");
        let tied = [
            AlignCandidate { sent_id: "s2", matrix: &a },
            AlignCandidate { sent_id: "s1", matrix: &b },
        ];
        assert_eq!(select_next(&r, &[1.0], &tied).unwrap().sent_id, "s1");
        assert!(select_next(&r, &[0.0], &tied).is_err());
        assert!(select_next(&r, &[1.0], &[]).is_err());
    }

    #[test]
    fn bertscore_degenerate_cases() {
        let a = Matrix::from_rows(2, &[[1.0f32, 0.0], [0.6, 0.8]]).unwrap();
        let s = bertscore(&a, &a).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-12 && (s.f1 - 1.0).abs() < 1e-12);
        let x = Matrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        let y = Matrix::from_rows(2, &[[0.0f32, 1.0], [0.0, -1.0]]).unwrap();
        let s = bertscore(&x, &y).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(bertscore(&Matrix::zeros(0, 2), &y).is_err());
    }

    #[test]
    fn trace_stops_when_covered() {
        let r = Matrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        let same = Matrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        let other = Matrix::from_rows(2, &[[0.5f32, 0.5]]).unwrap();
        let cands = [
            AlignCandidate { sent_id: "a", matrix: &same },
            AlignCandidate { sent_id: "b", matrix: &other },
        ];
        let trace = greedy_trace(&r, &cands, &AlignConfig::default()).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.survivors, vec!["a".to_string()]);
    }
}
