//! Selection among over-generated revision candidates, fully extractive
//! revision, entailment-ranked selection and extractiveness binning.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aligner::bertscore;
use crate::corpus::{EntityMention, Sentence};
use crate::embed::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LessAbstractive,
    MoreAbstractive,
    FullyExtractive,
    RankCorrected,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::LessAbstractive,
        Strategy::MoreAbstractive,
        Strategy::FullyExtractive,
        Strategy::RankCorrected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LessAbstractive => "less_abstractive",
            Strategy::MoreAbstractive => "more_abstractive",
            Strategy::FullyExtractive => "fully_extractive",
            Strategy::RankCorrected => "rank_corrected",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown rescore strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RescoreConfig {
    pub density_penalty_weight: f64,
    pub strategy: Strategy,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig {
            density_penalty_weight: 0.25,
            strategy: Strategy::LessAbstractive,
        }
    }
}

impl RescoreConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.density_penalty_weight;
        if !l.is_finite() || l < 0.0 {
            return Err(Error::invalid(format!("rescore.density_penalty_weight must be >= 0, got {l}")));
        }
        Ok(())
    }
}

/// One over-generated revision of a reference sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub example_id: String,
    pub ref_sent_id: String,
    pub candidate_index: usize,
    pub source_frac_bin: usize,
    pub text: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailment: Option<f64>,
    /// Entity annotations, when the generator or a tagger supplies them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<EntityMention>,
}

impl Candidate {
    /// The candidate as a reference sentence with the given id.
    pub fn to_sentence(&self, sent_id: &str) -> Sentence {
        Sentence {
            sent_id: sent_id.to_string(),
            text: self.text.clone(),
            tokens: self.tokens.clone(),
            entities: self.entities.clone(),
        }
    }
}

/// Store key for a revision candidate.
pub fn candidate_key(example_id: &str, ref_sent_id: &str, index: usize) -> String {
    format!("{example_id}/{ref_sent_id}/candidate/{index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragmentStats {
    pub coverage: f64,
    pub density: f64,
}

/// Lengths of the greedy extractive fragments of `summary` in `source`.
pub fn extractive_fragments(summary: &[String], source: &[String]) -> Vec<usize> {
    let mut fragments = Vec::new();
    let mut i = 0;
    while i < summary.len() {
        let mut best = 0;
        let mut j = 0;
        while j < source.len() {
            if summary[i] == source[j] {
                let (mut a, mut b) = (i, j);
                while a < summary.len() && b < source.len() && summary[a] == source[b] {
                    a += 1;
                    b += 1;
                }
                best = best.max(a - i);
                j = b;
            } else {
                j += 1;
            }
        }
        if best > 0 {
            fragments.push(best);
        }
        i += best.max(1);
    }
    fragments
}

pub fn fragment_stats(summary: &[String], source: &[String]) -> Result<FragmentStats> {
    if summary.is_empty() {
        return Err(Error::invalid("fragment statistics need a non-empty summary"));
    }
    let n = summary.len() as f64;
    let fragments = extractive_fragments(summary, source);
    Ok(FragmentStats {
        coverage: fragments.iter().sum::<usize>() as f64 / n,
        density: fragments.iter().map(|&f| (f * f) as f64).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub bs_precision: f64,
    pub coverage: f64,
    pub density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailment: Option<f64>,
    pub len: usize,
}

pub fn score_candidate(
    tokens: &[String],
    matrix: &Matrix,
    context_tokens: &[String],
    context_matrix: &Matrix,
    entailment: Option<f64>,
) -> Result<CandidateScores> {
    let fs = fragment_stats(tokens, context_tokens)?;
    Ok(CandidateScores {
        bs_precision: bertscore(matrix, context_matrix)?.precision,
        coverage: fs.coverage,
        density: fs.density,
        entailment,
        len: tokens.len(),
    })
}

/// Strategy score of a scored candidate. Density is normalized by length,
/// which bounds the abstractiveness penalty by λ.
pub fn strategy_score(scores: &CandidateScores, strategy: Strategy, lambda: f64) -> f64 {
    match strategy {
        Strategy::MoreAbstractive => {
            let normalized = if scores.len == 0 { 0.0 } else { scores.density / scores.len as f64 };
            scores.bs_precision - lambda * normalized
        }
        _ => scores.bs_precision,
    }
}

fn argmax_by_density(keys: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for i in 1..keys.len() {
        let (s, d) = keys[i];
        let (bs, bd) = keys[best];
        let better = match s.total_cmp(&bs) {
            Ordering::Greater => true,
            Ordering::Equal => d < bd,
            Ordering::Less => false,
        };
        if better {
            best = i;
        }
    }
    best
}

/// Index of the best candidate under the configured score-based strategy.
/// Ties go to lower density, then lower index.
pub fn select_revision(scores: &[CandidateScores], config: &RescoreConfig) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("no revision candidates"));
    }
    match config.strategy {
        Strategy::LessAbstractive | Strategy::MoreAbstractive => {}
        other => return Err(Error::invalid(format!("{other} is not a score-based strategy"))),
    }
    let keys: Vec<(f64, f64)> = scores
        .iter()
        .map(|s| (strategy_score(s, config.strategy, config.density_penalty_weight), s.density))
        .collect();
    Ok(argmax_by_density(&keys))
}

/// Highest entailment wins; ties go to the most abstractive (lowest
/// density), then the lowest index.
pub fn rank_corrected(scores: &[CandidateScores]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("no revision candidates"));
    }
    let keys = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.entailment
                .map(|e| (e, s.density))
                .ok_or_else(|| Error::invalid(format!("candidate {i} has no entailment score")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax_by_density(&keys))
}

/// Position of the source sentence with the highest BERTScore F1 against
/// the reference; ties go to the lowest sent_id.
pub fn fully_extractive_revise(reference: &Matrix, sources: &[(&str, &Matrix)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (id, m)) in sources.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        let f1 = bertscore(reference, m)?.f1;
        let better = match best {
            None => true,
            Some((b, bf)) => f1 > bf || (f1 == bf && *id < sources[b].0),
        };
        if better {
            best = Some((i, f1));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::invalid("fully extractive revision needs a non-empty source"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub example_id: String,
    pub ref_sent_id: String,
    pub chosen_index: Option<usize>,
    pub strategy: Strategy,
    pub scores: CandidateScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_src_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAggregate {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_score: Option<f64>,
}

/// Groups `(coverage, faithfulness)` pairs into `[e_i, e_{i+1})` bins; the
/// last bin is closed.
pub fn extractiveness_bins(items: &[(f64, Option<f64>)], edges: &[f64]) -> Result<Vec<BinAggregate>> {
    if edges.len() < 2 || edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(Error::invalid("bin edges must span [0, 1]"));
    }
    if edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::invalid("bin edges must be strictly increasing"));
    }
    let nbins = edges.len() - 1;
    let mut sums = vec![(0usize, 0usize, 0.0f64); nbins];
    for &(coverage, score) in items {
        if !(0.0..=1.0).contains(&coverage) {
            return Err(Error::invalid(format!("coverage {coverage} outside [0, 1]")));
        }
        let b = edges[1..]
            .iter()
            .position(|&hi| coverage < hi)
            .unwrap_or(nbins - 1);
        sums[b].0 += 1;
        if let Some(s) = score {
            sums[b].1 += 1;
            sums[b].2 += s;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, scored, total))| BinAggregate {
            lo: edges[i],
            hi: edges[i + 1],
            count,
            mean_score: (scored > 0).then(|| total / scored as f64),
        })
        .collect())
}

/// Evenly spaced edges over [0, 1].
pub fn uniform_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| i as f64 / bins as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn sc(bs: f64, density: f64, len: usize, ent: Option<f64>) -> CandidateScores {
        CandidateScores {
            bs_precision: bs,
            coverage: 0.0,
            density,
            entailment: ent,
            len,
        }
    }

    #[test]
    fn fragment_examples() {
        let src = toks("the patient had a cough and fever today");
        let s = fragment_stats(&toks("had a cough"), &src).unwrap();
        assert_eq!((s.coverage, s.density), (1.0, 3.0));
        assert_eq!(fragment_stats(&toks("x y"), &src).unwrap(), FragmentStats { coverage: 0.0, density: 0.0 });
        let s = fragment_stats(&toks("the patient fever today"), &src).unwrap();
        assert_eq!((s.coverage, s.density), (1.0, 2.0));
        assert!(fragment_stats(&[], &src).is_err());
    }

    #[test]
    fn fragments_prefer_longest_match() {
        let src = toks("a b x a b c");
        assert_eq!(extractive_fragments(&toks("a b c"), &src), vec![3]);
    }

    #[test]
    fn more_abstractive_arithmetic() {
        let s = sc(0.9, 0.4 * 10.0, 10, None);
        assert!((strategy_score(&s, Strategy::MoreAbstractive, 0.25) - 0.8).abs() < 1e-12);
        assert_eq!(strategy_score(&s, Strategy::MoreAbstractive, 0.0), 0.9);
        let full = sc(1.0, 7.0, 7, None);
        assert!((strategy_score(&full, Strategy::MoreAbstractive, 0.25) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn selection_ties() {
        let cfg = RescoreConfig::default();
        assert_eq!(select_revision(&[sc(0.5, 1.0, 4, None)], &cfg).unwrap(), 0);
        let cands = [sc(0.8, 3.0, 4, None), sc(0.8, 1.0, 4, None), sc(0.8, 1.0, 4, None), sc(0.7, 0.0, 4, None)];
        assert_eq!(select_revision(&cands, &cfg).unwrap(), 1);
        assert!(select_revision(&[], &cfg).is_err());
        let bad = RescoreConfig { strategy: Strategy::RankCorrected, ..cfg };
        assert!(select_revision(&cands, &bad).is_err());
    }

    #[test]
    fn rank_corrected_examples() {
        let c = [sc(0.0, 1.0, 4, Some(0.2)), sc(0.0, 5.0, 4, Some(0.9)), sc(0.0, 2.0, 4, Some(0.9))];
        assert_eq!(rank_corrected(&c).unwrap(), 2);
        let eq = [sc(0.0, 3.0, 4, Some(0.5)), sc(0.0, 1.0, 4, Some(0.5)), sc(0.0, 2.0, 4, Some(0.5))];
        assert_eq!(rank_corrected(&eq).unwrap(), 1);
        let strict = [sc(0.0, 9.0, 4, Some(0.95)), sc(0.0, 0.0, 4, Some(0.5))];
        assert_eq!(rank_corrected(&strict).unwrap(), 0);
        assert!(rank_corrected(&[sc(0.0, 1.0, 4, Some(0.5)), sc(0.0, 1.0, 4, None)]).is_err());
    }

    #[test]
    fn fully_extractive_picks_verbatim_and_breaks_ties_by_id() {
        let a = Matrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        let b = Matrix::from_rows(2, &[[0.0f32, 1.0]]).unwrap();
        assert_eq!(fully_extractive_revise(&a, &[("s1", &b), ("s2", &a)]).unwrap(), 1);
        assert_eq!(fully_extractive_revise(&a, &[("s9", &a), ("s2", &a)]).unwrap(), 1);
        assert!(fully_extractive_revise(&a, &[]).is_err());
    }

    #[test]
    fn binning() {
        let edges = uniform_edges(3);
        let all_full = extractiveness_bins(&[(1.0, Some(1.0)), (1.0, None)], &edges).unwrap();
        assert_eq!(all_full.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 0, 2]);
        assert_eq!(all_full[2].mean_score, Some(1.0));
        let empty = extractiveness_bins(&[], &edges).unwrap();
        assert!(empty.iter().all(|b| b.count == 0 && b.mean_score.is_none()));
        let items = [(0.0, Some(0.0)), (0.2, Some(1.0)), (0.34, None), (0.5, Some(0.5)), (0.7, Some(1.0)), (0.9, Some(0.0))];
        let bins = extractiveness_bins(&items, &edges).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2, 2]);
        assert_eq!(bins[0].mean_score, Some(0.5));
        assert!(extractiveness_bins(&[], &[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(extractiveness_bins(&[], &[0.1, 1.0]).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("best".parse::<Strategy>().is_err());
    }
}
