//! Synthetic hallucinations: nearest-neighbor distractor sets, entity swaps
//! plus span deletion, the random/related swap baselines, and the
//! training/inference records consumed by an external corruption model.
//!
//! Every sampler is driven by an explicit 64-bit seed. [`derive_seed`] turns
//! a global seed plus (example, sentence, sample) ids into a per-sample seed,
//! so results never depend on worker scheduling.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::aligner::bertscore;
use crate::corpus::{EntityMention, EntityType, Sentence, TokenSpan};
use crate::embed::{fnv1a64, Matrix, SentenceIndex, TokenOrigin};
use crate::error::{Error, Result};
use crate::matcher::{Matcher, ResolvedMention};

pub const MAX_DISTRACTORS: usize = 25;

/// Success probability of the deletion-length geometric (mean length 3).
const DELETION_P: f64 = 1.0 / 3.0;

/// Mixes a global seed with string ids and a sample index.
pub fn derive_seed(global: u64, parts: &[&str], sample: u64) -> u64 {
    let mut bytes = global.to_le_bytes().to_vec();
    for p in parts {
        bytes.extend_from_slice(p.as_bytes());
        bytes.push(0xff);
    }
    bytes.extend_from_slice(&sample.to_le_bytes());
    fnv1a64(&bytes)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An entity that can be swapped into a sentence, with the location of its
/// tokens in the embedding store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapEntity {
    pub etype: EntityType,
    pub text: String,
    pub tokens: Vec<String>,
    pub codes: Vec<String>,
    pub key: String,
    pub span: TokenSpan,
}

impl From<&ResolvedMention> for SwapEntity {
    fn from(m: &ResolvedMention) -> Self {
        SwapEntity {
            etype: m.etype,
            text: m.text.clone(),
            tokens: m.tokens.clone(),
            codes: m.codes.clone(),
            key: m.sent_key.clone(),
            span: m.token_span,
        }
    }
}

impl SwapEntity {
    fn same_origin(&self, m: &ResolvedMention) -> bool {
        self.key == m.sent_key && self.span == m.token_span
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistractorSet {
    pub anchor_key: String,
    /// Synonym-deduplicated, in neighbor order.
    pub entities: Vec<ResolvedMention>,
}

/// Walks the anchor's nearest neighbors and keeps the first
/// [`MAX_DISTRACTORS`] mutually non-synonymous entities.
pub fn build_distractors(
    anchor_key: &str,
    anchor_vector: &[f32],
    index: &SentenceIndex,
    mentions_by_key: &HashMap<String, Vec<ResolvedMention>>,
    matcher: &Matcher<'_>,
) -> Result<DistractorSet> {
    let mut set = DistractorSet {
        anchor_key: anchor_key.to_string(),
        entities: Vec::new(),
    };
    if index.is_empty() {
        return Ok(set);
    }
    let exclude: HashSet<String> = [anchor_key.to_string()].into();
    'walk: for (key, _) in index.knn(anchor_vector, index.len(), &exclude)? {
        let Some(mentions) = mentions_by_key.get(&key) else {
            continue;
        };
        for m in mentions {
            if set.entities.iter().any(|e| matcher.is_synonym(e, m).synonym) {
                continue;
            }
            set.entities.push(m.clone());
            if set.entities.len() == MAX_DISTRACTORS {
                break 'walk;
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptOptions {
    /// Withhold removed entities from the distractor pool and field.
    pub m1: bool,
    /// Advertise one more swap than was performed at inference.
    pub m2: bool,
    pub deletion: bool,
    pub shuffle: bool,
}

impl Default for CorruptOptions {
    fn default() -> Self {
        CorruptOptions {
            m1: true,
            m2: true,
            deletion: true,
            shuffle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapPair {
    pub removed: String,
    pub replacement: SwapEntity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub k: usize,
    pub swap_pairs: Vec<SwapPair>,
    pub deleted_span: Option<TokenSpan>,
    pub shuffle: bool,
    pub seed: u64,
    /// Set when fewer distractors than sampled swaps were available.
    pub clamped: bool,
}

impl CorruptionPlan {
    pub fn identity(seed: u64) -> Self {
        CorruptionPlan {
            k: 0,
            swap_pairs: Vec::new(),
            deleted_span: None,
            shuffle: false,
            seed,
            clamped: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.swap_pairs.is_empty() && self.deleted_span.is_none() && !self.shuffle
    }
}

fn sample_swap_count<R: Rng>(mentions: usize, rng: &mut R) -> usize {
    if mentions == 0 {
        return 0;
    }
    Binomial::new(mentions as u64, 0.5)
        .map(|b| b.sample(rng) as usize)
        .unwrap_or(0)
}

/// Mentions chosen for swapping, in sentence order.
fn choose_mentions<R: Rng>(mentions: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut chosen = index::sample(rng, mentions, k.min(mentions)).into_vec();
    chosen.sort_unstable();
    chosen
}

fn sample_deletion<R: Rng>(s: &Sentence, rng: &mut R) -> Option<TokenSpan> {
    let in_entity = |i: usize| s.entities.iter().any(|m| m.token_span.contains(i));
    let starts: Vec<usize> = (0..s.tokens.len()).filter(|&i| !in_entity(i)).collect();
    if starts.is_empty() || s.tokens.len() < 2 {
        return None;
    }
    let start = starts[rng.random_range(0..starts.len())];
    // at least one token always survives
    let len = Geometric::new(DELETION_P)
        .map(|g| g.sample(rng) as usize + 1)
        .unwrap_or(1)
        .min(s.tokens.len() - 1);
    let mut end = start;
    while end < s.tokens.len() && end - start < len && !in_entity(end) {
        end += 1;
    }
    Some(TokenSpan::new(start, end))
}

/// Samples a corruption of `s`: `k ~ Binomial(m, 0.5)` swaps with
/// replacements drawn without replacement from the distractor pool
/// (same type first), plus an optional short span deletion that never
/// touches an entity span.
pub fn sample_plan(
    s: &Sentence,
    s_mentions: &[ResolvedMention],
    distractors: &DistractorSet,
    seed: u64,
    options: &CorruptOptions,
    matcher: &Matcher<'_>,
) -> CorruptionPlan {
    let mut rng = rng_from_seed(seed);
    let m = s.entities.len();
    let k = sample_swap_count(m, &mut rng);
    let mut chosen = choose_mentions(m, k, &mut rng);

    let removed: Vec<&ResolvedMention> = chosen
        .iter()
        .filter_map(|&i| s_mentions.iter().find(|r| r.mention_id == s.entities[i].mention_id))
        .collect();
    let mut pool: Vec<&ResolvedMention> = distractors
        .entities
        .iter()
        .filter(|d| !options.m1 || !removed.iter().any(|r| matcher.is_synonym(r, d).synonym))
        .collect();

    let mut clamped = false;
    if pool.len() < chosen.len() {
        clamped = true;
        // drop a uniform subset of the chosen mentions
        chosen.shuffle(&mut rng);
        chosen.truncate(pool.len());
        chosen.sort_unstable();
    }

    let mut swap_pairs = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let mention = &s.entities[i];
        let same: Vec<usize> = (0..pool.len())
            .filter(|&j| pool[j].etype == mention.etype)
            .collect();
        let pick = if same.is_empty() {
            rng.random_range(0..pool.len())
        } else {
            same[rng.random_range(0..same.len())]
        };
        let replacement = SwapEntity::from(pool.remove(pick));
        swap_pairs.push(SwapPair {
            removed: mention.mention_id.clone(),
            replacement,
        });
    }

    let deleted_span = if options.deletion {
        sample_deletion(s, &mut rng)
    } else {
        None
    };
    CorruptionPlan {
        k: swap_pairs.len(),
        swap_pairs,
        deleted_span,
        shuffle: options.shuffle,
        seed,
        clamped,
    }
}

/// A corrupted sentence and, per token, where its vector comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedSentence {
    pub sentence: Sentence,
    pub origins: Vec<TokenOrigin>,
}

impl CorruptedSentence {
    /// The unmodified sentence with origins pointing at its own rows.
    pub fn original(s: &Sentence, key: &str) -> Self {
        CorruptedSentence {
            sentence: s.clone(),
            origins: (0..s.tokens.len())
                .map(|row| TokenOrigin {
                    key: key.to_string(),
                    row,
                })
                .collect(),
        }
    }
}

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Applies swaps, then the deletion, then the optional shuffle of non-entity
/// tokens. Entity annotations are re-indexed; swapped-in entities are
/// annotated with their replacement's type and codes.
pub fn apply_plan(s: &Sentence, key: &str, plan: &CorruptionPlan) -> CorruptedSentence {
    if plan.is_identity() {
        return CorruptedSentence::original(s, key);
    }
    let swaps: HashMap<&str, &SwapEntity> = plan
        .swap_pairs
        .iter()
        .map(|p| (p.removed.as_str(), &p.replacement))
        .collect();
    let mut by_start: BTreeMap<usize, &EntityMention> = BTreeMap::new();
    for m in &s.entities {
        by_start.insert(m.token_span.start, m);
    }

    let mut tokens = Vec::with_capacity(s.tokens.len());
    let mut origins = Vec::with_capacity(s.tokens.len());
    let mut entities = Vec::with_capacity(s.entities.len());
    let mut i = 0;
    while i < s.tokens.len() {
        if let Some(m) = by_start.get(&i) {
            let start = tokens.len();
            if let Some(rep) = swaps.get(m.mention_id.as_str()) {
                for (j, t) in rep.tokens.iter().enumerate() {
                    tokens.push(t.clone());
                    origins.push(TokenOrigin {
                        key: rep.key.clone(),
                        row: rep.span.start + j,
                    });
                }
                entities.push(EntityMention {
                    mention_id: format!("{}~swap", m.mention_id),
                    etype: rep.etype,
                    text: rep.text.clone(),
                    token_span: TokenSpan::new(start, tokens.len()),
                    codes: rep.codes.clone(),
                });
            } else {
                for row in m.token_span.start..m.token_span.end {
                    tokens.push(s.tokens[row].clone());
                    origins.push(TokenOrigin {
                        key: key.to_string(),
                        row,
                    });
                }
                let mut kept = (*m).clone();
                kept.token_span = TokenSpan::new(start, tokens.len());
                entities.push(kept);
            }
            i = m.token_span.end;
            continue;
        }
        if !plan.deleted_span.is_some_and(|d| d.contains(i)) {
            tokens.push(s.tokens[i].clone());
            origins.push(TokenOrigin {
                key: key.to_string(),
                row: i,
            });
        }
        i += 1;
    }

    if plan.shuffle {
        let free: Vec<usize> = (0..tokens.len())
            .filter(|&t| !entities.iter().any(|e| e.token_span.contains(t)))
            .collect();
        let mut order = free.clone();
        order.shuffle(&mut rng_from_seed(plan.seed ^ SHUFFLE_SALT));
        let old_tokens = tokens.clone();
        let old_origins = origins.clone();
        for (&dst, &src) in free.iter().zip(&order) {
            tokens[dst] = old_tokens[src].clone();
            origins[dst] = old_origins[src].clone();
        }
    }

    CorruptedSentence {
        sentence: Sentence {
            sent_id: s.sent_id.clone(),
            text: tokens.join(" "),
            tokens,
            entities,
        },
        origins,
    }
}

/// Corpus-wide entity frequencies per type, for frequency-weighted swaps.
#[derive(Debug, Clone, Default)]
pub struct EntityFrequencyTable {
    by_type: BTreeMap<EntityType, (Vec<SwapEntity>, Vec<usize>)>,
}

impl EntityFrequencyTable {
    /// Counts surface forms (type + tokens); the first occurrence represents
    /// each form.
    pub fn from_mentions<'a>(mentions: impl IntoIterator<Item = &'a ResolvedMention>) -> Self {
        let mut counts: BTreeMap<(EntityType, Vec<String>), (SwapEntity, usize)> = BTreeMap::new();
        for m in mentions {
            counts
                .entry((m.etype, m.tokens.clone()))
                .or_insert_with(|| (SwapEntity::from(m), 0))
                .1 += 1;
        }
        let mut table = EntityFrequencyTable::default();
        for ((etype, _), (entity, n)) in counts {
            let slot = table.by_type.entry(etype).or_default();
            slot.0.push(entity);
            slot.1.push(n);
        }
        table
    }

    pub fn is_empty(&self) -> bool {
        self.by_type.is_empty()
    }

    pub fn count(&self, etype: EntityType, text: &str) -> usize {
        self.by_type.get(&etype).map_or(0, |(es, ns)| {
            es.iter()
                .zip(ns)
                .filter(|(e, _)| e.text == text)
                .map(|(_, n)| *n)
                .sum()
        })
    }

    /// Draws an entity of `etype` proportionally to its corpus frequency.
    pub fn sample<R: Rng>(&self, etype: EntityType, rng: &mut R) -> Option<&SwapEntity> {
        let (entities, weights) = self.by_type.get(&etype)?;
        let dist = WeightedIndex::new(weights).ok()?;
        Some(&entities[dist.sample(rng)])
    }
}

/// Random-swap baseline: replacements follow corpus frequency within type.
/// Mentions whose type never occurs in the table stay unchanged.
pub fn swap_random<R: Rng>(
    s: &Sentence,
    key: &str,
    table: &EntityFrequencyTable,
    rng: &mut R,
) -> (CorruptedSentence, CorruptionPlan) {
    let k = sample_swap_count(s.entities.len(), rng);
    let chosen = choose_mentions(s.entities.len(), k, rng);
    let swap_pairs: Vec<SwapPair> = chosen
        .into_iter()
        .filter_map(|i| {
            let m = &s.entities[i];
            table.sample(m.etype, rng).map(|rep| SwapPair {
                removed: m.mention_id.clone(),
                replacement: rep.clone(),
            })
        })
        .collect();
    let plan = CorruptionPlan {
        k: swap_pairs.len(),
        swap_pairs,
        ..CorruptionPlan::identity(0)
    };
    (apply_plan(s, key, &plan), plan)
}

/// Related-swap baseline: replacements uniform over same-type distractors.
/// Returns `flagged = true` when the distractor set is empty.
pub fn swap_related<R: Rng>(
    s: &Sentence,
    key: &str,
    distractors: &DistractorSet,
    rng: &mut R,
) -> (CorruptedSentence, CorruptionPlan, bool) {
    if distractors.entities.is_empty() {
        return (
            CorruptedSentence::original(s, key),
            CorruptionPlan::identity(0),
            true,
        );
    }
    let k = sample_swap_count(s.entities.len(), rng);
    let chosen = choose_mentions(s.entities.len(), k, rng);
    let swap_pairs: Vec<SwapPair> = chosen
        .into_iter()
        .filter_map(|i| {
            let m = &s.entities[i];
            let same: Vec<&ResolvedMention> = distractors
                .entities
                .iter()
                .filter(|d| d.etype == m.etype)
                .collect();
            if same.is_empty() {
                return None;
            }
            let rep = same[rng.random_range(0..same.len())];
            Some(SwapPair {
                removed: m.mention_id.clone(),
                replacement: SwapEntity::from(rep),
            })
        })
        .collect();
    let plan = CorruptionPlan {
        k: swap_pairs.len(),
        swap_pairs,
        ..CorruptionPlan::identity(0)
    };
    (apply_plan(s, key, &plan), plan, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RedressMode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DistractorField {
    pub etype: EntityType,
    pub text: String,
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedressRecord {
    pub mode: RedressMode,
    pub k_code: usize,
    pub distractors: Vec<DistractorField>,
    pub corrupted_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_text: Option<String>,
}

pub const SEQ2SEQ_SEP: &str = "<sep>";

impl RedressRecord {
    /// `<k_N> <sep> distractor ; distractor <sep> corrupted text`.
    pub fn seq2seq_input(&self) -> String {
        let ds: Vec<&str> = self.distractors.iter().map(|d| d.text.as_str()).collect();
        format!(
            "<k_{}> {SEQ2SEQ_SEP} {} {SEQ2SEQ_SEP} {}",
            self.k_code,
            ds.join(" ; "),
            self.corrupted_text
        )
    }
}

fn field_of(etype: EntityType, text: &str, codes: &[String]) -> DistractorField {
    DistractorField {
        etype,
        text: text.to_string(),
        codes: codes.to_vec(),
    }
}

/// Builds the corruption-model record for an applied plan.
///
/// Training exchanges entities: replacements leave the distractor field and
/// the removed entities join it, and the target is the original sentence.
/// Inference drops the replacements too but, under m1, withholds the removed
/// entities and any synonyms of them; under m2 the swap code is `k + 1`.
/// The field is sorted so its order carries no hint of the exchange.
#[allow(clippy::too_many_arguments)]
pub fn emit_redress(
    s: &Sentence,
    s_mentions: &[ResolvedMention],
    distractors: &DistractorSet,
    plan: &CorruptionPlan,
    corrupted: &CorruptedSentence,
    mode: RedressMode,
    options: &CorruptOptions,
    matcher: &Matcher<'_>,
) -> RedressRecord {
    let removed: Vec<&ResolvedMention> = plan
        .swap_pairs
        .iter()
        .filter_map(|p| s_mentions.iter().find(|m| m.mention_id == p.removed))
        .collect();
    let kept = distractors
        .entities
        .iter()
        .filter(|d| !plan.swap_pairs.iter().any(|p| p.replacement.same_origin(d)));
    let mut field: Vec<DistractorField> = match mode {
        RedressMode::Train => kept
            .map(|d| field_of(d.etype, &d.text, &d.codes))
            .chain(removed.iter().map(|r| field_of(r.etype, &r.text, &r.codes)))
            .collect(),
        RedressMode::Inference if options.m1 => kept
            .filter(|d| !removed.iter().any(|r| matcher.is_synonym(r, d).synonym))
            .map(|d| field_of(d.etype, &d.text, &d.codes))
            .collect(),
        RedressMode::Inference => kept
            .map(|d| field_of(d.etype, &d.text, &d.codes))
            .chain(removed.iter().map(|r| field_of(r.etype, &r.text, &r.codes)))
            .collect(),
    };
    field.sort();
    let (k_code, target_text) = match mode {
        RedressMode::Train => (plan.k, Some(s.text.clone())),
        RedressMode::Inference => (plan.k + usize::from(options.m2), None),
    };
    RedressRecord {
        mode,
        k_code,
        distractors: field,
        corrupted_text: corrupted.sentence.text.clone(),
        target_text,
    }
}

/// Index of the candidate with the lowest BERTScore precision against the
/// aligned context; ties go to the lower index.
pub fn select_most_unsupported(candidates: &[Matrix], context: &Matrix) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("no corruption candidates"));
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let p = bertscore(c, context)?.precision;
        if p < best.1 {
            best = (i, p);
        }
    }
    Ok(best.0)
}

/// One minus the fraction of `a`'s tokens (with multiplicity) found in `b`.
pub fn diversity(a: &[String], b: &[String]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("diversity needs non-empty samples"));
    }
    let vocab: HashSet<&String> = b.iter().collect();
    let covered = a.iter().filter(|t| vocab.contains(t)).count();
    Ok(1.0 - covered as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{DocFrequencyTable, MatchConfig};

    fn toks(w: &[&str]) -> Vec<String> {
        w.iter().map(|s| s.to_string()).collect()
    }

    fn mention(id: &str, etype: EntityType, text: &str, start: usize, end: usize) -> EntityMention {
        EntityMention {
            mention_id: id.into(),
            etype,
            text: text.into(),
            token_span: TokenSpan::new(start, end),
            codes: if etype.requires_codes() { vec![format!("C-{text}")] } else { vec![] },
        }
    }

    fn resolved(key: &str, m: &EntityMention, tokens: &[String]) -> ResolvedMention {
        let v = crate::embed::hashed_embed(&tokens[m.token_span.start..m.token_span.end], 32);
        let pooled = crate::embed::mean_rows(&v).into_iter().map(|x| x as f32).collect::<Vec<_>>();
        ResolvedMention {
            mention_id: m.mention_id.clone(),
            sent_key: key.into(),
            token_span: m.token_span,
            etype: m.etype,
            text: m.text.clone(),
            codes: m.codes.clone(),
            tokens: tokens[m.token_span.start..m.token_span.end].to_vec(),
            embed_vector: pooled.clone(),
            span_vector: pooled,
        }
    }

    fn sentence() -> Sentence {
        let tokens = toks(&["cough", "treated", "with", "lasix", "and", "rest", "today"]);
        Sentence {
            sent_id: "r1".into(),
            text: tokens.join(" "),
            entities: vec![
                mention("m0", EntityType::Diagnosis, "cough", 0, 1),
                mention("m1", EntityType::Medication, "lasix", 3, 4),
            ],
            tokens,
        }
    }

    fn distractor_set(names: &[(&str, EntityType)]) -> DistractorSet {
        let entities = names
            .iter()
            .enumerate()
            .map(|(i, (name, etype))| {
                let tokens = toks(&[name]);
                let m = mention(&format!("d{i}"), *etype, name, 0, 1);
                resolved(&format!("n/d{i}"), &m, &tokens)
            })
            .collect();
        DistractorSet {
            anchor_key: "e/r1".into(),
            entities,
        }
    }

    fn fixture() -> (MatchConfig, DocFrequencyTable) {
        (MatchConfig::default(), DocFrequencyTable::default())
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(0, &["e1", "r1"], 0), derive_seed(0, &["e1", "r1"], 0));
        assert_ne!(derive_seed(0, &["e1", "r1"], 0), derive_seed(0, &["e1", "r1"], 1));
        assert_ne!(derive_seed(0, &["e1", "r1"], 0), derive_seed(0, &["e1r", "1"], 0));
    }

    #[test]
    fn zero_mentions_give_k_zero() {
        let (cfg, dft) = fixture();
        let m = Matcher::new(&cfg, &dft);
        let mut s = sentence();
        s.entities.clear();
        let plan = sample_plan(&s, &[], &distractor_set(&[]), 7, &CorruptOptions::default(), &m);
        assert_eq!(plan.k, 0);
        assert!(plan.swap_pairs.is_empty());
    }

    #[test]
    fn plans_are_deterministic() {
        let (cfg, dft) = fixture();
        let m = Matcher::new(&cfg, &dft);
        let s = sentence();
        let rs: Vec<_> = s.entities.iter().map(|e| resolved("e/r1", e, &s.tokens)).collect();
        let d = distractor_set(&[("fever", EntityType::Diagnosis), ("heparin", EntityType::Medication)]);
        let opts = CorruptOptions { shuffle: true, ..CorruptOptions::default() };
        let a = sample_plan(&s, &rs, &d, 42, &opts, &m);
        let b = sample_plan(&s, &rs, &d, 42, &opts, &m);
        assert_eq!(a, b);
        assert_eq!(apply_plan(&s, "e/r1", &a), apply_plan(&s, "e/r1", &b));
    }

    #[test]
    fn replacements_prefer_same_type_and_clamp() {
        let (cfg, dft) = fixture();
        let m = Matcher::new(&cfg, &dft);
        let s = sentence();
        let rs: Vec<_> = s.entities.iter().map(|e| resolved("e/r1", e, &s.tokens)).collect();
        let d = distractor_set(&[("fever", EntityType::Diagnosis), ("heparin", EntityType::Medication)]);
        let opts = CorruptOptions { deletion: false, ..CorruptOptions::default() };
        for seed in 0..200 {
            let plan = sample_plan(&s, &rs, &d, seed, &opts, &m);
            for p in &plan.swap_pairs {
                let removed = s.entities.iter().find(|e| e.mention_id == p.removed).unwrap();
                assert_eq!(removed.etype, p.replacement.etype);
            }
        }
        let one = distractor_set(&[("fever", EntityType::Diagnosis)]);
        let clamped = (0..200)
            .map(|seed| sample_plan(&s, &rs, &one, seed, &opts, &m))
            .find(|p| p.clamped)
            .expect("k = 2 occurs with one distractor");
        assert_eq!(clamped.k, 1);
    }

    #[test]
    fn m1_excludes_synonyms_of_removed_from_pool() {
        let (cfg, dft) = fixture();
        let m = Matcher::new(&cfg, &dft);
        let s = sentence();
        let rs: Vec<_> = s.entities.iter().map(|e| resolved("e/r1", e, &s.tokens)).collect();
        // "cough" in the distractor set is a synonym of the anchor's cough
        let d = distractor_set(&[("cough", EntityType::Diagnosis), ("fever", EntityType::Diagnosis)]);
        let opts = CorruptOptions { deletion: false, ..CorruptOptions::default() };
        for seed in 0..100 {
            let plan = sample_plan(&s, &rs, &d, seed, &opts, &m);
            if plan.swap_pairs.iter().any(|p| p.removed == "m0") {
                assert!(plan.swap_pairs.iter().all(|p| p.replacement.text != "cough"));
            }
        }
    }

    #[test]
    fn identity_plan_is_identity() {
        let s = sentence();
        let out = apply_plan(&s, "e/r1", &CorruptionPlan::identity(3));
        assert_eq!(out.sentence, s);
        assert_eq!(out.origins.len(), s.tokens.len());
    }

    #[test]
    fn single_swap_updates_tokens_and_annotations() {
        let tokens = toks(&["cough", "improved"]);
        let s = Sentence {
            sent_id: "r".into(),
            text: "cough improved".into(),
            entities: vec![mention("m0", EntityType::Treatment, "cough", 0, 1)],
            tokens,
        };
        let rep = SwapEntity {
            etype: EntityType::Treatment,
            text: "bipap".into(),
            tokens: toks(&["bipap"]),
            codes: vec![],
            key: "e/s9".into(),
            span: TokenSpan::new(4, 5),
        };
        let plan = CorruptionPlan {
            k: 1,
            swap_pairs: vec![SwapPair { removed: "m0".into(), replacement: rep }],
            ..CorruptionPlan::identity(0)
        };
        let out = apply_plan(&s, "e/r", &plan);
        assert_eq!(out.sentence.tokens, toks(&["bipap", "improved"]));
        assert_eq!(out.sentence.entities.len(), 1);
        assert_eq!(out.sentence.entities[0].text, "bipap");
        assert_eq!(out.sentence.entities[0].token_span, TokenSpan::new(0, 1));
        assert_eq!(out.origins[0], TokenOrigin { key: "e/s9".into(), row: 4 });
        assert_eq!(out.origins[1], TokenOrigin { key: "e/r".into(), row: 1 });
    }

    #[test]
    fn multi_token_swap_reindexes_later_spans() {
        let s = sentence();
        let rep = SwapEntity {
            etype: EntityType::Diagnosis,
            text: "chest pain".into(),
            tokens: toks(&["chest", "pain"]),
            codes: vec!["R07.9".into()],
            key: "x/y".into(),
            span: TokenSpan::new(0, 2),
        };
        let plan = CorruptionPlan {
            k: 1,
            swap_pairs: vec![SwapPair { removed: "m0".into(), replacement: rep }],
            ..CorruptionPlan::identity(0)
        };
        let out = apply_plan(&s, "e/r1", &plan);
        assert_eq!(out.sentence.tokens[..2], toks(&["chest", "pain"])[..]);
        let lasix = &out.sentence.entities[1];
        assert_eq!(lasix.token_span, TokenSpan::new(4, 5));
        assert_eq!(out.sentence.tokens[4], "lasix");
    }

    #[test]
    fn deleting_non_entity_suffix_keeps_entities() {
        let s = sentence();
        let plan = CorruptionPlan {
            deleted_span: Some(TokenSpan::new(4, 7)),
            ..CorruptionPlan::identity(0)
        };
        let out = apply_plan(&s, "e/r1", &plan);
        assert_eq!(out.sentence.tokens, toks(&["cough", "treated", "with", "lasix"]));
        assert_eq!(out.sentence.entities.len(), 2);
        assert_eq!(out.sentence.entities[1].token_span, TokenSpan::new(3, 4));
    }

    #[test]
    fn sampled_deletions_avoid_entities() {
        let s = sentence();
        let mut rng = rng_from_seed(1);
        for _ in 0..500 {
            let d = sample_deletion(&s, &mut rng).unwrap();
            assert!(!d.is_empty());
            assert!(s.entities.iter().all(|m| !m.token_span.overlaps(&d)));
        }
    }

    #[test]
    fn deletion_never_empties_a_sentence() {
        let plain = Sentence::from_text("r", "was noted");
        let single = Sentence::from_text("r", "stable");
        let mut rng = rng_from_seed(2);
        for _ in 0..500 {
            let d = sample_deletion(&plain, &mut rng).unwrap();
            assert!(d.len() < plain.tokens.len());
            assert!(sample_deletion(&single, &mut rng).is_none());
        }
    }

    #[test]
    fn shuffle_keeps_entity_positions() {
        let s = sentence();
        let plan = CorruptionPlan {
            shuffle: true,
            seed: 11,
            ..CorruptionPlan::identity(11)
        };
        let out = apply_plan(&s, "e/r1", &plan);
        assert_eq!(out.sentence.tokens[0], "cough");
        assert_eq!(out.sentence.tokens[3], "lasix");
        let mut a = out.sentence.tokens.clone();
        let mut b = s.tokens.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        for (t, o) in out.sentence.tokens.iter().zip(&out.origins) {
            assert_eq!(&s.tokens[o.row], t);
        }
    }

    fn freq_fixture(counts: &[(&str, usize)]) -> EntityFrequencyTable {
        let mut mentions = Vec::new();
        for (name, n) in counts {
            let tokens = toks(&[name]);
            for i in 0..*n {
                let m = mention(&format!("{name}{i}"), EntityType::Medication, name, 0, 1);
                mentions.push(resolved("c/s", &m, &tokens));
            }
        }
        EntityFrequencyTable::from_mentions(mentions.iter())
    }

    #[test]
    fn swap_random_degenerate_table() {
        let table = freq_fixture(&[("heparin", 2)]);
        let s = sentence();
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let (out, plan) = swap_random(&s, "e/r1", &table, &mut rng);
            for p in &plan.swap_pairs {
                assert_eq!(p.replacement.text, "heparin");
                assert_eq!(p.removed, "m1", "diagnosis has no same-type entry");
            }
            assert_eq!(out.sentence.tokens[0], "cough");
        }
        let mut empty = sentence();
        empty.entities.clear();
        assert_eq!(swap_random(&empty, "e/r1", &table, &mut rng).0.sentence, empty);
    }

    #[test]
    fn frequency_sampling_follows_counts() {
        let table = freq_fixture(&[("a", 3), ("b", 1)]);
        assert_eq!(table.count(EntityType::Medication, "a"), 3);
        let mut rng = rng_from_seed(99);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| table.sample(EntityType::Medication, &mut rng).unwrap().text == "a")
            .count();
        let frac = hits as f64 / n as f64;
        assert!((0.72..=0.78).contains(&frac), "{frac}");
        assert!(table.sample(EntityType::Test, &mut rng).is_none());
    }

    #[test]
    fn swap_related_cases() {
        let s = sentence();
        let mut rng = rng_from_seed(3);
        let (out, _, flagged) = swap_related(&s, "e/r1", &distractor_set(&[]), &mut rng);
        assert!(flagged);
        assert_eq!(out.sentence, s);

        let single = distractor_set(&[("fever", EntityType::Diagnosis)]);
        let d = distractor_set(&[
            ("fever", EntityType::Diagnosis),
            ("sepsis", EntityType::Diagnosis),
            ("heparin", EntityType::Medication),
        ]);
        let allowed: HashSet<String> = ["cough", "lasix", "fever", "sepsis", "heparin"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for _ in 0..1000 {
            let (out, plan, _) = swap_related(&s, "e/r1", &d, &mut rng);
            assert!(out.sentence.entities.iter().all(|e| allowed.contains(&e.text)));
            assert_eq!(plan.k, plan.swap_pairs.len());
            let (out, _, _) = swap_related(&s, "e/r1", &single, &mut rng);
            assert!(["cough", "fever"].contains(&out.sentence.tokens[0].as_str()));
        }
    }

    #[test]
    fn redress_records() {
        let (cfg, dft) = fixture();
        let m = Matcher::new(&cfg, &dft);
        let s = sentence();
        let rs: Vec<_> = s.entities.iter().map(|e| resolved("e/r1", e, &s.tokens)).collect();
        let d = distractor_set(&[
            ("fever", EntityType::Diagnosis),
            ("heparin", EntityType::Medication),
            ("cough", EntityType::Diagnosis),
        ]);
        let opts = CorruptOptions::default();

        let plan = CorruptionPlan::identity(0);
        let c = apply_plan(&s, "e/r1", &plan);
        let train = emit_redress(&s, &rs, &d, &plan, &c, RedressMode::Train, &opts, &m);
        assert_eq!(train.k_code, 0);
        assert_eq!(train.corrupted_text, s.text);
        assert_eq!(train.target_text.as_deref(), Some(s.text.as_str()));
        let line = serde_json::to_string(&train).unwrap();
        assert_eq!(serde_json::from_str::<RedressRecord>(&line).unwrap(), train);

        let plan = CorruptionPlan {
            k: 2,
            swap_pairs: vec![
                SwapPair { removed: "m0".into(), replacement: SwapEntity::from(&d.entities[0]) },
                SwapPair { removed: "m1".into(), replacement: SwapEntity::from(&d.entities[1]) },
            ],
            ..CorruptionPlan::identity(0)
        };
        let c = apply_plan(&s, "e/r1", &plan);
        let inf = emit_redress(&s, &rs, &d, &plan, &c, RedressMode::Inference, &opts, &m);
        assert_eq!(inf.k_code, 3);
        assert!(inf.target_text.is_none());
        let texts: Vec<&str> = inf.distractors.iter().map(|f| f.text.as_str()).collect();
        assert!(!texts.contains(&"cough") && !texts.contains(&"lasix"), "{texts:?}");
        assert!(!texts.contains(&"fever"), "replacements leave the field");
        assert!(!line.contains("target_text\":null"));

        let train = emit_redress(&s, &rs, &d, &plan, &c, RedressMode::Train, &opts, &m);
        let texts: Vec<&str> = train.distractors.iter().map(|f| f.text.as_str()).collect();
        assert_eq!(texts, vec!["cough", "cough", "lasix"]);
        assert_eq!(train.k_code, 2);
        assert!(train.seq2seq_input().starts_with("<k_2> <sep> cough ; cough ; lasix <sep> "));
    }

    #[test]
    fn most_unsupported_selection() {
        let ctx = Matrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        let same = ctx.clone();
        let ortho = Matrix::from_rows(2, &[[0.0f32, 1.0]]).unwrap();
        assert_eq!(select_most_unsupported(std::slice::from_ref(&same), &ctx).unwrap(), 0);
        assert_eq!(select_most_unsupported(&[same.clone(), ortho.clone()], &ctx).unwrap(), 1);
        assert_eq!(select_most_unsupported(&[ortho.clone(), ortho], &ctx).unwrap(), 0);
        assert!(select_most_unsupported(&[], &ctx).is_err());
    }

    #[test]
    fn diversity_cases() {
        assert_eq!(diversity(&toks(&["a", "b"]), &toks(&["a", "b"])).unwrap(), 0.0);
        assert_eq!(diversity(&toks(&["a", "b"]), &toks(&["c"])).unwrap(), 1.0);
        assert_eq!(diversity(&toks(&["x", "y"]), &toks(&["y", "z"])).unwrap(), 0.5);
        assert!(diversity(&[], &toks(&["a"])).is_err());
    }
}
