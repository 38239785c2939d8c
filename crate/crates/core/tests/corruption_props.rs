mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use refrev::aligner::align_example;
use refrev::aligner::AlignConfig;
use refrev::contrast::{build_contrast_sets, Polarity, Provenance};
use refrev::corpus::{sentence_key, Example};
use refrev::corrupt::{apply_plan, derive_seed, rng_from_seed, swap_related, CorruptOptions, CorruptionPlan, DistractorSet};
use refrev::embed::{Embedder, HashedEmbedder};
use refrev::gate::{classify_example, GateConfig};
use refrev::matcher::{resolve_with_matrix, DocFrequencyTable, MatchConfig, Matcher};
use refrev::metrics::hallucination_rate;
use refrev::pipeline::{corrupt_reference_sentence, corruptions_by_sentence, ReferenceIndex};
use refrev::prepared::PreparedExample;

use common::{random_example, sentence, DIM};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identity_plan_is_identity(seed in any::<u64>()) {
        let ex = random_example(seed);
        for r in &ex.reference {
            let out = apply_plan(r, "k", &CorruptionPlan::identity(seed));
            prop_assert_eq!(&out.sentence, r);
            prop_assert_eq!(out.origins.len(), r.tokens.len());
        }
    }

    #[test]
    fn corruption_is_reproducible(seeds in prop::collection::btree_set(any::<u64>(), 2..4), global in any::<u64>()) {
        let corpus: Vec<Example> = seeds.into_iter().map(random_example).collect();
        let embedder = HashedEmbedder::new(DIM).unwrap();
        let config = MatchConfig::default();
        let dft = DocFrequencyTable::from_corpus(&corpus);
        let matcher = Matcher::new(&config, &dft);
        let preps: Vec<_> = corpus.iter().map(|e| PreparedExample::new(e, &embedder, &config).unwrap()).collect();
        let index = ReferenceIndex::build(&preps, DIM).unwrap();
        let options = CorruptOptions::default();
        for prep in &preps {
            for i in 0..prep.example.reference.len() {
                let a = corrupt_reference_sentence(prep, i, &index, &matcher, &options, global, 3).unwrap();
                let b = corrupt_reference_sentence(prep, i, &index, &matcher, &options, global, 3).unwrap();
                prop_assert_eq!(a.records, b.records);
                prop_assert_eq!(a.train, b.train);
                prop_assert_eq!(a.inference, b.inference);
            }
        }
    }

    #[test]
    fn related_swaps_never_lower_hallucination(seed in any::<u64>()) {
        // distractors are drawn from entities the source never mentions
        let ex = random_example(seed);
        let embedder = HashedEmbedder::new(DIM).unwrap();
        let config = MatchConfig::default();
        let foreign = sentence("d", &[("pancreatitis", Some(8)), ("vancomycin", Some(9))]);
        let corpus = [ex.clone()];
        let dft = DocFrequencyTable::from_corpus(&corpus);
        let matcher = Matcher::new(&config, &dft);
        let prep = PreparedExample::new(&ex, &embedder, &config).unwrap();
        let dm = resolve_with_matrix("x/d", &foreign, &embedder.embed("x/d", &foreign.tokens).unwrap(), &config).unwrap();
        let distractors = DistractorSet { anchor_key: "x/d".into(), entities: dm };
        let mut rng = rng_from_seed(seed);
        for (i, r) in ex.reference.iter().enumerate() {
            let key = sentence_key(&ex.example_id, &r.sent_id);
            let (out, _, _) = swap_related(r, &key, &distractors, &mut rng);
            let m = embedder.embed("c", &out.sentence.tokens).unwrap();
            let swapped = resolve_with_matrix("c", &out.sentence, &m, &config).unwrap();
            let before = hallucination_rate(&prep.reference_mentions[i], &prep.source_mentions, &matcher);
            let after = hallucination_rate(&swapped, &prep.source_mentions, &matcher);
            prop_assert!(after >= before, "{} -> {}", before, after);
        }
    }

    #[test]
    fn contrast_polarity_and_targets(seed in any::<u64>()) {
        let ex = random_example(seed);
        let corpus = [ex.clone()];
        let embedder = HashedEmbedder::new(DIM).unwrap();
        let config = MatchConfig::default();
        let dft = DocFrequencyTable::from_corpus(&corpus);
        let matcher = Matcher::new(&config, &dft);
        let prep = PreparedExample::new(&ex, &embedder, &config).unwrap();
        let alignments = align_example(&prep, &AlignConfig::default(), &matcher).unwrap();
        let labels = classify_example(&prep, &alignments, &matcher, &GateConfig::default()).unwrap();
        let index = ReferenceIndex::build(std::slice::from_ref(&prep), DIM).unwrap();
        let mut records = Vec::new();
        for i in 0..ex.reference.len() {
            records.extend(corrupt_reference_sentence(&prep, i, &index, &matcher, &CorruptOptions::default(), 0, 5).unwrap().records);
        }
        let corruptions: HashMap<_, _> = corruptions_by_sentence(&records);
        let mut rng = rng_from_seed(derive_seed(0, &[&ex.example_id, "contrast"], 0));
        let built = build_contrast_sets(&prep, &labels, &alignments, &corruptions, &embedder, &mut rng).unwrap();
        let supported = labels.iter().filter(|l| l.supported).count();
        prop_assert!(built.len() == 2 * supported || built.len() == 4 * supported);
        for r in &built {
            let original = &ex.reference_sentence(&r.ref_sent_id).unwrap().text;
            let target = r.target_text.as_ref().unwrap();
            match r.polarity.unwrap() {
                Polarity::Positive => prop_assert_eq!(target, original),
                Polarity::Negative if r.provenance == Provenance::SelfWithOtherContext => {
                    prop_assert_eq!(target, original);
                }
                Polarity::Negative => {
                    let candidates = &corruptions[&r.ref_sent_id];
                    prop_assert!(candidates.iter().any(|c| &c.sentence.text == target));
                }
            }
        }
    }
}
