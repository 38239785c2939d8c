use proptest::prelude::*;
use refrev::corpus::{EntityType, TokenSpan};
use refrev::matcher::{
    agg_overlap, code_overlap, embed_overlap, tfidf_overlap, DocFrequencyTable, MatchConfig, Matcher, ResolvedMention,
};

const WORDS: &[&str] = &["acute", "renal", "failure", "of", "the", "kidney", "injury", "heart"];

fn dft() -> DocFrequencyTable {
    let docs: Vec<Vec<String>> = vec![
        vec!["acute".into(), "renal".into(), "failure".into()],
        vec!["kidney".into(), "injury".into(), "acute".into()],
        vec!["heart".into(), "failure".into()],
    ];
    DocFrequencyTable::from_documents(docs.iter())
}

fn mention() -> impl Strategy<Value = ResolvedMention> {
    (
        0usize..EntityType::ALL.len(),
        prop::collection::btree_set(0u8..4, 0..3),
        prop::collection::vec(0usize..WORDS.len(), 1..4),
        prop::collection::vec(-1.0f32..1.0, 4),
        "[a-z]{3}",
    )
        .prop_map(|(t, codes, toks, v, id)| {
            let tokens: Vec<String> = toks.iter().map(|&i| WORDS[i].to_string()).collect();
            ResolvedMention {
                mention_id: id,
                sent_key: "e/s".into(),
                token_span: TokenSpan::new(0, tokens.len()),
                etype: EntityType::ALL[t],
                text: tokens.join(" "),
                codes: codes.iter().map(|c| format!("C{c}")).collect(),
                tokens,
                embed_vector: v.clone(),
                span_vector: v,
            }
        })
}

proptest! {
    #[test]
    fn overlaps_are_symmetric_and_bounded(x in mention(), y in mention()) {
        let d = dft();
        let c = code_overlap(&x.codes, &y.codes);
        prop_assert_eq!(c, code_overlap(&y.codes, &x.codes));
        prop_assert!((0.0..=0.5).contains(&c));
        let e = embed_overlap(&x, &y);
        prop_assert_eq!(e, embed_overlap(&y, &x));
        prop_assert!((0.0..=1.0).contains(&e));
        let t = tfidf_overlap(&x.tokens, &y.tokens, &d);
        prop_assert!((t - tfidf_overlap(&y.tokens, &x.tokens, &d)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&t));
        prop_assert!((0.0..=1.0).contains(&agg_overlap(c, e, t)));

        let config = MatchConfig::default();
        let m = Matcher::new(&config, &d);
        prop_assert_eq!(m.is_synonym(&x, &y).synonym, m.is_synonym(&y, &x).synonym);
    }

    #[test]
    fn every_mention_is_its_own_synonym(x in mention()) {
        let d = dft();
        let config = MatchConfig::default();
        prop_assert!(Matcher::new(&config, &d).is_synonym(&x, &x).synonym);
    }

    #[test]
    fn support_is_order_invariant(x in mention(), mut cands in prop::collection::vec(mention(), 0..8), rot in 0usize..8) {
        let d = dft();
        let config = MatchConfig::default();
        let m = Matcher::new(&config, &d);
        let before = m.support_mention(&x, &cands).map(|c| c.mention_id.clone());
        if !cands.is_empty() {
            let k = rot % cands.len();
            cands.rotate_left(k);
        }
        cands.reverse();
        let after = m.support_mention(&x, &cands).map(|c| c.mention_id.clone());
        prop_assert_eq!(before.is_some(), after.is_some());
        if let (Some(b), Some(a)) = (before, after) {
            let agg = |id: &str| {
                let c = cands.iter().find(|c| c.mention_id == id).unwrap();
                m.is_synonym(&x, c).agg
            };
            prop_assert_eq!(agg(&b), agg(&a));
        }
    }
}
