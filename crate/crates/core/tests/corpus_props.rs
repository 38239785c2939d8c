mod common;

use proptest::prelude::*;
use refrev::corpus::{parse_corpus, tag_entities, write_corpus, Lexicon};

use common::{random_example, LEXICON};

fn lexicon() -> Lexicon {
    let mut lex = Lexicon::new();
    for (text, etype, code) in LEXICON {
        let codes = if code.is_empty() { vec![] } else { vec![code.to_string()] };
        lex.insert(text, *etype, codes).unwrap();
    }
    lex
}

proptest! {
    #[test]
    fn corpus_round_trips(seeds in prop::collection::btree_set(any::<u64>(), 1..6)) {
        let corpus: Vec<_> = seeds.into_iter().map(random_example).collect();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        let back = parse_corpus(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &corpus);
        let mut again = Vec::new();
        write_corpus(&mut again, &back).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn tagging_is_deterministic_and_idempotent(seed in any::<u64>()) {
        let lex = lexicon();
        let ex = random_example(seed);
        for s in ex.source_sentences().chain(&ex.reference) {
            let mut bare = s.clone();
            bare.entities.clear();
            let tagged = tag_entities(&bare, &lex);
            prop_assert_eq!(&tag_entities(&bare, &lex), &tagged);
            prop_assert_eq!(&tag_entities(&tagged, &lex), &tagged);
            let mut stripped = tagged.clone();
            stripped.entities.clear();
            prop_assert_eq!(&tag_entities(&stripped, &lex), &tagged);
            let spans: Vec<_> = tagged.entities.iter().map(|m| m.token_span).collect();
            let planted: Vec<_> = s.entities.iter().map(|m| m.token_span).collect();
            prop_assert_eq!(spans, planted);
        }
    }
}
