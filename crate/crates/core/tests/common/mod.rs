#![allow(dead_code)]

use rand::Rng;
use refrev::corpus::{EntityMention, EntityType, Example, Sentence, SourceNote, TokenSpan};
use refrev::corrupt::rng_from_seed;

pub const DIM: usize = 32;

pub const LEXICON: &[(&str, EntityType, &str)] = &[
    ("pneumonia", EntityType::Diagnosis, "J18.9"),
    ("sepsis", EntityType::Diagnosis, "A41.9"),
    ("anemia", EntityType::Diagnosis, "D64.9"),
    ("heparin", EntityType::Medication, "RX5224"),
    ("aspirin", EntityType::Medication, "RX1191"),
    ("metoprolol", EntityType::Medication, "RX6918"),
    ("intubation", EntityType::Procedure, ""),
    ("echocardiogram", EntityType::Test, ""),
    ("pancreatitis", EntityType::Diagnosis, "K85.9"),
    ("vancomycin", EntityType::Medication, "RX11124"),
];

pub const FILLER: &[&str] = &["patient", "was", "started", "on", "for", "with", "noted", "stable", "daily", "home"];

/// Tokens with `Some(lexicon index)` marking single-token entities.
pub fn sentence(sent_id: &str, parts: &[(&str, Option<usize>)]) -> Sentence {
    let mut entities = Vec::new();
    for (i, (_, e)) in parts.iter().enumerate() {
        if let Some(e) = e {
            let (text, etype, code) = LEXICON[*e];
            entities.push(EntityMention {
                mention_id: format!("{sent_id}_m{}", entities.len()),
                etype,
                text: text.to_string(),
                token_span: TokenSpan::new(i, i + 1),
                codes: if code.is_empty() { vec![] } else { vec![code.to_string()] },
            });
        }
    }
    let tokens: Vec<String> = parts.iter().map(|(t, _)| t.to_string()).collect();
    Sentence {
        sent_id: sent_id.to_string(),
        text: tokens.join(" "),
        tokens,
        entities,
    }
}

pub fn random_parts(rng: &mut impl Rng, entity_pool: std::ops::Range<usize>) -> Vec<(&'static str, Option<usize>)> {
    let mut parts: Vec<(&str, Option<usize>)> = (0..rng.random_range(2..=6))
        .map(|_| (FILLER[rng.random_range(0..FILLER.len())], None))
        .collect();
    for _ in 0..rng.random_range(0..=2) {
        let e = rng.random_range(entity_pool.clone());
        let at = rng.random_range(0..=parts.len());
        parts.insert(at, (LEXICON[e].0, Some(e)));
    }
    parts
}

/// Up to six source sentences over two notes; references are copies of
/// source sentences or free text over the whole lexicon.
pub fn random_example(seed: u64) -> Example {
    let mut rng = rng_from_seed(seed);
    let mut notes = Vec::new();
    let mut all_parts = Vec::new();
    for n in 0..rng.random_range(1..=2) {
        let sentences = (0..rng.random_range(1..=3))
            .map(|i| {
                let parts = random_parts(&mut rng, 0..8);
                let s = sentence(&format!("n{n}s{i}"), &parts);
                all_parts.push(parts);
                s
            })
            .collect();
        notes.push(SourceNote {
            note_id: format!("note{n}"),
            note_type: if n == 0 { "Admission" } else { "Nursing" }.to_string(),
            order_index: n as u64,
            sentences,
        });
    }
    let reference = (0..rng.random_range(1..=4))
        .map(|i| {
            let parts = if rng.random_bool(0.5) {
                all_parts[rng.random_range(0..all_parts.len())].clone()
            } else {
                random_parts(&mut rng, 0..LEXICON.len())
            };
            sentence(&format!("r{i}"), &parts)
        })
        .collect();
    Example {
        example_id: format!("ex{seed}"),
        source_notes: notes,
        reference,
    }
}
