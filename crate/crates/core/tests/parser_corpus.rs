use std::collections::BTreeMap;

use chart_refinery::critique::{parse_recommendations, SkipReason};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    name: String,
    completion: String,
    expected: Vec<String>,
    skipped: BTreeMap<SkipReason, usize>,
}

fn fixtures() -> Vec<Fixture> {
    serde_json::from_str(include_str!("fixtures/malformed_completions.json")).unwrap()
}

#[test]
fn hand_labeled_corpus_agrees_fully() {
    let corpus = fixtures();
    assert_eq!(corpus.len(), 20);
    let mut disagreements = Vec::new();
    for f in &corpus {
        let report = parse_recommendations(&f.completion);
        let mut counts: BTreeMap<SkipReason, usize> = BTreeMap::new();
        for s in &report.skipped_lines {
            *counts.entry(s.reason).or_default() += 1;
        }
        if report.texts() != f.expected || counts != f.skipped {
            disagreements.push(format!("{}: got {:?} / {:?}", f.name, report.texts(), counts));
        }
        assert_eq!(report.recommendations.len() + report.skipped_lines.len(), report.total_lines, "{}", f.name);
    }
    assert!(disagreements.is_empty(), "{disagreements:#?}");
}

const ALPHABET: &[char] = &[
    '#', '#', '#', ' ', '\t', '\n', '\n', '\r', '-', '1', '2', '.', ')', 'a', 'b', 'Z', '\u{2028}', '\u{85}',
    '\u{0B}', 'é', '图', '\u{0}', '`', '*',
];

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..80);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.1) {
                char::from_u32(rng.random_range(0..0x11000)).unwrap_or('?')
            } else {
                ALPHABET[rng.random_range(0..ALPHABET.len())]
            }
        })
        .collect()
}

/// Ten thousand random strings: the parser never panics and its report is
/// always internally consistent.
#[test]
fn fuzz_ten_thousand_strings() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let mut failures = 0;
    for _ in 0..10_000 {
        let s = random_string(&mut rng);
        let result = std::panic::catch_unwind(|| parse_recommendations(&s));
        let ok = match result {
            Ok(r) => {
                r.recommendations.len() + r.skipped_lines.len() == r.total_lines
                    && r.recommendations.iter().all(|l| {
                        !l.text.is_empty() && l.text == l.text.trim() && !l.text.contains(['\n', '\r'])
                    })
                    && parse_recommendations(&s) == r
            }
            Err(_) => false,
        };
        if !ok {
            failures += 1;
        }
    }
    assert_eq!(failures, 0);
}
