//! Writes the bundled tiny corpus: documents drawn from a small topic grammar.
//!
//! Each document picks a topic, and every sentence in it draws nouns, verbs
//! and adjectives from that topic's lexicon plus a shared function-word pool,
//! so predicting a token profits from remembering earlier lines.
//!
//!     cargo run -p dynsparse-cli --example gen_corpus -- data/tiny-corpus

use std::fmt::Write as _;
use std::path::PathBuf;

use dynsparse::SeededRng as ChaCha8Rng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

const TOPICS: usize = 8;
const NOUNS: usize = 24;
const VERBS: usize = 12;
const ADJS: usize = 10;
const SEED: u64 = 20170811;

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjs: Vec<String>,
}

fn syllable_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr",
        "pl",
    ];
    const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS.choose(rng).unwrap(),
                NUCLEI.choose(rng).unwrap()
            )
        })
        .collect()
}

fn lexicons(rng: &mut ChaCha8Rng) -> Vec<Lexicon> {
    let mut seen = std::collections::BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng, syl: usize, suffix: &str| loop {
        let w = format!("{}{suffix}", syllable_word(rng, syl));
        if seen.insert(w.clone()) {
            return w;
        }
    };
    (0..TOPICS)
        .map(|_| Lexicon {
            nouns: (0..NOUNS).map(|_| fresh(rng, 2, "")).collect(),
            verbs: (0..VERBS).map(|_| fresh(rng, 2, "s")).collect(),
            adjs: (0..ADJS).map(|_| fresh(rng, 1, "ish")).collect(),
        })
        .collect()
}

fn noun_phrase(rng: &mut ChaCha8Rng, lex: &Lexicon, out: &mut Vec<String>) {
    out.push(["the", "a", "every", "no"].choose(rng).unwrap().to_string());
    if rng.random_bool(0.4) {
        out.push(lex.adjs.choose(rng).unwrap().clone());
    }
    out.push(lex.nouns.choose(rng).unwrap().clone());
    if rng.random_bool(0.15) {
        out.push("of".into());
        out.push("the".into());
        out.push(lex.nouns.choose(rng).unwrap().clone());
    }
}

fn sentence(rng: &mut ChaCha8Rng, lex: &Lexicon) -> Vec<String> {
    let mut s = Vec::new();
    noun_phrase(rng, lex, &mut s);
    s.push(lex.verbs.choose(rng).unwrap().clone());
    noun_phrase(rng, lex, &mut s);
    if rng.random_bool(0.3) {
        s.push(["and", "while", "because"].choose(rng).unwrap().to_string());
        noun_phrase(rng, lex, &mut s);
        s.push(lex.verbs.choose(rng).unwrap().clone());
        noun_phrase(rng, lex, &mut s);
    }
    s
}

fn split(rng: &mut ChaCha8Rng, lex: &[Lexicon], tokens: usize) -> String {
    let mut text = String::new();
    let mut count = 0;
    while count < tokens {
        let topic = &lex[rng.random_range(0..lex.len())];
        for _ in 0..rng.random_range(3..9) {
            let s = sentence(rng, topic);
            count += s.len() + 1;
            let _ = writeln!(text, "{}", s.join(" "));
        }
    }
    text
}

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "data/tiny-corpus".into()),
    );
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let lex = lexicons(&mut rng);
    for (name, tokens) in [
        ("train.txt", 80_000),
        ("valid.txt", 10_000),
        ("test.txt", 10_000),
    ] {
        std::fs::write(dir.join(name), split(&mut rng, &lex, tokens))?;
    }
    Ok(())
}
