//! Templated review corpus bundled for offline runs.
//!
//! Each review sticks to one topic, so its context and continuation share
//! nouns. A handful of stock sentences recur across reviews, which is what a
//! plain likelihood-maximising beam search tends to fall back on.

use rand::Rng;

use crate::corpus::lexicon;
use crate::rng;

struct Topic {
    nouns: &'static [&'static str],
    place: &'static str,
}

const TOPICS: [Topic; 6] = [
    Topic {
        place: "hotel",
        nouns: &["room", "bed", "lobby", "pool", "shower", "balcony", "view", "breakfast"],
    },
    Topic {
        place: "restaurant",
        nouns: &["soup", "pasta", "dessert", "waiter", "menu", "salad", "wine", "bread"],
    },
    Topic {
        place: "museum",
        nouns: &["gallery", "painting", "statue", "guide", "exhibit", "garden", "tour", "map"],
    },
    Topic {
        place: "cafe",
        nouns: &["coffee", "cake", "tea", "barista", "sandwich", "terrace", "music", "cookie"],
    },
    Topic {
        place: "market",
        nouns: &["fruit", "cheese", "stall", "vendor", "fish", "flowers", "spices", "honey"],
    },
    Topic {
        place: "park",
        nouns: &["lake", "trail", "bench", "bridge", "forest", "playground", "fountain", "meadow"],
    },
];

const QUALITIES: [&str; 12] = [
    "clean", "lovely", "noisy", "warm", "fresh", "bright", "cheap", "crowded", "pleasant", "cold", "spacious", "tiny",
];

const STOCK: [&str; 4] = [
    "the staff was very friendly .",
    "we had a great time .",
    "i would recommend it to everyone .",
    "it was a nice place .",
];

fn pick<'a, R: Rng>(r: &mut R, items: &[&'a str]) -> &'a str {
    items[r.random_range(0..items.len())]
}

fn topic_sentence<R: Rng>(r: &mut R, topic: &Topic) -> String {
    let n1 = pick(r, topic.nouns);
    let n2 = loop {
        let n = pick(r, topic.nouns);
        if n != n1 {
            break n;
        }
    };
    let q = pick(r, &QUALITIES);
    match r.random_range(0..6) {
        0 => format!("the {n1} was {q} ."),
        1 => format!("we loved the {n1} and the {n2} ."),
        2 => format!("the {n1} near the {n2} looked {q} !"),
        3 => format!("our {n1} felt {q} but the {n2} was better ."),
        4 => format!("was the {n1} at this {} always so {q} ?", topic.place),
        _ => format!("i enjoyed the {q} {n1} every morning ."),
    }
}

fn narrative_sentence<R: Rng>(r: &mut R) -> String {
    let person = pick(r, &lexicon::PEOPLE);
    let adj = pick(r, &lexicon::ADJECTIVES);
    let (verb, antonym) = lexicon::VERBS[r.random_range(0..lexicon::VERBS.len())];
    let object = pick(r, &lexicon::OBJECTS);
    match r.random_range(0..4) {
        0 => format!("the {person} {antonym} the {object} ."),
        1 => format!("the {person} never {verb} the {object} ."),
        _ => format!("the {adj} {person} {verb} the {object} ."),
    }
}

/// `documents` reviews, one per line; deterministic in `seed`.
pub fn generate_desk_corpus(documents: usize, seed: u64) -> String {
    let mut r = rng::seeded(seed);
    let mut out = String::new();
    for _ in 0..documents {
        let topic = &TOPICS[r.random_range(0..TOPICS.len())];
        // About one review in twelve is too short to yield an example.
        let n = if r.random_range(0..12) == 0 {
            r.random_range(5..10)
        } else {
            r.random_range(10..14)
        };
        let stock_at = r.random_range(0..n);
        let mut sentences = Vec::with_capacity(n);
        sentences.push(format!("we visited the {} last week .", topic.place));
        for i in 1..n {
            let s = if i == stock_at {
                pick(&mut r, &STOCK).to_string()
            } else if r.random_range(0..4) == 0 {
                narrative_sentence(&mut r)
            } else {
                topic_sentence(&mut r, topic)
            };
            sentences.push(s);
        }
        out.push_str(&sentences.join(" "));
        out.push('\n');
    }
    out
}

pub const DESK_DOCUMENTS: usize = 500;
pub const DESK_SEED: u64 = 20_180_701;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_examples, parse_documents, CorpusMode};

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(generate_desk_corpus(20, 3), generate_desk_corpus(20, 3));
        assert_ne!(generate_desk_corpus(20, 3), generate_desk_corpus(20, 4));
    }

    #[test]
    fn most_reviews_yield_examples() {
        let docs = parse_documents(&generate_desk_corpus(200, 1), CorpusMode::Review);
        let set = build_examples(&docs, CorpusMode::Review);
        assert_eq!(docs.len(), 200);
        assert!(set.examples.len() > 150 && set.skipped > 0, "{} {}", set.examples.len(), set.skipped);
    }
}
