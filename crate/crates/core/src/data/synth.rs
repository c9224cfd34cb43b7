//! Synthetic desk-scale corpus: templated restaurant/laptop sentences with
//! labels correct by construction.
//!
//! Explicit items pair an aspect with a sentiment adjective from the
//! lexicon; implicit items describe a polarity-bearing event and contain no
//! lexicon adjective at all, so implicitness detection has real signal.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedInstance, Polarity};

pub const ASPECTS: [&str; 24] = [
    "soup", "service", "pizza", "waiter", "coffee", "dessert", "menu", "salad", "bread", "wine",
    "pasta", "steak", "battery", "keyboard", "screen", "trackpad", "speaker", "charger", "fan",
    "warranty", "delivery", "laptop", "cable", "support",
];

/// Sentiment adjectives used by explicit templates, keyed by polarity.
pub const SENTIMENT_LEXICON: [(&str, Polarity); 18] = [
    ("delicious", Polarity::Positive),
    ("friendly", Polarity::Positive),
    ("excellent", Polarity::Positive),
    ("wonderful", Polarity::Positive),
    ("fantastic", Polarity::Positive),
    ("superb", Polarity::Positive),
    ("rude", Polarity::Negative),
    ("awful", Polarity::Negative),
    ("terrible", Polarity::Negative),
    ("overpriced", Polarity::Negative),
    ("bland", Polarity::Negative),
    ("horrible", Polarity::Negative),
    ("average", Polarity::Neutral),
    ("ordinary", Polarity::Neutral),
    ("standard", Polarity::Neutral),
    ("typical", Polarity::Neutral),
    ("plain", Polarity::Neutral),
    ("unremarkable", Polarity::Neutral),
];

/// One generation pattern. `{a}` is the aspect slot; explicit patterns also
/// carry an `{adj}` slot filled from the lexicon row of the same polarity.
#[derive(Debug, Clone, Copy)]
pub struct SynthTemplate {
    pub pattern: &'static str,
    pub polarity: Polarity,
    pub implicit: bool,
}

const EXPLICIT_PATTERNS: [&str; 3] = [
    "the {a} was {adj}",
    "our {a} seemed {adj} today",
    "honestly the {a} is {adj}",
];

const IMPLICIT_POSITIVE: [&str; 4] = [
    "we came back twice in one week for the {a}",
    "my friends keep asking where we found this {a}",
    "the {a} disappeared from my plate in minutes",
    "i already booked another visit just for the {a}",
];

const IMPLICIT_NEGATIVE: [&str; 4] = [
    "we waited forty minutes for the {a}",
    "the {a} never made it to our table",
    "we sent the {a} back twice",
    "the {a} stopped working after two days",
];

const IMPLICIT_NEUTRAL: [&str; 4] = [
    "the {a} was the same as on our last visit",
    "the {a} matched the photo in the menu",
    "the {a} came in the usual size",
    "the {a} was listed at the regular price",
];

/// Every template the generator can draw from, for label re-derivation.
pub fn template_table() -> Vec<SynthTemplate> {
    let mut out = Vec::new();
    for polarity in Polarity::ALL {
        for pattern in EXPLICIT_PATTERNS {
            out.push(SynthTemplate {
                pattern,
                polarity,
                implicit: false,
            });
        }
        let implicit = match polarity {
            Polarity::Positive => &IMPLICIT_POSITIVE,
            Polarity::Negative => &IMPLICIT_NEGATIVE,
            Polarity::Neutral => &IMPLICIT_NEUTRAL,
        };
        for pattern in implicit {
            out.push(SynthTemplate {
                pattern,
                polarity,
                implicit: true,
            });
        }
    }
    out
}

fn adjectives_for(polarity: Polarity) -> Vec<&'static str> {
    SENTIMENT_LEXICON
        .iter()
        .filter(|(_, p)| *p == polarity)
        .map(|(a, _)| *a)
        .collect()
}

/// Generates `size` instances balanced over the six
/// (polarity, implicitness) cells; any remainder goes to the leading cells.
/// Deterministic for a given seed. Rationales are left empty for a provider
/// to fill.
pub fn synth_corpus(size: usize, seed: u64) -> Vec<AnnotatedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<(Polarity, bool)> = Polarity::ALL
        .iter()
        .flat_map(|&p| [(p, false), (p, true)])
        .collect();
    let base = size / cells.len();
    let remainder = size % cells.len();
    let mut out = Vec::with_capacity(size);
    for (cell_idx, &(polarity, implicit)) in cells.iter().enumerate() {
        let count = base + usize::from(cell_idx < remainder);
        for _ in 0..count {
            let aspect = ASPECTS[rng.gen_range(0..ASPECTS.len())];
            let text = if implicit {
                let patterns: &[&str] = match polarity {
                    Polarity::Positive => &IMPLICIT_POSITIVE,
                    Polarity::Negative => &IMPLICIT_NEGATIVE,
                    Polarity::Neutral => &IMPLICIT_NEUTRAL,
                };
                patterns[rng.gen_range(0..patterns.len())].replace("{a}", aspect)
            } else {
                let adjs = adjectives_for(polarity);
                let adj = adjs[rng.gen_range(0..adjs.len())];
                EXPLICIT_PATTERNS[rng.gen_range(0..EXPLICIT_PATTERNS.len())]
                    .replace("{a}", aspect)
                    .replace("{adj}", adj)
            };
            out.push(AnnotatedInstance {
                text,
                aspect: aspect.to_string(),
                polarity,
                implicit,
                rationale: String::new(),
            });
        }
    }
    out
}
