//! Deterministic pseudo-English text for desk-scale experiments.
//!
//! Words are built from syllables and follow a sparse bigram chain with
//! Zipf-like preferences, so the text has learnable local structure. An
//! optional filler byte is injected after words; it is always followed by a
//! space, which makes the position right after it trivially predictable.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FILLER_BYTE: u8 = b'|';

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ner", "ta", "su", "ri", "ven", "do", "pa", "el", "an", "tor", "is", "ba", "qu", "ex", "ul",
    "sen", "mar", "fi", "go", "he", "ja", "wo", "ny", "zu", "ch", "or", "et",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub bytes: usize,
    pub words: usize,
    /// Successors considered for each word in the bigram chain.
    pub branching: usize,
    /// Probability of a filler token after each word.
    pub filler_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 17, bytes: 1 << 20, words: 400, branching: 12, filler_rate: 0.25 }
    }
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = match rng.random_range(0..10) {
        0..=3 => 1,
        4..=7 => 2,
        _ => 3,
    };
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

pub fn generate(cfg: &SynthConfig) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_words = cfg.words.max(2);
    let mut lexicon: Vec<String> = Vec::with_capacity(n_words);
    while lexicon.len() < n_words {
        let w = word(&mut rng);
        if !lexicon.contains(&w) {
            lexicon.push(w);
        }
    }
    let zipf: Vec<f64> = (0..n_words).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let start_dist = WeightedIndex::new(&zipf).expect("positive weights");
    let branching = cfg.branching.clamp(1, n_words);
    let succ_weights: Vec<f64> = (0..branching).map(|i| 1.0 / (i as f64 + 1.0).powf(1.2)).collect();
    let succ_dist = WeightedIndex::new(&succ_weights).expect("positive weights");
    let successors: Vec<Vec<usize>> = (0..n_words)
        .map(|_| {
            let mut all: Vec<usize> = (0..n_words).collect();
            all.shuffle(&mut rng);
            all.truncate(branching);
            all
        })
        .collect();

    let mut out = Vec::with_capacity(cfg.bytes + 64);
    let mut sentences_in_paragraph = 0;
    while out.len() < cfg.bytes {
        let len = rng.random_range(4..13);
        let mut w = start_dist.sample(&mut rng);
        for i in 0..len {
            let text = &lexicon[w];
            if i == 0 {
                let mut chars = text.chars();
                if let Some(c) = chars.next() {
                    out.extend(c.to_ascii_uppercase().to_string().bytes());
                    out.extend(chars.as_str().bytes());
                }
            } else {
                out.extend(text.bytes());
            }
            if i + 1 < len && rng.random_bool(0.08) {
                out.push(b',');
            }
            if i + 1 < len {
                out.push(b' ');
                if rng.random_bool(cfg.filler_rate) {
                    out.push(FILLER_BYTE);
                    out.push(b' ');
                }
            }
            w = successors[w][succ_dist.sample(&mut rng)];
        }
        out.push(b'.');
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= 6 && rng.random_bool(0.3) {
            out.push(b'\n');
            sentences_in_paragraph = 0;
        } else {
            out.push(b' ');
        }
    }
    out.truncate(cfg.bytes);
    out
}
