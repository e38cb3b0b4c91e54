//! Synthetic corpora with a planted decision token.
//!
//! Positives carry `planted` somewhere in their text and negatives never do,
//! so a detector for that single token is Bayes-optimal. Positives also get
//! one to three categories, each announced by its own cue token.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ParagraphRecord, NUM_CATEGORIES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub positive_frac: f64,
    pub filler_vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub planted: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            positive_frac: 0.10,
            filler_vocab: 200,
            min_words: 4,
            max_words: 10,
            planted: "zyx".into(),
            seed: 0,
        }
    }
}

const KEYWORDS: [&str; 5] = ["homeless", "poor-families", "refugee", "vulnerable", "women"];
const COUNTRIES: [&str; 5] = ["gb", "us", "ng", "in", "au"];

pub fn category_cue(c: usize) -> String {
    format!("cue{c}")
}

/// Exactly `round(n · positive_frac)` positives, placed at shuffled positions.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<ParagraphRecord>> {
    if spec.n == 0 || !(0.0..=1.0).contains(&spec.positive_frac) {
        return Err(Error::Config(format!(
            "synthetic corpus needs n ≥ 1 and a positive fraction in [0, 1], got {} and {}",
            spec.n, spec.positive_frac
        )));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words || spec.filler_vocab == 0 {
        return Err(Error::Config("synthetic word range or filler vocabulary is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_pos = (spec.n as f64 * spec.positive_frac).round() as usize;
    let mut labels: Vec<bool> = (0..spec.n).map(|i| i < n_pos).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);

    let filler: Vec<String> = (0..spec.filler_vocab).map(|i| format!("w{i}")).collect();
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &positive)| {
            let len = rng.random_range(spec.min_words..=spec.max_words);
            let mut words: Vec<String> = (0..len).map(|_| filler.choose(&mut rng).unwrap().clone()).collect();
            let mut cats = [0u8; NUM_CATEGORIES];
            if positive {
                words.insert(rng.random_range(0..=words.len()), spec.planted.clone());
                for _ in 0..rng.random_range(1..=3) {
                    let c = rng.random_range(0..NUM_CATEGORIES);
                    if cats[c] == 0 {
                        cats[c] = 1;
                        words.insert(rng.random_range(0..=words.len()), category_cue(c));
                    }
                }
            }
            let raw = if positive { rng.random_range(2..=4) } else { rng.random_range(0..=1) };
            ParagraphRecord {
                par_id: format!("s{i}"),
                art_id: format!("a{}", i / 4),
                keyword: KEYWORDS.choose(&mut rng).unwrap().to_string(),
                country: COUNTRIES.choose(&mut rng).unwrap().to_string(),
                text: words.join(" "),
                raw_label: Some(raw),
                categories: Some(cats),
            }
        })
        .collect())
}
