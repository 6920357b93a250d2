//! Deterministic synthetic sentiment corpus for demos and end-to-end tests.
//! Each sentence mixes a few label-bearing keywords into neutral filler, so
//! a trained model has an unambiguous set of "important" tokens to find.

use rand::Rng;

use crate::data::RawExample;
use crate::rng::stream_rng;

const POSITIVE: &[&str] = &[
    "great", "wonderful", "excellent", "superb", "delightful", "charming", "brilliant",
    "masterful", "moving", "gripping",
];

const NEGATIVE: &[&str] = &[
    "terrible", "awful", "dreadful", "boring", "clumsy", "tedious", "shallow", "lifeless",
    "grating", "sloppy",
];

// Small filler pool so sentences repeat neutral tokens, like stopwords do
// in natural text.
const FILLER: &[&str] = &[
    "the", "a", "this", "movie", "film", "story", "plot", "scene", "was", "felt", "with", "and",
    "but", "really",
];

/// Generates `n` labeled sentences, balanced between the two classes.
/// The label is the majority keyword polarity; half the sentences also
/// carry one minority-polarity distractor, so the classifier has to weigh
/// both keyword sets rather than detect a single side.
pub fn generate(n: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = stream_rng(seed, "synthetic-corpus");
    (0..n)
        .map(|i| {
            let label = (i % 2) as u32;
            let (own, other) = if label == 1 {
                (POSITIVE, NEGATIVE)
            } else {
                (NEGATIVE, POSITIVE)
            };
            let n_own = rng.gen_range(2..=3);
            let n_other = rng.gen_range(0..=1);
            let len = rng.gen_range(8..=16usize);
            let mut words: Vec<&str> = (0..len)
                .map(|_| FILLER[rng.gen_range(0..FILLER.len())])
                .collect();
            let mut slots: Vec<usize> = (0..words.len()).collect();
            for _ in 0..(n_own + n_other) {
                let si = rng.gen_range(0..slots.len());
                slots.swap_remove(si);
            }
            let mut taken: Vec<usize> = (0..words.len())
                .filter(|p| !slots.contains(p))
                .collect();
            taken.sort_unstable();
            for (j, &pos) in taken.iter().enumerate() {
                let pool = if j < n_own { own } else { other };
                words[pos] = pool[rng.gen_range(0..pool.len())];
            }
            RawExample {
                label,
                text: words.join(" "),
            }
        })
        .collect()
}

pub fn is_keyword(token: &str) -> bool {
    POSITIVE.contains(&token) || NEGATIVE.contains(&token)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = generate(100, 7);
        let b = generate(100, 7);
        assert_eq!(a.len(), 100);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.label, y.label);
        }
        assert_eq!(a.iter().filter(|e| e.label == 1).count(), 50);
    }

    #[test]
    fn majority_polarity_matches_label() {
        for ex in generate(200, 3) {
            let (own, other) = if ex.label == 1 {
                (POSITIVE, NEGATIVE)
            } else {
                (NEGATIVE, POSITIVE)
            };
            let words: Vec<&str> = ex.text.split(' ').collect();
            let n_own = words.iter().filter(|w| own.contains(w)).count();
            let n_other = words.iter().filter(|w| other.contains(w)).count();
            assert!(n_own >= 2, "{}", ex.text);
            assert!(n_own > n_other, "{}", ex.text);
            assert!(n_other <= 1, "{}", ex.text);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(20, 1);
        let b = generate(20, 2);
        assert!(a.iter().zip(&b).any(|(x, y)| x.text != y.text));
    }
}
