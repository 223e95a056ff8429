//! Tiny synthetic word-language generator.
//!
//! Produces clean sentences over a small lexicon with a Zipf-ish word
//! distribution, giving the BPE trainer realistic merge statistics and the
//! models something learnable. Used by the test suite and handy for demo
//! pipelines when no clean corpus is at hand.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALPHABET: &[u8] = b"abcdefghijklmnopqrst";

/// Deterministic lexicon of `size` words with lengths 2..=7.
pub fn lexicon(size: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = std::collections::BTreeSet::new();
    while words.len() < size {
        let len = rng.random_range(2..=7);
        let word: String = (0..len)
            .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
            .collect();
        words.insert(word);
    }
    words.into_iter().collect()
}

/// `n` sentences of 3..=8 words drawn Zipf-ish from a 60-word lexicon.
pub fn sentences(n: usize, seed: u64) -> Vec<String> {
    sentences_sized(n, seed, 60, 3, 8)
}

/// Generator with explicit lexicon size and words-per-sentence range;
/// smaller settings give models an easier corpus to crack.
pub fn sentences_sized(
    n: usize,
    seed: u64,
    lexicon_size: usize,
    min_words: usize,
    max_words: usize,
) -> Vec<String> {
    let words = lexicon(lexicon_size, seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let count = rng.random_range(min_words..=max_words);
            let picked: Vec<&str> = (0..count)
                .map(|_| {
                    // Squaring a uniform draw skews toward low ranks.
                    let u: f64 = rng.random();
                    let idx = ((u * u) * words.len() as f64) as usize;
                    words[idx.min(words.len() - 1)].as_str()
                })
                .collect();
            picked.join(" ")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nonempty() {
        let a = sentences(20, 9);
        let b = sentences(20, 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|s| !s.trim().is_empty()));
        let c = sentences(20, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn lexicon_is_stable() {
        assert_eq!(lexicon(10, 1), lexicon(10, 1));
        assert_eq!(lexicon(10, 1).len(), 10);
    }
}
