//! Property tests tying corpus I/O, the noiser, and evaluation together.

use ocrmend::corpus::{load_pairs_from, split, write_pairs_to, Dataset, SentencePair};
use ocrmend::eval::corpus_cer;
use ocrmend::noiser::{corrupt_corpus, corrupt_indexed, char_inventory, NoiseConfig};
use ocrmend::synth;
use proptest::prelude::*;

fn score_strategy() -> impl Strategy<Value = f64> {
    // Scores as the noiser produces them: arbitrary in [0,1].
    (0u32..=1_000_000).prop_map(|k| k as f64 / 1e6)
}

fn pair_strategy() -> impl Strategy<Value = SentencePair> {
    "[a-z ]{1,12}"
        .prop_filter("needs visible text", |s| !s.trim().is_empty())
        .prop_flat_map(|noisy| {
            let n = noisy.chars().count();
            (
                Just(noisy),
                proptest::collection::vec(score_strategy(), n),
                "[a-z]{1,8}",
            )
        })
        .prop_map(|(noisy, scores, clean)| SentencePair {
            noisy,
            scores,
            clean,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn write_load_roundtrip_to_six_decimals(
        pairs in proptest::collection::vec(pair_strategy(), 0..20)
    ) {
        let ds = Dataset::new(pairs);
        let mut buf = Vec::new();
        write_pairs_to(&mut buf, &ds).unwrap();
        let back = load_pairs_from(buf.as_slice(), true).unwrap();
        prop_assert_eq!(back.dataset.len(), ds.len());
        prop_assert!(back.dropped.is_empty());
        for (a, b) in ds.pairs.iter().zip(&back.dataset.pairs) {
            prop_assert_eq!(&a.noisy, &b.noisy);
            prop_assert_eq!(&a.clean, &b.clean);
            prop_assert_eq!(a.scores.len(), b.scores.len());
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x - y).abs() < 5e-7, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn loaded_pairs_always_satisfy_invariants(
        records in proptest::collection::vec("[\\x20-\\x7e]{0,60}", 0..12)
    ) {
        // Arbitrary printable lines: whatever survives a lenient load must
        // satisfy every pair invariant.
        let blob = records.join("\n");
        if let Ok(out) = load_pairs_from(blob.as_bytes(), false) {
            for (i, pair) in out.dataset.pairs.iter().enumerate() {
                prop_assert!(pair.validate(i).is_ok());
            }
        }
    }

    #[test]
    fn split_partitions_for_any_seed(seed in any::<u64>(), n in 3usize..40) {
        let ds = Dataset::new(
            (0..n)
                .map(|i| SentencePair {
                    noisy: format!("n{i}"),
                    scores: vec![0.5, 0.5],
                    clean: format!("c{i}"),
                })
                .collect(),
        );
        let (a, b, c) = split(&ds, (0.7, 0.2, 0.1), seed).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let mut all: Vec<&str> = a
            .pairs
            .iter()
            .chain(&b.pairs)
            .chain(&c.pairs)
            .map(|p| p.noisy.as_str())
            .collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n, "splits overlap or drop pairs");
    }

    #[test]
    fn corrupt_scores_align_for_any_seed(seed in any::<u64>()) {
        let cfg = NoiseConfig {
            seed,
            replacement_pool: "abcdefg hij".chars().collect(),
            ..NoiseConfig::default()
        };
        let (pair, _) = corrupt_indexed("the quick brown fox jumps", &cfg, 0).unwrap();
        prop_assert_eq!(pair.scores.len(), pair.noisy.chars().count());
        prop_assert!(pair.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        prop_assert_eq!(pair.clean.as_str(), "the quick brown fox jumps");
    }
}

#[test]
fn default_noise_lands_near_quarter_error_rate() {
    let clean = synth::sentences(2000, 17);
    let cfg = NoiseConfig {
        seed: 17,
        replacement_pool: char_inventory(&clean),
        ..NoiseConfig::default()
    };
    let (ds, _) = corrupt_corpus(&clean, &cfg).unwrap();
    let rate = corpus_cer(
        ds.pairs
            .iter()
            .map(|p| (p.noisy.as_str(), p.clean.as_str())),
    )
    .unwrap();
    assert!(
        (0.23..=0.27).contains(&rate),
        "initial error rate {rate} outside [0.23, 0.27]"
    );
}

#[test]
fn noised_corpus_roundtrips_through_jsonl() {
    let clean = synth::sentences(50, 3);
    let cfg = NoiseConfig {
        seed: 3,
        replacement_pool: char_inventory(&clean),
        ..NoiseConfig::default()
    };
    let (ds, _) = corrupt_corpus(&clean, &cfg).unwrap();
    let mut buf = Vec::new();
    write_pairs_to(&mut buf, &ds).unwrap();
    let back = load_pairs_from(buf.as_slice(), true).unwrap();
    assert!(back.dropped.is_empty());
    assert_eq!(back.dataset.len(), 50);
}
