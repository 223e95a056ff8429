//! Property tests for the edit-distance machinery, checked against an
//! oracle that searches edit scripts directly instead of running the DP.

use ocrmend::eval::{cer, corpus_cer, levenshtein};
use proptest::prelude::*;

/// Iterative-deepening search for the shortest edit script turning
/// `reference` into `hyp`. Exponential, usable only for short strings, and
/// entirely independent of the DP implementation.
fn script_search_min_edits(hyp: &str, reference: &str) -> usize {
    fn reachable(r: &[char], h: &[char], budget: usize) -> bool {
        if !r.is_empty() && !h.is_empty() && r[0] == h[0] {
            return reachable(&r[1..], &h[1..], budget);
        }
        if r.is_empty() && h.is_empty() {
            return true;
        }
        if budget == 0 {
            return false;
        }
        // substitution
        if !r.is_empty() && !h.is_empty() && reachable(&r[1..], &h[1..], budget - 1) {
            return true;
        }
        // deletion of a reference character
        if !r.is_empty() && reachable(&r[1..], h, budget - 1) {
            return true;
        }
        // insertion of a hypothesis character
        !h.is_empty() && reachable(r, &h[1..], budget - 1)
    }
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hyp.chars().collect();
    (0..=r.len().max(h.len()))
        .find(|&k| reachable(&r, &h, k))
        .expect("edit script of length max(n,m) always exists")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn dp_matches_script_search(
        hyp in "[abcd]{0,10}",
        reference in "[abcd]{0,10}",
    ) {
        let dp = levenshtein(&hyp, &reference).total();
        let oracle = script_search_min_edits(&hyp, &reference);
        prop_assert_eq!(dp, oracle, "{} vs {}", hyp, reference);
    }

    #[test]
    fn triangle_inequality(
        a in "[abc]{0,8}",
        b in "[abc]{0,8}",
        c in "[abc]{0,8}",
    ) {
        let ab = levenshtein(&a, &b).total();
        let bc = levenshtein(&b, &c).total();
        let ac = levenshtein(&a, &c).total();
        prop_assert!(ac <= ab + bc);
    }

    #[test]
    fn symmetry_swaps_roles(
        a in "[ab ]{0,9}",
        b in "[ab ]{0,9}",
    ) {
        let fwd = levenshtein(&a, &b);
        let rev = levenshtein(&b, &a);
        prop_assert_eq!(fwd.total(), rev.total());
        prop_assert_eq!(fwd.deletions, rev.insertions);
        prop_assert_eq!(fwd.insertions, rev.deletions);
        prop_assert_eq!(fwd.substitutions, rev.substitutions);
    }

    #[test]
    fn edit_counts_bounded_by_lengths(
        hyp in "\\PC{0,12}",
        reference in "\\PC{1,12}",
    ) {
        let counts = levenshtein(&hyp, &reference);
        prop_assert_eq!(counts.n, reference.chars().count());
        prop_assert!(counts.substitutions + counts.deletions <= counts.n);
        prop_assert!(counts.insertions <= hyp.chars().count());
        let rate = cer(&hyp, &reference).unwrap();
        prop_assert!(rate >= 0.0);
    }
}

#[test]
fn corpus_cer_equals_weighted_combination() {
    let pairs = [("abc", "abd"), ("xyzw", "xyzw"), ("q", "qq")];
    let total_edits: usize = pairs.iter().map(|(h, r)| levenshtein(h, r).total()).sum();
    let total_n: usize = pairs.iter().map(|(_, r)| r.chars().count()).sum();
    let micro = corpus_cer(pairs.iter().map(|&(h, r)| (h, r))).unwrap();
    assert!((micro - total_edits as f64 / total_n as f64).abs() < 1e-15);
}
