//! Small shared helpers.

/// Round `100 * score` half-up to an integer bucket in `0..=100`.
///
/// Scores arrive either straight from JSON or from arithmetic, so a value
/// meant as decimal `0.895` may sit one ulp below `89.5 / 100`. The tiny bias
/// keeps decimal half-way cases rounding up instead of flickering down.
pub(crate) fn score_centi_bucket(score: f64) -> usize {
    debug_assert!((0.0..=1.0).contains(&score));
    let bucket = (100.0 * score + 0.5 + 1e-9).floor() as usize;
    bucket.min(100)
}

/// One round of the splitmix64 mixer, used to derive independent sub-seeds.
pub(crate) fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for item `index` under run seed `seed`; independent of the order
/// items are processed in.
pub(crate) fn sub_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centi_bucket_grid_round_half_up() {
        // Oracle: on the 0.000..=1.000 grid with step 0.005, the bucket of
        // k*0.005 is round-half-up(k/2) computed in integer arithmetic.
        for k in 0..=200usize {
            let score = k as f64 * 0.005;
            let expected = k.div_ceil(2); // k even: k/2; k odd: (k+1)/2
            assert_eq!(
                score_centi_bucket(score),
                expected,
                "score {score} (k={k})"
            );
        }
    }

    #[test]
    fn centi_bucket_endpoints() {
        assert_eq!(score_centi_bucket(0.0), 0);
        assert_eq!(score_centi_bucket(1.0), 100);
        assert_eq!(score_centi_bucket(0.895), 90);
        assert_eq!(score_centi_bucket(0.89), 89);
        assert_eq!(score_centi_bucket(0.90), 90);
    }

    #[test]
    fn sub_seed_differs_by_index() {
        let a = sub_seed(7, 0);
        let b = sub_seed(7, 1);
        let c = sub_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
