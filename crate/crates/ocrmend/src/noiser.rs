//! Synthetic corpus generation: corrupt clean text with seeded
//! remove/insert/replace edits and attach sampled confidence scores.
//!
//! Each clean character takes one categorical draw over
//! {remove, replace, keep}; independently, each inter-character gap
//! (including both ends) inserts a character. Surviving characters carry
//! scores from the clean-score sampler (a transformed gamma draw); inserted
//! and replaced characters carry error-score draws from a beta distribution.
//! Removed characters contribute no score.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma};
use thiserror::Error;

use crate::corpus::{Dataset, SentencePair};
use crate::util::sub_seed;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("replacement pool is empty")]
    EmptyPool,
    #[error("input text is empty")]
    EmptyInput,
    #[error("bad noise config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, NoiseError>;

/// Edit rates and score-distribution parameters.
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    /// Per-character removal probability.
    pub p_remove: f64,
    /// Per-gap insertion probability (gaps include both sentence ends).
    pub p_insert: f64,
    /// Per-character replacement probability.
    pub p_replace: f64,
    /// Shape of the gamma distribution behind clean-character scores.
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    /// Beta parameters for inserted/replaced character scores.
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub seed: u64,
    /// Characters drawn from when inserting or replacing.
    pub replacement_pool: Vec<char>,
    /// Divisor in the gamma-to-score transform `clamp(1 - g/div, 0, 1)`.
    pub gamma_score_divisor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_remove: 0.05,
            p_insert: 0.05,
            p_replace: 0.15,
            gamma_shape: 2.0,
            gamma_scale: 1.0,
            beta_alpha: 6.0,
            beta_beta: 4.0,
            seed: 0,
            replacement_pool: Vec::new(),
            gamma_score_divisor: 10.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_remove", self.p_remove),
            ("p_insert", self.p_insert),
            ("p_replace", self.p_replace),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(NoiseError::BadConfig(format!("{name}={p} outside [0,1]")));
            }
        }
        if self.p_remove + self.p_replace >= 1.0 {
            return Err(NoiseError::BadConfig(format!(
                "p_remove + p_replace = {} leaves no keep probability",
                self.p_remove + self.p_replace
            )));
        }
        for (name, v) in [
            ("gamma_shape", self.gamma_shape),
            ("gamma_scale", self.gamma_scale),
            ("beta_alpha", self.beta_alpha),
            ("beta_beta", self.beta_beta),
            ("gamma_score_divisor", self.gamma_score_divisor),
        ] {
            if v <= 0.0 {
                return Err(NoiseError::BadConfig(format!("{name}={v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Edit counts from one or more corrupt calls; the denominators for the
/// empirical rate checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoiseStats {
    pub kept: u64,
    pub removed: u64,
    pub replaced: u64,
    pub inserted: u64,
    pub gaps: u64,
}

impl NoiseStats {
    pub fn chars(&self) -> u64 {
        self.kept + self.removed + self.replaced
    }

    pub fn merge(&mut self, other: &NoiseStats) {
        self.kept += other.kept;
        self.removed += other.removed;
        self.replaced += other.replaced;
        self.inserted += other.inserted;
        self.gaps += other.gaps;
    }
}

/// Per-sentence sampler bundling the RNG with the score distributions.
pub struct Noiser<'a> {
    cfg: &'a NoiseConfig,
    gamma: Gamma<f64>,
    beta: Beta<f64>,
    rng: ChaCha8Rng,
}

impl<'a> Noiser<'a> {
    pub fn new(cfg: &'a NoiseConfig, seed: u64) -> Result<Noiser<'a>> {
        cfg.validate()?;
        let gamma = Gamma::new(cfg.gamma_shape, cfg.gamma_scale)
            .map_err(|e| NoiseError::BadConfig(e.to_string()))?;
        let beta = Beta::new(cfg.beta_alpha, cfg.beta_beta)
            .map_err(|e| NoiseError::BadConfig(e.to_string()))?;
        Ok(Noiser {
            cfg,
            gamma,
            beta,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Score for a character the OCR read correctly: `clamp(1 - g/10, 0, 1)`
    /// over a gamma draw, concentrating mass near 0.8..1.0.
    pub fn sample_clean_score(&mut self) -> f64 {
        let g = self.gamma.sample(&mut self.rng);
        clean_score_from_gamma(g, self.cfg.gamma_score_divisor)
    }

    /// Score for an inserted or replaced character: a beta draw, already in
    /// (0,1).
    pub fn sample_error_score(&mut self) -> f64 {
        self.beta.sample(&mut self.rng)
    }

    /// Corrupt one clean sentence. The returned pair keeps the input as its
    /// `clean` field; every surviving or inserted character carries exactly
    /// one score.
    pub fn corrupt(&mut self, clean: &str) -> Result<(SentencePair, NoiseStats)> {
        if clean.is_empty() {
            return Err(NoiseError::EmptyInput);
        }
        if self.cfg.replacement_pool.is_empty() {
            return Err(NoiseError::EmptyPool);
        }
        let cfg = self.cfg;
        let pool = cfg.replacement_pool.as_slice();
        let mut noisy = String::with_capacity(clean.len() + 8);
        let mut scores = Vec::with_capacity(clean.chars().count() + 4);
        let mut stats = NoiseStats::default();

        for c in clean.chars() {
            maybe_insert(
                &mut self.rng, &self.beta, pool, cfg.p_insert, &mut noisy, &mut scores, &mut stats,
            );
            let draw = self.rng.random::<f64>();
            if draw < cfg.p_remove {
                stats.removed += 1;
            } else if draw < cfg.p_remove + cfg.p_replace {
                let replacement = sample_replacement(pool, c, &mut self.rng);
                noisy.push(replacement);
                scores.push(self.beta.sample(&mut self.rng));
                stats.replaced += 1;
            } else {
                noisy.push(c);
                let g = self.gamma.sample(&mut self.rng);
                scores.push(clean_score_from_gamma(g, cfg.gamma_score_divisor));
                stats.kept += 1;
            }
        }
        maybe_insert(
            &mut self.rng, &self.beta, pool, cfg.p_insert, &mut noisy, &mut scores, &mut stats,
        );

        // An all-edits-removed sentence would violate the pair invariant;
        // keep one clean character so the record stays loadable.
        if noisy.trim().is_empty() {
            let c = clean.chars().find(|c| !c.is_whitespace()).or(clean.chars().next()).unwrap();
            noisy.push(c);
            let g = self.gamma.sample(&mut self.rng);
            scores.push(clean_score_from_gamma(g, cfg.gamma_score_divisor));
            stats.kept += 1;
            stats.removed = stats.removed.saturating_sub(1);
        }

        Ok((
            SentencePair {
                noisy,
                scores,
                clean: clean.to_string(),
            },
            stats,
        ))
    }
}

fn maybe_insert(
    rng: &mut ChaCha8Rng,
    beta: &Beta<f64>,
    pool: &[char],
    p_insert: f64,
    noisy: &mut String,
    scores: &mut Vec<f64>,
    stats: &mut NoiseStats,
) {
    stats.gaps += 1;
    if rng.random::<f64>() < p_insert {
        let c = pool[rng.random_range(0..pool.len())];
        noisy.push(c);
        scores.push(beta.sample(rng));
        stats.inserted += 1;
    }
}

fn sample_replacement(pool: &[char], original: char, rng: &mut ChaCha8Rng) -> char {
    // Uniform over the pool excluding the character being replaced; a
    // single-character pool degenerates to an identity replacement.
    for _ in 0..32 {
        let c = pool[rng.random_range(0..pool.len())];
        if c != original {
            return c;
        }
    }
    pool[rng.random_range(0..pool.len())]
}

/// The gamma-to-score transform, exposed for direct testing.
pub fn clean_score_from_gamma(g: f64, divisor: f64) -> f64 {
    (1.0 - g / divisor).clamp(0.0, 1.0)
}

/// Corrupt one sentence with a self-contained RNG derived from
/// `(cfg.seed, index)`; the unit of work for [`corrupt_corpus`].
pub fn corrupt_indexed(
    clean: &str,
    cfg: &NoiseConfig,
    index: u64,
) -> Result<(SentencePair, NoiseStats)> {
    let mut noiser = Noiser::new(cfg, sub_seed(cfg.seed, index))?;
    noiser.corrupt(clean)
}

/// Corrupt a whole corpus. Each sentence derives its own sub-seed from
/// `(cfg.seed, sentence index)`, so the output is independent of iteration
/// order and of how the work is spread across threads.
pub fn corrupt_corpus(clean_corpus: &[String], cfg: &NoiseConfig) -> Result<(Dataset, NoiseStats)> {
    corrupt_corpus_jobs(clean_corpus, cfg, 1)
}

/// [`corrupt_corpus`] with `jobs` worker threads.
pub fn corrupt_corpus_jobs(
    clean_corpus: &[String],
    cfg: &NoiseConfig,
    jobs: usize,
) -> Result<(Dataset, NoiseStats)> {
    if clean_corpus.is_empty() {
        return Err(NoiseError::EmptyInput);
    }
    cfg.validate()?;
    let jobs = jobs.max(1).min(clean_corpus.len());
    let results: Vec<Result<(SentencePair, NoiseStats)>> = if jobs == 1 {
        clean_corpus
            .iter()
            .enumerate()
            .map(|(i, s)| corrupt_indexed(s, cfg, i as u64))
            .collect()
    } else {
        let chunk = clean_corpus.len().div_ceil(jobs);
        let mut out: Vec<Option<Result<(SentencePair, NoiseStats)>>> =
            (0..clean_corpus.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (worker, (sentences, slots)) in clean_corpus
                .chunks(chunk)
                .zip(out.chunks_mut(chunk))
                .enumerate()
            {
                scope.spawn(move || {
                    for (k, (s, slot)) in sentences.iter().zip(slots.iter_mut()).enumerate() {
                        let index = (worker * chunk + k) as u64;
                        *slot = Some(corrupt_indexed(s, cfg, index));
                    }
                });
            }
        });
        out.into_iter().map(|r| r.expect("worker filled slot")).collect()
    };

    let mut pairs = Vec::with_capacity(clean_corpus.len());
    let mut total = NoiseStats::default();
    for r in results {
        let (pair, stats) = r?;
        total.merge(&stats);
        pairs.push(pair);
    }
    Ok((Dataset::new(pairs), total))
}

/// Distinct characters of a clean corpus, sorted; the default replacement
/// pool.
pub fn char_inventory(corpus: &[String]) -> Vec<char> {
    let mut set: std::collections::BTreeSet<char> = std::collections::BTreeSet::new();
    for s in corpus {
        set.extend(s.chars());
    }
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg(seed: u64) -> NoiseConfig {
        NoiseConfig {
            seed,
            replacement_pool: "abcdefghij ".chars().collect(),
            ..NoiseConfig::default()
        }
    }

    #[test]
    fn zero_rates_is_identity() {
        let cfg = NoiseConfig {
            p_remove: 0.0,
            p_insert: 0.0,
            p_replace: 0.0,
            ..test_cfg(3)
        };
        let mut noiser = Noiser::new(&cfg, 3).unwrap();
        let (pair, stats) = noiser.corrupt("hello there").unwrap();
        assert_eq!(pair.noisy, "hello there");
        assert_eq!(pair.clean, "hello there");
        assert_eq!(pair.scores.len(), 11);
        assert_eq!(stats.kept, 11);
        assert_eq!(stats.removed + stats.replaced + stats.inserted, 0);
    }

    #[test]
    fn determinism_same_seed_same_output() {
        let cfg = test_cfg(42);
        let (a, _) = Noiser::new(&cfg, 42).unwrap().corrupt("abcabc abc").unwrap();
        let (b, _) = Noiser::new(&cfg, 42).unwrap().corrupt("abcabc abc").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_alignment_holds_for_fuzzed_inputs() {
        let cfg = test_cfg(7);
        for seed in 0..200u64 {
            let mut noiser = Noiser::new(&cfg, seed).unwrap();
            let (pair, _) = noiser.corrupt("the quick brown fox").unwrap();
            assert_eq!(pair.scores.len(), pair.noisy.chars().count());
            assert!(pair.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn clamp_boundaries() {
        assert_eq!(clean_score_from_gamma(0.0, 10.0), 1.0);
        assert_eq!(clean_score_from_gamma(10.0, 10.0), 0.0);
        assert_eq!(clean_score_from_gamma(25.0, 10.0), 0.0);
    }

    #[test]
    fn empirical_edit_rates_match_config() {
        let cfg = test_cfg(1234);
        let sentence = "abcdefghij".repeat(10);
        let corpus: Vec<String> = (0..1200).map(|_| sentence.clone()).collect();
        let (_, stats) = corrupt_corpus(&corpus, &cfg).unwrap();
        let chars = stats.chars() as f64;
        assert!(chars >= 1e5);
        let remove_rate = stats.removed as f64 / chars;
        let replace_rate = stats.replaced as f64 / chars;
        let insert_rate = stats.inserted as f64 / stats.gaps as f64;
        assert!((remove_rate - 0.05).abs() < 0.005, "remove {remove_rate}");
        assert!((insert_rate - 0.05).abs() < 0.005, "insert {insert_rate}");
        assert!((replace_rate - 0.15).abs() < 0.01, "replace {replace_rate}");
    }

    #[test]
    fn error_score_moments_match_beta() {
        let cfg = test_cfg(9);
        let mut noiser = Noiser::new(&cfg, 9).unwrap();
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let s = noiser.sample_error_score();
            assert!(s > 0.0 && s < 1.0);
            sum += s;
            sumsq += s * s;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // Beta(6,4): mean 0.6, variance 24/1100.
        assert!((mean - 0.6).abs() < 0.003, "mean {mean}");
        assert!((var - 0.021818).abs() < 0.001, "var {var}");
    }

    #[test]
    fn clean_score_mean_matches_integrated_expectation() {
        // Oracle: E[clamp(1 - g/10, 0, 1)] for g ~ Gamma(2,1) by Simpson
        // quadrature of (1 - g/10) g e^{-g} over [0, 10].
        let f = |g: f64| (1.0 - g / 10.0) * g * (-g).exp();
        let n = 100_000;
        let h = 10.0 / n as f64;
        let mut integral = f(0.0) + f(10.0);
        for i in 1..n {
            let x = i as f64 * h;
            integral += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        integral *= h / 3.0;

        let cfg = test_cfg(5);
        let mut noiser = Noiser::new(&cfg, 5).unwrap();
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| noiser.sample_clean_score()).sum::<f64>() / n as f64;
        assert!(
            (mean - integral).abs() < 0.005,
            "sample mean {mean}, integrated {integral}"
        );
        // Cross-check the quadrature against the closed form 0.8 + 1.2 e^{-10}.
        assert!((integral - (0.8 + 1.2 * (-10.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn corpus_corruption_is_order_independent() {
        let cfg = test_cfg(77);
        let corpus: Vec<String> = vec!["alpha beta".into(), "gamma delta".into(), "epsilon".into()];
        let (serial, s1) = corrupt_corpus_jobs(&corpus, &cfg, 1).unwrap();
        let (parallel, s2) = corrupt_corpus_jobs(&corpus, &cfg, 3).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(s1, s2);
    }

    #[test]
    fn zero_rate_corpus_all_identity() {
        let cfg = NoiseConfig {
            p_remove: 0.0,
            p_insert: 0.0,
            p_replace: 0.0,
            ..test_cfg(1)
        };
        let corpus: Vec<String> = vec!["one two".into(), "three".into()];
        let (ds, _) = corrupt_corpus(&corpus, &cfg).unwrap();
        for (pair, clean) in ds.pairs.iter().zip(&corpus) {
            assert_eq!(&pair.noisy, clean);
        }
    }

    #[test]
    fn rejects_empty_inputs() {
        let cfg = test_cfg(0);
        let mut noiser = Noiser::new(&cfg, 0).unwrap();
        assert!(matches!(noiser.corrupt(""), Err(NoiseError::EmptyInput)));
        let empty_pool = NoiseConfig {
            replacement_pool: vec![],
            ..test_cfg(0)
        };
        let mut noiser = Noiser::new(&empty_pool, 0).unwrap();
        assert!(matches!(noiser.corrupt("abc"), Err(NoiseError::EmptyPool)));
        assert!(matches!(
            corrupt_corpus(&[], &cfg),
            Err(NoiseError::EmptyInput)
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = NoiseConfig {
            p_remove: 0.6,
            p_replace: 0.5,
            ..test_cfg(0)
        };
        assert!(matches!(cfg.validate(), Err(NoiseError::BadConfig(_))));
    }
}
