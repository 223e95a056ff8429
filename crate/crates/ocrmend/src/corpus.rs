//! Paired noisy/score/clean records: loading, validation, splitting, and
//! summary statistics.
//!
//! The on-disk format is one JSON object per line with keys `noisy`,
//! `scores`, `clean`, UTF-8, each record terminated by a newline. Scores are
//! serialized with six decimal places. Text is normalized to Unicode NFC on
//! load; score lists must then align one-to-one with the code points of
//! `noisy`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::util::score_centi_bucket;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record {index}: missing field {field}")]
    MissingField { index: usize, field: &'static str },
    #[error("record {index}: {scores} scores for {chars} characters")]
    ScoreLengthMismatch {
        index: usize,
        scores: usize,
        chars: usize,
    },
    #[error("record {index}: score {value} outside [0,1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("record {index}: empty {field} text")]
    EmptyText { index: usize, field: &'static str },
    #[error("record {index}: malformed JSON: {message}")]
    MalformedRecord { index: usize, message: String },
    #[error("file begins with a byte-order mark")]
    LeadingBom,
    #[error("split fractions {0:?} must be positive and sum to 1")]
    BadFractions([f64; 3]),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One noisy sentence, its per-character confidence scores, and the clean
/// reference. `scores` holds one value per Unicode scalar value of `noisy`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub noisy: String,
    pub scores: Vec<f64>,
    pub clean: String,
}

impl SentencePair {
    /// Validate the alignment, range, and non-emptiness invariants.
    pub fn validate(&self, index: usize) -> Result<()> {
        let chars = self.noisy.chars().count();
        if self.scores.len() != chars {
            return Err(CorpusError::ScoreLengthMismatch {
                index,
                scores: self.scores.len(),
                chars,
            });
        }
        for &s in &self.scores {
            if !(0.0..=1.0).contains(&s) || s.is_nan() {
                return Err(CorpusError::ScoreOutOfRange { index, value: s });
            }
        }
        if self.noisy.trim().is_empty() {
            return Err(CorpusError::EmptyText {
                index,
                field: "noisy",
            });
        }
        if self.clean.trim().is_empty() {
            return Err(CorpusError::EmptyText {
                index,
                field: "clean",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Dev,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Dev => "dev",
            SplitTag::Test => "test",
        }
    }
}

/// Ordered collection of sentence pairs. Immutable once constructed; share
/// freely across threads of the caller's choosing (construction is the only
/// mutation).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SentencePair>,
    pub split_tag: Option<SplitTag>,
}

impl Dataset {
    pub fn new(pairs: Vec<SentencePair>) -> Dataset {
        Dataset {
            pairs,
            split_tag: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Corpus summary in the shape of a score-count table: every centi-bucket
/// 0..=100 is present as a key even when its count is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub pair_count: usize,
    /// Total scored (noisy-side) code points.
    pub char_count: usize,
    pub score_histogram: BTreeMap<u32, u64>,
    pub char_inventory: BTreeMap<char, u64>,
}

/// Outcome of a load: the dataset plus any records dropped in lenient mode.
#[derive(Debug)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub dropped: Vec<(usize, CorpusError)>,
}

#[derive(Deserialize)]
struct RawRecord {
    noisy: Option<String>,
    scores: Option<Vec<f64>>,
    clean: Option<String>,
}

/// Load and validate a JSONL pair file.
///
/// In strict mode the first invariant breach aborts with an error naming the
/// record index; in lenient mode offending records are dropped and reported
/// in [`LoadOutcome::dropped`]. A leading BOM is rejected in strict mode and
/// stripped otherwise.
pub fn load_pairs(path: &Path, strict: bool) -> Result<LoadOutcome> {
    let file = File::open(path)?;
    load_pairs_from(BufReader::new(file), strict)
}

pub fn load_pairs_from<R: Read>(reader: R, strict: bool) -> Result<LoadOutcome> {
    let mut reader = BufReader::new(reader);
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    let mut line = String::new();
    let mut index = 0usize;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        if index == 0 && line.starts_with('\u{feff}') {
            if strict {
                return Err(CorpusError::LeadingBom);
            }
            line = line.trim_start_matches('\u{feff}').to_string();
        }
        if line.trim().is_empty() {
            index += 1;
            continue;
        }
        match parse_record(&line, index) {
            Ok(pair) => pairs.push(pair),
            Err(e) if strict => return Err(e),
            Err(e) => dropped.push((index, e)),
        }
        index += 1;
    }
    Ok(LoadOutcome {
        dataset: Dataset::new(pairs),
        dropped,
    })
}

fn parse_record(line: &str, index: usize) -> Result<SentencePair> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
            index,
            message: e.to_string(),
        })?;
    let noisy = raw.noisy.ok_or(CorpusError::MissingField {
        index,
        field: "noisy",
    })?;
    let scores = raw.scores.ok_or(CorpusError::MissingField {
        index,
        field: "scores",
    })?;
    let clean = raw.clean.ok_or(CorpusError::MissingField {
        index,
        field: "clean",
    })?;
    let pair = SentencePair {
        noisy: noisy.nfc().collect(),
        scores,
        clean: clean.nfc().collect(),
    };
    pair.validate(index)?;
    Ok(pair)
}

/// Write pairs as JSONL with scores at six decimal places. The written file
/// loads back to an equal dataset up to that score precision.
pub fn write_pairs(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_pairs_to(BufWriter::new(file), ds)
}

pub fn write_pairs_to<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    for pair in &ds.pairs {
        w.write_all(render_record(pair).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn render_record(pair: &SentencePair) -> String {
    // serde_json handles string escaping; scores are formatted by hand to pin
    // the six-decimal contract.
    let noisy = serde_json::to_string(&pair.noisy).expect("string serializes");
    let clean = serde_json::to_string(&pair.clean).expect("string serializes");
    let mut scores = String::with_capacity(pair.scores.len() * 9 + 2);
    scores.push('[');
    for (i, s) in pair.scores.iter().enumerate() {
        if i > 0 {
            scores.push(',');
        }
        scores.push_str(&format!("{s:.6}"));
    }
    scores.push(']');
    format!("{{\"noisy\":{noisy},\"scores\":{scores},\"clean\":{clean}}}")
}

/// Deterministic shuffle by `seed`, then a contiguous cut into train/dev/test
/// whose sizes follow largest-remainder rounding with ties broken toward the
/// earlier split (train, then dev).
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(f));
    }
    let n = ds.pairs.len();
    let sizes = largest_remainder_sizes(n, &f);

    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, seed);

    let mut iter = order.into_iter();
    let mut take = |count: usize, tag: SplitTag| {
        let mut picked: Vec<usize> = iter.by_ref().take(count).collect();
        picked.sort_unstable();
        Dataset {
            pairs: picked.into_iter().map(|i| ds.pairs[i].clone()).collect(),
            split_tag: Some(tag),
        }
    };
    let train = take(sizes[0], SplitTag::Train);
    let dev = take(sizes[1], SplitTag::Dev);
    let test = take(sizes[2], SplitTag::Test);
    Ok((train, dev, test))
}

fn largest_remainder_sizes(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // Largest fractional remainder first; ties go to the earlier split.
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        sizes[order[i % 3]] += 1;
    }
    [sizes[0], sizes[1], sizes[2]]
}

/// Fisher-Yates with a splitmix64 stream; stable across library versions.
fn shuffle(items: &mut [usize], seed: u64) {
    let mut state = seed;
    for i in (1..items.len()).rev() {
        state = crate::util::splitmix64(state);
        let j = (state % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Summarize a non-empty dataset: score histogram over buckets
/// `round(100 * s)` and a noisy-side character inventory.
pub fn stats(ds: &Dataset) -> Result<CorpusStats> {
    if ds.pairs.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let mut histogram: BTreeMap<u32, u64> = (0..=100).map(|b| (b, 0)).collect();
    let mut inventory: BTreeMap<char, u64> = BTreeMap::new();
    let mut char_count = 0usize;
    for pair in &ds.pairs {
        for &s in &pair.scores {
            *histogram.get_mut(&(score_centi_bucket(s) as u32)).unwrap() += 1;
        }
        for c in pair.noisy.chars() {
            char_count += 1;
            *inventory.entry(c).or_insert(0) += 1;
        }
    }
    Ok(CorpusStats {
        pair_count: ds.pairs.len(),
        char_count,
        score_histogram: histogram,
        char_inventory: inventory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(noisy: &str, scores: &[f64], clean: &str) -> SentencePair {
        SentencePair {
            noisy: noisy.to_string(),
            scores: scores.to_vec(),
            clean: clean.to_string(),
        }
    }

    fn load_str(s: &str, strict: bool) -> Result<LoadOutcome> {
        load_pairs_from(s.as_bytes(), strict)
    }

    #[test]
    fn loads_minimal_record() {
        let out = load_str(
            r#"{"noisy":"ab","scores":[0.5,0.9],"clean":"ab"}"#,
            true,
        )
        .unwrap();
        assert_eq!(out.dataset.len(), 1);
        assert_eq!(out.dataset.pairs[0], pair("ab", &[0.5, 0.9], "ab"));
    }

    #[test]
    fn score_length_mismatch_is_rejected() {
        let res = load_str(r#"{"noisy":"ab","scores":[0.5],"clean":"ab"}"#, true);
        assert!(matches!(
            res,
            Err(CorpusError::ScoreLengthMismatch {
                index: 0,
                scores: 1,
                chars: 2
            })
        ));
    }

    #[test]
    fn lenient_mode_drops_and_counts() {
        let text = concat!(
            r#"{"noisy":"ab","scores":[0.5,0.9],"clean":"ab"}"#,
            "\n",
            r#"{"noisy":"ab","scores":[0.5],"clean":"ab"}"#,
            "\n",
            r#"{"noisy":"c","scores":[1.5],"clean":"c"}"#,
            "\n",
            r#"{"noisy":"d","scores":[0.5],"clean":"d"}"#,
            "\n",
        );
        let out = load_str(text, false).unwrap();
        assert_eq!(out.dataset.len(), 2);
        assert_eq!(out.dropped.len(), 2);
        assert_eq!(out.dropped[0].0, 1);
        assert!(matches!(out.dropped[1].1, CorpusError::ScoreOutOfRange { .. }));
    }

    #[test]
    fn missing_field_names_record() {
        let res = load_str(r#"{"noisy":"ab","scores":[0.5,0.9]}"#, true);
        assert!(matches!(
            res,
            Err(CorpusError::MissingField {
                index: 0,
                field: "clean"
            })
        ));
    }

    #[test]
    fn empty_text_rejected() {
        let res = load_str(r#"{"noisy":"  ","scores":[0.5,0.9],"clean":"ab"}"#, true);
        assert!(matches!(res, Err(CorpusError::EmptyText { field: "noisy", .. })));
    }

    #[test]
    fn table_shaped_record_preserves_score_order() {
        // A record in the sample-data shape: Tibetan text with a score list
        // beginning [0.32, 0.32, 0.14, 0.7, 0.24, 0.99, 1.0, 1.0, ...].
        let noisy = "ལྷོ་བུ་གྲོ་";
        let n = noisy.chars().count();
        let mut scores = vec![0.32, 0.32, 0.14, 0.7, 0.24, 0.99, 1.0, 1.0];
        scores.resize(n, 1.0);
        let json = format!(
            r#"{{"noisy":"{noisy}","scores":{scores:?},"clean":"ལྷོ་བུ་གྲོ་"}}"#
        );
        let out = load_str(&json, true).unwrap();
        assert_eq!(out.dataset.pairs[0].scores[..8], [0.32, 0.32, 0.14, 0.7, 0.24, 0.99, 1.0, 1.0]);
    }

    #[test]
    fn bom_rejected_in_strict_mode_only() {
        let text = "\u{feff}{\"noisy\":\"a\",\"scores\":[0.5],\"clean\":\"a\"}\n";
        assert!(matches!(load_str(text, true), Err(CorpusError::LeadingBom)));
        let out = load_str(text, false).unwrap();
        assert_eq!(out.dataset.len(), 1);
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        let ds = Dataset::new((0..10).map(|i| pair(&format!("n{i}"), &[0.5, 0.5], "c")).collect());
        let (train, dev, test) = split(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((train.len(), dev.len(), test.len()), (8, 1, 1));
        assert_eq!(train.split_tag, Some(SplitTag::Train));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ds = Dataset::new(
            (0..23)
                .map(|i| pair(&format!("n{i}"), &[0.5, 0.5], &format!("c{i}")))
                .collect(),
        );
        let (a1, b1, c1) = split(&ds, (0.6, 0.2, 0.2), 99).unwrap();
        let (a2, b2, c2) = split(&ds, (0.6, 0.2, 0.2), 99).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
        // Union of splits equals the input multiset.
        let mut all: Vec<String> = a1
            .pairs
            .iter()
            .chain(&b1.pairs)
            .chain(&c1.pairs)
            .map(|p| p.noisy.clone())
            .collect();
        all.sort();
        let mut expect: Vec<String> = ds.pairs.iter().map(|p| p.noisy.clone()).collect();
        expect.sort();
        assert_eq!(all, expect);
        // A different seed moves members around.
        let (a3, _, _) = split(&ds, (0.6, 0.2, 0.2), 100).unwrap();
        assert_ne!(a1, a3);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = Dataset::new(vec![pair("a", &[0.1], "b")]);
        assert!(matches!(
            split(&ds, (0.5, 0.5, 0.5), 1),
            Err(CorpusError::BadFractions(_))
        ));
        assert!(matches!(
            split(&ds, (1.0, -0.5, 0.5), 1),
            Err(CorpusError::BadFractions(_))
        ));
    }

    #[test]
    fn stats_buckets_and_bounds() {
        let ds = Dataset::new(vec![pair("ab", &[0.0, 1.0], "ab")]);
        let st = stats(&ds).unwrap();
        assert_eq!(st.score_histogram[&0], 1);
        assert_eq!(st.score_histogram[&100], 1);
        assert_eq!(st.score_histogram.len(), 101);
        assert_eq!(st.char_count, 2);
        assert_eq!(st.pair_count, 1);
        let total: u64 = st.score_histogram.values().sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn stats_round_half_up() {
        let ds = Dataset::new(vec![pair("a", &[0.895], "a")]);
        let st = stats(&ds).unwrap();
        assert_eq!(st.score_histogram[&90], 1);
    }

    #[test]
    fn stats_rejects_empty() {
        assert!(matches!(
            stats(&Dataset::new(vec![])),
            Err(CorpusError::EmptyDataset)
        ));
    }

    #[test]
    fn roundtrip_single_pair_bit_exact() {
        let ds = Dataset::new(vec![pair("héllo", &[0.125, 0.5, 1.0, 0.0, 0.33], "héllo")]);
        let mut buf = Vec::new();
        write_pairs_to(&mut buf, &ds).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.ends_with('\n'));
        let back = load_pairs_from(buf.as_slice(), true).unwrap();
        assert_eq!(back.dataset.pairs[0].noisy, "héllo");
        assert_eq!(back.dataset.pairs[0].scores, vec![0.125, 0.5, 1.0, 0.0, 0.33]);
    }

    #[test]
    fn empty_dataset_writes_empty_file() {
        let ds = Dataset::new(vec![]);
        let mut buf = Vec::new();
        write_pairs_to(&mut buf, &ds).unwrap();
        assert!(buf.is_empty());
        let back = load_pairs_from(buf.as_slice(), true).unwrap();
        assert_eq!(back.dataset.len(), 0);
    }

    #[test]
    fn nfc_applied_on_load() {
        // "é" as e + combining acute composes to one code point under NFC,
        // so one score aligns with it.
        let json = "{\"noisy\":\"e\\u0301\",\"scores\":[0.5],\"clean\":\"x\"}";
        let out = load_str(json, true).unwrap();
        assert_eq!(out.dataset.pairs[0].noisy, "é");
        assert_eq!(out.dataset.pairs[0].noisy.chars().count(), 1);
    }
}
