//! BPE subword vocabulary, score-to-token alignment, and confidence-score
//! quantization.
//!
//! Merges are learned within whitespace-delimited units; every whitespace
//! character is its own token and never participates in a merge. Encoding
//! tracks the code-point span of each token so per-character confidence
//! scores can be reduced to per-token scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::util::score_centi_bucket;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target size {target} below minimum {minimum} (base inventory + specials)")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error("span {start}..{end} outside the {len} provided character scores")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("score {0} outside [0,1]")]
    ScoreOutOfRange(f64),
    #[error("bucket {bucket} invalid for mode {mode}")]
    BadBucket { bucket: usize, mode: usize },
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("malformed vocabulary file: {0}")]
    MalformedVocab(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Subword vocabulary: ordered merges plus the id maps. Immutable after
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    pub target_size: usize,
    /// Base character inventory (sorted), ids assigned after the specials.
    base_chars: Vec<char>,
    /// Merge rules in training order.
    merges: Vec<(String, String)>,
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl BpeVocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(TokenizerError::UnknownId(id))
    }

    fn rebuild_maps(&mut self) {
        self.id_to_token = SPECIALS.iter().map(|s| s.to_string()).collect();
        self.id_to_token
            .extend(self.base_chars.iter().map(|c| c.to_string()));
        for (l, r) in &self.merges {
            self.id_to_token.push(format!("{l}{r}"));
        }
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// One encoded sentence: token ids, the code-point span of each token in the
/// source text, and (when scores were supplied) one score per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSentence {
    pub ids: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub token_scores: Option<Vec<f64>>,
}

/// Train a BPE vocabulary on noisy sentences: greedy most-frequent-pair
/// merges until the vocabulary reaches `target_size` or no pair occurs at
/// least twice. Ties break toward the lexicographically smallest pair.
pub fn train_bpe(corpus: &[String], target_size: usize) -> Result<BpeVocab> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut inventory: BTreeSet<char> = BTreeSet::new();
    // word -> frequency, over whitespace-delimited units
    let mut word_freq: BTreeMap<Vec<char>, u64> = BTreeMap::new();
    for sentence in corpus {
        inventory.extend(sentence.chars());
        for word in sentence.split_whitespace() {
            *word_freq.entry(word.chars().collect()).or_insert(0) += 1;
        }
    }
    let base_chars: Vec<char> = inventory.into_iter().collect();
    let minimum = base_chars.len() + SPECIALS.len();
    if target_size < minimum {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            minimum,
        });
    }

    // Words as mutable token sequences, weighted by frequency.
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(chars, freq)| (chars.iter().map(|c| c.to_string()).collect(), freq))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    while minimum + merges.len() < target_size {
        let mut pair_counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (tokens, freq) in &words {
            for window in tokens.windows(2) {
                *pair_counts
                    .entry((window[0].as_str(), window[1].as_str()))
                    .or_insert(0) += freq;
            }
        }
        // Most frequent pair; BTreeMap order makes the tie-break the
        // lexicographically smallest pair.
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(&(l, r), &count)| (l.to_string(), r.to_string(), count));
        let Some((left, right, count)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        for (tokens, _) in &mut words {
            merge_in_place(tokens, &left, &right);
        }
        merges.push((left, right));
    }

    let mut vocab = BpeVocab {
        target_size,
        base_chars,
        merges,
        token_to_id: HashMap::new(),
        id_to_token: Vec::new(),
    };
    vocab.rebuild_maps();
    Ok(vocab)
}

/// Left-to-right single pass replacing adjacent `(left, right)` with the
/// merged token.
fn merge_in_place(tokens: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < tokens.len() {
        if tokens[i] == left && tokens[i + 1] == right {
            tokens[i] = format!("{left}{right}");
            tokens.remove(i + 1);
        }
        i += 1;
    }
}

/// Encode text by applying the vocabulary's merges in training order within
/// each whitespace-delimited unit. Unknown base characters map to `UNK` with
/// a one-character span. Spans tile `[0, len)` in code points.
pub fn encode(text: &str, vocab: &BpeVocab) -> TokenizedSentence {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut pos = 0;
    while pos < chars.len() {
        if chars[pos].is_whitespace() {
            let id = vocab
                .token_id(&chars[pos].to_string())
                .unwrap_or(UNK);
            ids.push(id);
            spans.push((pos, pos + 1));
            pos += 1;
            continue;
        }
        let start = pos;
        while pos < chars.len() && !chars[pos].is_whitespace() {
            pos += 1;
        }
        encode_word(&chars[start..pos], start, vocab, &mut ids, &mut spans);
    }
    TokenizedSentence {
        ids,
        spans,
        token_scores: None,
    }
}

fn encode_word(
    word: &[char],
    offset: usize,
    vocab: &BpeVocab,
    ids: &mut Vec<usize>,
    spans: &mut Vec<(usize, usize)>,
) {
    // (surface, span) pairs that merges operate on
    let mut tokens: Vec<(String, (usize, usize))> = word
        .iter()
        .enumerate()
        .map(|(i, c)| (c.to_string(), (offset + i, offset + i + 1)))
        .collect();
    for (left, right) in &vocab.merges {
        let mut i = 0;
        while i + 1 < tokens.len() {
            if tokens[i].0 == *left && tokens[i + 1].0 == *right {
                let merged = format!("{left}{right}");
                let span = (tokens[i].1 .0, tokens[i + 1].1 .1);
                tokens[i] = (merged, span);
                tokens.remove(i + 1);
            }
            i += 1;
        }
    }
    for (surface, span) in tokens {
        ids.push(vocab.token_id(&surface).unwrap_or(UNK));
        spans.push(span);
    }
}

/// Concatenate token surfaces. Specials are dropped; `UNK` renders as
/// U+FFFD.
pub fn decode(ids: &[usize], vocab: &BpeVocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        if id >= vocab.len() {
            return Err(TokenizerError::UnknownId(id));
        }
        match id {
            PAD | BOS | EOS => {}
            UNK => out.push('\u{fffd}'),
            _ => out.push_str(vocab.token(id)?),
        }
    }
    Ok(out)
}

/// How a token's characters' scores collapse to one token score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreReduce {
    /// A token with one low-confidence character is untrustworthy as a
    /// whole.
    #[default]
    Min,
    Mean,
}

impl ScoreReduce {
    pub fn parse(s: &str) -> Option<ScoreReduce> {
        match s {
            "min" => Some(ScoreReduce::Min),
            "mean" => Some(ScoreReduce::Mean),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreReduce::Min => "min",
            ScoreReduce::Mean => "mean",
        }
    }
}

/// Reduce per-character scores to per-token scores over the given spans.
pub fn align_scores(
    char_scores: &[f64],
    spans: &[(usize, usize)],
    reduce: ScoreReduce,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spans.len());
    for &(start, end) in spans {
        if end > char_scores.len() || start >= end {
            return Err(TokenizerError::SpanOutOfRange {
                start,
                end,
                len: char_scores.len(),
            });
        }
        let slice = &char_scores[start..end];
        let score = match reduce {
            ScoreReduce::Min => slice.iter().cloned().fold(f64::INFINITY, f64::min),
            ScoreReduce::Mean => slice.iter().sum::<f64>() / slice.len() as f64,
        };
        out.push(score);
    }
    Ok(out)
}

/// Encode noisy text and attach reduced token scores.
pub fn encode_with_scores(
    text: &str,
    char_scores: &[f64],
    vocab: &BpeVocab,
    reduce: ScoreReduce,
) -> Result<TokenizedSentence> {
    let mut sent = encode(text, vocab);
    sent.token_scores = Some(align_scores(char_scores, &sent.spans, reduce)?);
    Ok(sent)
}

/// Confidence-score quantizer. The three modes trade resolution for
/// trainable-weight count:
///
/// - mode 101: buckets `0..=100`, `round(100 * s)`
/// - mode 5: half-open fifths `[0,0.2) -> 1` through `[0.8,1.0] -> 5`
/// - mode 2: `s <= threshold -> 0`, else `1` (not-confident vs confident)
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfQuantizer {
    pub mode: QuantizeMode,
    /// Mode-2 decision threshold.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    Centi,
    Fifths,
    Binary,
}

impl ConfQuantizer {
    pub fn new(mode: QuantizeMode) -> ConfQuantizer {
        ConfQuantizer {
            mode,
            threshold: 0.8,
        }
    }

    /// Quantizer for a confidence vocabulary size of 101, 5, or 2.
    pub fn from_vocab_size(size: usize) -> Option<ConfQuantizer> {
        match size {
            101 => Some(ConfQuantizer::new(QuantizeMode::Centi)),
            5 => Some(ConfQuantizer::new(QuantizeMode::Fifths)),
            2 => Some(ConfQuantizer::new(QuantizeMode::Binary)),
            _ => None,
        }
    }

    /// Number of embedding rows this mode needs.
    pub fn vocab_size(&self) -> usize {
        match self.mode {
            QuantizeMode::Centi => 101,
            QuantizeMode::Fifths => 5,
            QuantizeMode::Binary => 2,
        }
    }

    /// Bucket id for a score in [0,1]. Interval boundaries carry a 1e-9
    /// guard so float noise around a decimal boundary cannot flip the bucket.
    pub fn quantize(&self, score: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&score) || score.is_nan() {
            return Err(TokenizerError::ScoreOutOfRange(score));
        }
        Ok(match self.mode {
            QuantizeMode::Centi => score_centi_bucket(score),
            QuantizeMode::Fifths => {
                if score < 0.2 - 1e-9 {
                    1
                } else if score < 0.4 - 1e-9 {
                    2
                } else if score < 0.6 - 1e-9 {
                    3
                } else if score < 0.8 - 1e-9 {
                    4
                } else {
                    5
                }
            }
            QuantizeMode::Binary => {
                if score <= self.threshold + 1e-9 {
                    0
                } else {
                    1
                }
            }
        })
    }

    /// Embedding row for a bucket; mode 5 buckets are 1-based.
    pub fn row_of(&self, bucket: usize) -> Result<usize> {
        self.check_bucket(bucket)?;
        Ok(match self.mode {
            QuantizeMode::Fifths => bucket - 1,
            _ => bucket,
        })
    }

    /// Bucket of an embedding row; inverse of [`Self::row_of`].
    pub fn bucket_of_row(&self, row: usize) -> usize {
        match self.mode {
            QuantizeMode::Fifths => row + 1,
            _ => row,
        }
    }

    /// Representative score for a bucket, used to seed embedding rows: the
    /// bucket's nominal value (mode 101) or its interval midpoint.
    pub fn representative(&self, bucket: usize) -> Result<f64> {
        self.check_bucket(bucket)?;
        Ok(match self.mode {
            QuantizeMode::Centi => bucket as f64 / 100.0,
            QuantizeMode::Fifths => match bucket {
                1 => 0.1,
                2 => 0.3,
                3 => 0.5,
                4 => 0.7,
                _ => 0.9,
            },
            QuantizeMode::Binary => {
                if bucket == 0 {
                    0.4
                } else {
                    0.9
                }
            }
        })
    }

    fn check_bucket(&self, bucket: usize) -> Result<()> {
        let ok = match self.mode {
            QuantizeMode::Centi => bucket <= 100,
            QuantizeMode::Fifths => (1..=5).contains(&bucket),
            QuantizeMode::Binary => bucket <= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(TokenizerError::BadBucket {
                bucket,
                mode: self.vocab_size(),
            })
        }
    }
}

/// Persist a vocabulary as a deterministic, diffable text file: a header
/// with the target size, the specials, the base characters (escaped), then
/// the merges one per line in training order.
pub fn save_vocab(vocab: &BpeVocab, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_vocab(BufWriter::new(file), vocab)
}

pub fn write_vocab<W: Write>(mut w: W, vocab: &BpeVocab) -> Result<()> {
    writeln!(w, "ocrmend-bpe v1 target_size={}", vocab.target_size)?;
    for s in SPECIALS {
        writeln!(w, "special {s}")?;
    }
    for &c in &vocab.base_chars {
        writeln!(w, "char {}", escape_char(c))?;
    }
    for (l, r) in &vocab.merges {
        writeln!(w, "merge {} {}", escape_token(l), escape_token(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<BpeVocab> {
    let file = File::open(path)?;
    read_vocab(BufReader::new(file))
}

pub fn read_vocab<R: Read>(r: R) -> Result<BpeVocab> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| TokenizerError::MalformedVocab("empty file".into()))??;
    let target_size: usize = header
        .strip_prefix("ocrmend-bpe v1 target_size=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TokenizerError::MalformedVocab(format!("bad header: {header}")))?;
    let mut base_chars = Vec::new();
    let mut merges = Vec::new();
    let mut specials_seen = 0;
    for line in lines {
        let line = line?;
        if let Some(rest) = line.strip_prefix("special ") {
            if SPECIALS.get(specials_seen) != Some(&rest) {
                return Err(TokenizerError::MalformedVocab(format!(
                    "unexpected special {rest}"
                )));
            }
            specials_seen += 1;
        } else if let Some(rest) = line.strip_prefix("char ") {
            let token = unescape_token(rest)?;
            let mut chars = token.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => base_chars.push(c),
                _ => {
                    return Err(TokenizerError::MalformedVocab(format!(
                        "char line holds {token:?}"
                    )))
                }
            }
        } else if let Some(rest) = line.strip_prefix("merge ") {
            let mut parts = rest.splitn(2, ' ');
            let (Some(l), Some(r)) = (parts.next(), parts.next()) else {
                return Err(TokenizerError::MalformedVocab(format!("bad merge: {rest}")));
            };
            merges.push((unescape_token(l)?, unescape_token(r)?));
        } else if !line.trim().is_empty() {
            return Err(TokenizerError::MalformedVocab(format!(
                "unrecognized line: {line}"
            )));
        }
    }
    if specials_seen != SPECIALS.len() {
        return Err(TokenizerError::MalformedVocab("missing specials".into()));
    }
    let mut vocab = BpeVocab {
        target_size,
        base_chars,
        merges,
        token_to_id: HashMap::new(),
        id_to_token: Vec::new(),
    };
    vocab.rebuild_maps();
    Ok(vocab)
}

fn escape_char(c: char) -> String {
    if c.is_whitespace() || c.is_control() || c == '\\' {
        format!("\\u{{{:x}}}", c as u32)
    } else {
        c.to_string()
    }
}

fn escape_token(t: &str) -> String {
    let mut out = String::new();
    for c in t.chars() {
        let _ = write!(out, "{}", escape_char(c));
    }
    out
}

fn unescape_token(s: &str) -> Result<String> {
    let mut out = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        // \u{hex}
        let mut ok = chars.next() == Some('u') && chars.next() == Some('{');
        let mut hex = String::new();
        if ok {
            loop {
                match chars.next() {
                    Some('}') => break,
                    Some(h) => hex.push(h),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
        }
        let code = u32::from_str_radix(&hex, 16).ok().and_then(char::from_u32);
        match (ok, code) {
            (true, Some(c)) => out.push(c),
            _ => {
                return Err(TokenizerError::MalformedVocab(format!(
                    "bad escape in {s:?}"
                )))
            }
        }
    }
    Ok(out)
}
