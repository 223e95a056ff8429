//! Evaluation: Levenshtein edit counts, character error rate, token error
//! reports, attention heatmap export, and a locality diagnostic.
//!
//! Edit counts are oriented ref -> hyp: a deletion drops a reference
//! character, an insertion adds a hypothesis character. All string work is
//! over Unicode scalar values.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::model::{AttentionKind, AttentionTrace, AttnMatrix};
use crate::tokenizer::{encode, BpeVocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference text is empty")]
    EmptyReference,
    #[error("evaluation inputs misaligned: {0}")]
    AlignmentFailure(String),
    #[error("{what} {index} out of range ({extent} available)")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Substitutions, deletions, and insertions from a minimum edit alignment,
/// plus the reference length `n` in characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// One step of the optimal alignment; indices are character positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match { r: usize, hyp: usize },
    Substitute { r: usize, hyp: usize },
    /// Reference character `r` is missing from the hypothesis.
    Delete { r: usize },
    /// Hypothesis character `hyp` is extra, sitting before reference
    /// position `r_at` (which may equal the reference length).
    Insert { hyp: usize, r_at: usize },
}

/// Minimum edit counts between hypothesis and reference with unit costs. On
/// cost ties the backtrace prefers substitution, then deletion, then
/// insertion, so counts are deterministic.
pub fn levenshtein(hyp: &str, reference: &str) -> EditCounts {
    levenshtein_alignment(hyp, reference).0
}

/// Edit counts plus the alignment itself, in reference order.
///
/// Among the minimum-cost alignments the backtrace follows the one with the
/// most diagonal steps (equivalently, the most substitutions+matches). That
/// pins the (S, D, I) decomposition uniquely — length bookkeeping forces
/// `I - D = len(hyp) - len(ref)` and `S + 2D` to be constant across optimal
/// alignments — and makes the counts symmetric under swapping the arguments
/// (S stays, D and I trade places). Within that, ties prefer substitution,
/// then deletion, then insertion.
pub fn levenshtein_alignment(hyp: &str, reference: &str) -> (EditCounts, Vec<AlignOp>) {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    let (n, m) = (r.len(), h.len());
    // cost[i][j]: edits to turn reference[..i] into hyp[..j];
    // diag[i][j]: most diagonal steps among minimum-cost paths there.
    let mut cost = vec![0u32; (n + 1) * (m + 1)];
    let mut diag = vec![0u32; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        cost[idx(i, 0)] = i as u32;
    }
    for j in 0..=m {
        cost[idx(0, j)] = j as u32;
    }
    for i in 1..=n {
        for j in 1..=m {
            let c_sub = cost[idx(i - 1, j - 1)] + u32::from(r[i - 1] != h[j - 1]);
            let c_del = cost[idx(i - 1, j)] + 1;
            let c_ins = cost[idx(i, j - 1)] + 1;
            let best = c_sub.min(c_del).min(c_ins);
            let mut d = 0;
            if c_sub == best {
                d = diag[idx(i - 1, j - 1)] + 1;
            }
            if c_del == best {
                d = d.max(diag[idx(i - 1, j)]);
            }
            if c_ins == best {
                d = d.max(diag[idx(i, j - 1)]);
            }
            cost[idx(i, j)] = best;
            diag[idx(i, j)] = d;
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let mut counts = EditCounts {
        n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let c = cost[idx(i, j)];
        let d = diag[idx(i, j)];
        if i > 0 && j > 0 {
            let same = r[i - 1] == h[j - 1];
            if cost[idx(i - 1, j - 1)] + u32::from(!same) == c
                && diag[idx(i - 1, j - 1)] + 1 == d
            {
                if same {
                    ops.push(AlignOp::Match { r: i - 1, hyp: j - 1 });
                } else {
                    ops.push(AlignOp::Substitute { r: i - 1, hyp: j - 1 });
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[idx(i - 1, j)] + 1 == c && diag[idx(i - 1, j)] == d {
            ops.push(AlignOp::Delete { r: i - 1 });
            counts.deletions += 1;
            i -= 1;
            continue;
        }
        ops.push(AlignOp::Insert { hyp: j - 1, r_at: i });
        counts.insertions += 1;
        j -= 1;
    }
    ops.reverse();
    (counts, ops)
}

/// Character error rate `(S + D + I) / N` with `N` the reference length. May
/// exceed 1.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let counts = levenshtein(hyp, reference);
    Ok(counts.total() as f64 / counts.n as f64)
}

/// Corpus-level CER: total edits over total reference length
/// (micro-average), not the mean of per-sentence rates.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let mut edits = 0usize;
    let mut total_n = 0usize;
    for (hyp, reference) in pairs {
        let counts = levenshtein(hyp, reference);
        edits += counts.total();
        total_n += counts.n;
    }
    if total_n == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok(edits as f64 / total_n as f64)
}

/// Per-token correction outcomes over a labeled evaluation set: of the
/// occurrences where a token's characters were corrupted, how often did the
/// model output match the reference?
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenErrorReport {
    /// token surface -> (corrected successfully, failed to correct)
    pub per_token: BTreeMap<String, (u64, u64)>,
}

impl TokenErrorReport {
    pub fn success_total(&self) -> u64 {
        self.per_token.values().map(|v| v.0).sum()
    }

    pub fn failure_total(&self) -> u64 {
        self.per_token.values().map(|v| v.1).sum()
    }

    /// Tokens the model most often corrects, by success count.
    pub fn top_successes(&self, k: usize) -> Vec<(String, u64, u64)> {
        self.top_by(k, |(s, _)| *s)
    }

    /// Tokens the model most often fails on, by failure count.
    pub fn top_failures(&self, k: usize) -> Vec<(String, u64, u64)> {
        self.top_by(k, |(_, f)| *f)
    }

    fn top_by(&self, k: usize, key: impl Fn(&(u64, u64)) -> u64) -> Vec<(String, u64, u64)> {
        let mut rows: Vec<(String, u64, u64)> = self
            .per_token
            .iter()
            .filter(|(_, v)| key(v) > 0)
            .map(|(t, &(s, f))| (t.clone(), s, f))
            .collect();
        rows.sort_by(|a, b| {
            key(&(b.1, b.2))
                .cmp(&key(&(a.1, a.2)))
                .then_with(|| a.0.cmp(&b.0))
        });
        rows.truncate(k);
        rows
    }

    /// CSV rows `token,success,failure,success_rate`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "token,success,failure,success_rate")?;
        for (token, &(s, f)) in &self.per_token {
            let rate = s as f64 / (s + f) as f64;
            writeln!(w, "{},{s},{f},{rate:.6}", csv_field(token))?;
        }
        Ok(())
    }
}

/// Classify every reference token whose characters the noise touched as
/// corrected (model output matches the reference there) or not, aggregated
/// by token surface. Tokens come from encoding the reference with `vocab`.
pub fn token_error_report(
    outputs: &[String],
    references: &[String],
    noisy: &[String],
    vocab: &BpeVocab,
) -> Result<TokenErrorReport> {
    if outputs.len() != references.len() || noisy.len() != references.len() {
        return Err(EvalError::AlignmentFailure(format!(
            "{} outputs, {} references, {} noisy inputs",
            outputs.len(),
            references.len(),
            noisy.len()
        )));
    }
    let mut report = TokenErrorReport::default();
    for ((out, reference), noisy) in outputs.iter().zip(references).zip(noisy) {
        let n = reference.chars().count();
        let mut corrupted = vec![false; n];
        let (_, noise_align) = levenshtein_alignment(noisy, reference);
        for op in noise_align {
            match op {
                AlignOp::Substitute { r, .. } | AlignOp::Delete { r } => corrupted[r] = true,
                AlignOp::Insert { r_at, .. } => {
                    if n > 0 {
                        corrupted[r_at.min(n - 1)] = true;
                    }
                }
                AlignOp::Match { .. } => {}
            }
        }
        let mut correct = vec![false; n];
        let (_, out_align) = levenshtein_alignment(out, reference);
        for op in out_align {
            if let AlignOp::Match { r, .. } = op {
                correct[r] = true;
            }
        }
        let tokens = encode(reference, vocab);
        for (id_idx, &(start, end)) in tokens.spans.iter().enumerate() {
            if !corrupted[start..end].iter().any(|&c| c) {
                continue;
            }
            let surface = vocab
                .token(tokens.ids[id_idx])
                .unwrap_or("\u{fffd}")
                .to_string();
            let entry = report.per_token.entry(surface).or_insert((0, 0));
            if correct[start..end].iter().all(|&c| c) {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
    }
    Ok(report)
}

/// Which head to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Index(usize),
    Mean,
}

/// A labeled attention matrix ready for export.
#[derive(Debug, Clone)]
pub struct HeatmapMatrix {
    pub kind: AttentionKind,
    /// Zero-based layer index.
    pub layer: usize,
    pub values: AttnMatrix,
    /// Key token labels (columns).
    pub x_labels: Vec<String>,
    /// Query token labels (rows).
    pub y_labels: Vec<String>,
}

/// Pull one attention matrix out of a trace. `HeadSelect::Mean` averages the
/// heads elementwise, the figure-style default.
pub fn export_heatmap(
    trace: &AttentionTrace,
    kind: AttentionKind,
    layer: usize,
    head: HeadSelect,
    x_labels: &[String],
    y_labels: &[String],
) -> Result<HeatmapMatrix> {
    let layers = trace.layers(kind);
    if layer >= layers.len() {
        return Err(EvalError::IndexOutOfRange {
            what: "layer",
            index: layer,
            extent: layers.len(),
        });
    }
    let values = match head {
        HeadSelect::Mean => trace.mean_heads(kind, layer).ok_or(EvalError::IndexOutOfRange {
            what: "head",
            index: 0,
            extent: 0,
        })?,
        HeadSelect::Index(h) => trace
            .head(kind, layer, h)
            .ok_or(EvalError::IndexOutOfRange {
                what: "head",
                index: h,
                extent: layers[layer].len(),
            })?
            .clone(),
    };
    if x_labels.len() != values.cols || y_labels.len() != values.rows {
        return Err(EvalError::AlignmentFailure(format!(
            "{}x{} matrix with {} x-labels and {} y-labels",
            values.rows,
            values.cols,
            x_labels.len(),
            y_labels.len()
        )));
    }
    Ok(HeatmapMatrix {
        kind,
        layer,
        values,
        x_labels: x_labels.to_vec(),
        y_labels: y_labels.to_vec(),
    })
}

/// CSV with a header row of key labels; each body row starts with its query
/// label.
pub fn write_heatmap_csv<W: Write>(mut w: W, heatmap: &HeatmapMatrix) -> Result<()> {
    for label in &heatmap.x_labels {
        write!(w, ",{}", csv_field(label))?;
    }
    writeln!(w)?;
    for (i, label) in heatmap.y_labels.iter().enumerate() {
        write!(w, "{}", csv_field(label))?;
        for v in heatmap.values.row(i) {
            write!(w, ",{v:.6}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Binary PGM (P5) rendering, one byte per cell: `round(255 * weight)`.
pub fn write_heatmap_pgm<W: Write>(mut w: W, heatmap: &HeatmapMatrix) -> Result<()> {
    let m = &heatmap.values;
    write!(w, "P5\n{} {}\n255\n", m.cols, m.rows)?;
    let bytes: Vec<u8> = m
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Fraction of encoder self-attention mass within three positions of the
/// diagonal, averaged over every row of every head and layer. A scalar
/// diagnostic for how near-sighted the self-attention is.
pub fn self_attention_locality(trace: &AttentionTrace) -> Option<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for heads in &trace.encoder_self {
        for m in heads {
            for i in 0..m.rows {
                let row = m.row(i);
                let lo = i.saturating_sub(3);
                let hi = (i + 3).min(m.cols - 1);
                total += row[lo..=hi].iter().sum::<f64>();
                rows += 1;
            }
        }
    }
    (rows > 0).then(|| total / rows as f64)
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
