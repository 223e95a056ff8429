//! Desk-scale toolkit for training and evaluating a confidence-aware
//! sequence-to-sequence corrector for OCR output.
//!
//! OCR engines emit a per-character confidence score alongside the recognized
//! text. This crate treats that score as a first-class input channel: a
//! corrector model reads the noisy text together with its scores and emits
//! the cleaned text. The pipeline stages map onto the modules below:
//!
//! - [`corpus`] — paired noisy/score/clean records: JSONL I/O, validation,
//!   seeded splitting, summary statistics.
//! - [`noiser`] — synthetic corpus generation: seeded remove/insert/replace
//!   edits over clean text plus sampled confidence scores.
//! - [`tokenizer`] — BPE subword vocabulary, score-to-token alignment, and
//!   confidence-score quantization.
//! - [`tensor`] — a minimal dense `f64` tensor engine with reverse-mode
//!   automatic differentiation.
//! - [`model`] — the confidence-score transformer plus LSTM/GRU baselines.
//! - [`trainer`] — label smoothing, Adam with warmup schedule, the training
//!   loop, hyperparameter sweeps, and architecture comparison.
//! - [`eval`] — Levenshtein edit counts, character error rate, token error
//!   reports, and attention heatmap export.
//! - [`synth`] — a tiny synthetic word-language generator used by the test
//!   suite and for demo pipelines.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod noiser;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

mod util;
