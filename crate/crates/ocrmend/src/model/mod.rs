//! Sequence-to-sequence correctors: the confidence-score transformer and the
//! recurrent baselines, behind one `Seq2Seq` contract.
//!
//! The confidence channel enters the encoder only: encoder inputs are the
//! concatenation of a token embedding (`d_token` wide) and a confidence
//! bucket embedding (`d_conf` wide). Decoder token embeddings span the full
//! `d_model = d_token + d_conf`. Setting `d_conf = 0` yields the plain
//! architecture with no confidence parameters.

mod recurrent;
mod transformer;

pub use recurrent::{CellKind, RecurrentSeq2Seq};
pub use transformer::TransformerCs;

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::checkpoint::{self, SavedTensor};
use crate::tensor::{Tensor, TensorError};
use crate::tokenizer::{ConfQuantizer, ScoreReduce, BOS, EOS, PAD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token/confidence length mismatch: {tokens} vs {confs}")]
    LengthMismatch { tokens: usize, confs: usize },
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("decoder prefix must start with BOS")]
    BadPrefix,
    #[error("empty input sequence")]
    EmptyInput,
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Hyperparameters shared by every architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token embedding width (encoder side).
    pub d_token: usize,
    /// Confidence embedding width; 0 disables the confidence channel.
    pub d_conf: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Confidence vocabulary size: 101, 5, or 2.
    pub conf_vocab_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_token: 112,
            d_conf: 16,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            d_ff: 256,
            max_len: 512,
            vocab_size: 0,
            conf_vocab_size: 101,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.d_token + self.d_conf
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model() == 0 || self.n_heads == 0 {
            return Err(ModelError::BadConfig("zero d_model or n_heads".into()));
        }
        if self.d_model() % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model(),
                self.n_heads
            )));
        }
        if self.vocab_size <= crate::tokenizer::UNK {
            return Err(ModelError::BadConfig(format!(
                "vocab_size {} leaves no room past the specials",
                self.vocab_size
            )));
        }
        if ConfQuantizer::from_vocab_size(self.conf_vocab_size).is_none() {
            return Err(ModelError::BadConfig(format!(
                "conf_vocab_size {} not one of 101, 5, 2",
                self.conf_vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn quantizer(&self) -> ConfQuantizer {
        ConfQuantizer::from_vocab_size(self.conf_vocab_size).expect("validated conf vocab size")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    TransformerCs,
    Transformer,
    Lstm2Lstm,
    Gru2Gru,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [
        ArchKind::Transformer,
        ArchKind::TransformerCs,
        ArchKind::Lstm2Lstm,
        ArchKind::Gru2Gru,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::TransformerCs => "transformer-cs",
            ArchKind::Transformer => "transformer",
            ArchKind::Lstm2Lstm => "lstm-2-lstm",
            ArchKind::Gru2Gru => "gru-2-gru",
        }
    }

    pub fn parse(s: &str) -> Option<ArchKind> {
        match s {
            "transformer-cs" => Some(ArchKind::TransformerCs),
            "transformer" => Some(ArchKind::Transformer),
            "lstm-2-lstm" | "lstm" => Some(ArchKind::Lstm2Lstm),
            "gru-2-gru" | "gru" => Some(ArchKind::Gru2Gru),
            _ => None,
        }
    }
}

/// Which attention matrices a trace entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    Source,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::EncoderSelf => "encoder-self",
            AttentionKind::DecoderSelf => "decoder-self",
            AttentionKind::Source => "source",
        }
    }
}

/// Plain row-stochastic matrix: rows are queries, columns are keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttnMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Attention weights captured during one forward pass, indexed
/// `[layer][head]`.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub encoder_self: Vec<Vec<AttnMatrix>>,
    pub decoder_self: Vec<Vec<AttnMatrix>>,
    pub source: Vec<Vec<AttnMatrix>>,
}

impl AttentionTrace {
    pub fn layers(&self, kind: AttentionKind) -> &Vec<Vec<AttnMatrix>> {
        match kind {
            AttentionKind::EncoderSelf => &self.encoder_self,
            AttentionKind::DecoderSelf => &self.decoder_self,
            AttentionKind::Source => &self.source,
        }
    }

    fn layers_mut(&mut self, kind: AttentionKind) -> &mut Vec<Vec<AttnMatrix>> {
        match kind {
            AttentionKind::EncoderSelf => &mut self.encoder_self,
            AttentionKind::DecoderSelf => &mut self.decoder_self,
            AttentionKind::Source => &mut self.source,
        }
    }

    pub(crate) fn record(&mut self, kind: AttentionKind, heads: Vec<AttnMatrix>) {
        self.layers_mut(kind).push(heads);
    }

    pub fn head(&self, kind: AttentionKind, layer: usize, head: usize) -> Option<&AttnMatrix> {
        self.layers(kind).get(layer)?.get(head)
    }

    /// Elementwise mean of the heads at `layer` (zero-based).
    pub fn mean_heads(&self, kind: AttentionKind, layer: usize) -> Option<AttnMatrix> {
        let heads = self.layers(kind).get(layer)?;
        let first = heads.first()?;
        let mut data = vec![0.0; first.data.len()];
        for h in heads {
            for (acc, v) in data.iter_mut().zip(&h.data) {
                *acc += v;
            }
        }
        let scale = 1.0 / heads.len() as f64;
        for v in &mut data {
            *v *= scale;
        }
        Some(AttnMatrix {
            rows: first.rows,
            cols: first.cols,
            data,
        })
    }
}

/// Per-call forward state: training mode, the dropout RNG, and an optional
/// attention sink.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub trace: Option<&'a mut AttentionTrace>,
}

impl ForwardCtx<'_> {
    pub fn inference() -> ForwardCtx<'static> {
        ForwardCtx {
            train: false,
            rng: None,
            trace: None,
        }
    }

    pub fn training(rng: &mut ChaCha8Rng) -> ForwardCtx<'_> {
        ForwardCtx {
            train: true,
            rng: Some(rng),
            trace: None,
        }
    }

    pub fn tracing(trace: &mut AttentionTrace) -> ForwardCtx<'_> {
        ForwardCtx {
            train: false,
            rng: None,
            trace: Some(trace),
        }
    }

    pub(crate) fn dropout(&mut self, t: &Tensor, rate: f64) -> Tensor {
        match (&mut self.rng, self.train && rate > 0.0) {
            (Some(rng), true) => t.dropout(rate, *rng),
            _ => t.clone(),
        }
    }

    pub(crate) fn record(&mut self, kind: AttentionKind, heads: Vec<AttnMatrix>) {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.record(kind, heads);
        }
    }
}

/// The common contract: encode a (tokens, confidence-buckets) pair to a
/// latent sequence and decode log-probabilities for a target prefix under
/// teacher forcing.
pub trait Seq2Seq {
    fn arch(&self) -> ArchKind;
    fn config(&self) -> &ModelConfig;

    /// `n x d` latent sequence for `n` input tokens.
    fn encode(&self, tokens: &[usize], confs: &[usize], ctx: &mut ForwardCtx) -> Result<Tensor>;

    /// `(len(prefix), vocab)` log-probabilities; row `i` predicts the token
    /// after `prefix[..=i]`. The prefix must start with BOS.
    fn decode_log_probs(
        &self,
        z: &Tensor,
        prefix: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor>;

    /// Every trainable tensor with a stable name.
    fn named_parameters(&self) -> Vec<(String, Tensor)>;

    fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Restore parameters from a checkpoint; names and shapes must match
    /// exactly.
    fn load_parameters(&self, saved: &[SavedTensor]) -> Result<()> {
        let by_name: HashMap<&str, &SavedTensor> =
            saved.iter().map(|s| (s.name.as_str(), s)).collect();
        let params = self.named_parameters();
        if by_name.len() != params.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} saved tensors for {} parameters",
                by_name.len(),
                params.len()
            )));
        }
        for (name, tensor) in params {
            let entry = by_name.get(name.as_str()).ok_or_else(|| {
                ModelError::CheckpointMismatch(format!("missing tensor {name}"))
            })?;
            if entry.shape != tensor.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "tensor {name}: shape {:?} vs {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(&entry.data)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<SavedTensor> {
        self.named_parameters()
            .iter()
            .map(|(name, t)| SavedTensor::of(name, t))
            .collect()
    }
}

/// Next-token log-probability row given a prefix: the last row of
/// [`Seq2Seq::decode_log_probs`].
pub fn decode_step(
    model: &dyn Seq2Seq,
    z: &Tensor,
    prefix: &[usize],
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let all = model.decode_log_probs(z, prefix, ctx)?;
    Ok(all.narrow(0, prefix.len() - 1, 1)?)
}

/// Greedy argmax decoding until EOS or `max_out` tokens. Deterministic: ties
/// resolve to the lowest id. PAD and BOS are never emitted.
pub fn greedy_decode(
    model: &dyn Seq2Seq,
    tokens: &[usize],
    confs: &[usize],
    max_out: usize,
) -> Result<Vec<usize>> {
    let mut ctx = ForwardCtx::inference();
    let z = model.encode(tokens, confs, &mut ctx)?;
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    for _ in 0..max_out {
        if prefix.len() >= model.config().max_len {
            break;
        }
        let row = decode_step(model, &z, &prefix, &mut ctx)?;
        let data = row.data();
        let mut best = EOS;
        let mut best_lp = f64::NEG_INFINITY;
        for (id, &lp) in data.iter().enumerate() {
            if id == PAD || id == BOS {
                continue;
            }
            if lp > best_lp {
                best_lp = lp;
                best = id;
            }
        }
        drop(data);
        if best == EOS {
            break;
        }
        out.push(best);
        prefix.push(best);
    }
    Ok(out)
}

/// Run one traced forward pass (encode + teacher-forced decode of
/// `target_ids`) and return every attention matrix.
pub fn attention_trace(
    model: &dyn Seq2Seq,
    tokens: &[usize],
    confs: &[usize],
    target_ids: &[usize],
) -> Result<AttentionTrace> {
    let mut trace = AttentionTrace::default();
    let mut ctx = ForwardCtx::tracing(&mut trace);
    let z = model.encode(tokens, confs, &mut ctx)?;
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(target_ids);
    model.decode_log_probs(&z, &prefix, &mut ctx)?;
    drop(ctx);
    Ok(trace)
}

/// Sidecar metadata that makes a checkpoint self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: ArchKind,
    pub config: ModelConfig,
    pub score_reduce: ScoreReduce,
}

pub fn build_model(arch: ArchKind, cfg: &ModelConfig, seed: u64) -> Result<Box<dyn Seq2Seq>> {
    Ok(match arch {
        ArchKind::TransformerCs | ArchKind::Transformer => {
            Box::new(TransformerCs::new(cfg, seed)?)
        }
        ArchKind::Lstm2Lstm => Box::new(RecurrentSeq2Seq::new(CellKind::Lstm, cfg, seed)?),
        ArchKind::Gru2Gru => Box::new(RecurrentSeq2Seq::new(CellKind::Gru, cfg, seed)?),
    })
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const META_FILE: &str = "model.json";

/// Write checkpoint + sidecar config into `dir`.
pub fn save_model(dir: &Path, model: &dyn Seq2Seq, meta: &ModelMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save_to_path(&dir.join(CHECKPOINT_FILE), &model.snapshot())?;
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(dir.join(META_FILE), json + "\n")?;
    Ok(())
}

/// Rebuild a model (architecture from the sidecar, weights from the
/// checkpoint).
pub fn load_model(dir: &Path) -> Result<(Box<dyn Seq2Seq>, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)
        .map_err(|e| ModelError::CheckpointMismatch(format!("bad sidecar: {e}")))?;
    let model = build_model(meta.arch, &meta.config, 0)?;
    let saved = checkpoint::load_from_path(&dir.join(CHECKPOINT_FILE))?;
    model.load_parameters(&saved)?;
    Ok((model, meta))
}

// ---- shared initialization helpers ----

pub(crate) fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::param(&[rows, cols], data).expect("sized buffer")
}

pub(crate) fn embedding_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    // Normal-ish via the central limit of uniforms keeps everything on the
    // one seeded stream.
    let std = 1.0 / (cols as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let s: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0f64)).sum();
            s * std / (4.0f64 / 3.0).sqrt()
        })
        .collect();
    Tensor::param(&[rows, cols], data).expect("sized buffer")
}

/// Confidence table rows seeded with the bucket's representative score in
/// every component; `quantizer` fixes the row-to-bucket map.
pub(crate) fn conf_embedding_init(q: &ConfQuantizer, d_conf: usize) -> Tensor {
    let rows = q.vocab_size();
    let mut data = Vec::with_capacity(rows * d_conf);
    for row in 0..rows {
        let bucket = q.bucket_of_row(row);
        let rep = q.representative(bucket).expect("row maps to valid bucket");
        data.extend(std::iter::repeat_n(rep, d_conf));
    }
    Tensor::param(&[rows, d_conf], data).expect("sized buffer")
}

/// Fixed sinusoidal positional encoding, `(max_len, d_model)`.
pub(crate) fn sinusoidal_positions(max_len: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for j in 0..d_model {
            let i = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i / d_model as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(&[max_len, d_model], data).expect("sized buffer")
}

/// `(n, n)` additive causal mask: 0 at or below the diagonal, -1e9 above.
pub(crate) fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = -1e9;
        }
    }
    Tensor::from_vec(&[n, n], data).expect("sized buffer")
}

pub(crate) fn validate_encoder_input(
    cfg: &ModelConfig,
    tokens: &[usize],
    confs: &[usize],
) -> Result<()> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() != confs.len() {
        return Err(ModelError::LengthMismatch {
            tokens: tokens.len(),
            confs: confs.len(),
        });
    }
    if tokens.len() > cfg.max_len {
        return Err(ModelError::TooLong {
            len: tokens.len(),
            max_len: cfg.max_len,
        });
    }
    Ok(())
}

pub(crate) fn validate_prefix(cfg: &ModelConfig, prefix: &[usize]) -> Result<()> {
    if prefix.first() != Some(&BOS) {
        return Err(ModelError::BadPrefix);
    }
    if prefix.len() > cfg.max_len {
        return Err(ModelError::TooLong {
            len: prefix.len(),
            max_len: cfg.max_len,
        });
    }
    Ok(())
}
