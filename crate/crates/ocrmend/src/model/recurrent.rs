//! Two-layer recurrent encoder/decoder baselines with additive attention.
//!
//! The hidden width is solved at construction time so the total parameter
//! count lands within ±10% of a reference transformer built from the same
//! config, keeping architecture comparisons capacity-matched. The confidence
//! channel is concatenated onto encoder inputs exactly as in the
//! transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{
    conf_embedding_init, embedding_init, validate_encoder_input, validate_prefix, xavier_uniform,
    ArchKind, AttentionKind, AttnMatrix, ForwardCtx, ModelConfig, ModelError, Result, Seq2Seq,
    TransformerCs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

struct RnnCell {
    kind: CellKind,
    hidden: usize,
    w_x: Tensor,
    w_h: Tensor,
    /// `(1, gates*hidden)` so gate rows add directly.
    b: Tensor,
}

struct CellState {
    h: Tensor,
    /// LSTM cell state; unused for GRU.
    c: Tensor,
}

impl RnnCell {
    fn new(kind: CellKind, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> RnnCell {
        let gates = kind.gates();
        let mut bias = vec![0.0; gates * hidden];
        if kind == CellKind::Lstm {
            // Forget-gate bias starts at 1 so early gradients flow.
            bias[hidden..2 * hidden].fill(1.0);
        }
        RnnCell {
            kind,
            hidden,
            w_x: xavier_uniform(input, gates * hidden, rng),
            w_h: xavier_uniform(hidden, gates * hidden, rng),
            b: Tensor::param(&[1, gates * hidden], bias).expect("sized buffer"),
        }
    }

    fn initial_state(&self) -> CellState {
        CellState {
            h: Tensor::zeros(&[1, self.hidden]),
            c: Tensor::zeros(&[1, self.hidden]),
        }
    }

    /// One step: `x` is `(1, input)`, returns the new state.
    fn step(&self, x: &Tensor, state: &CellState) -> Result<CellState> {
        let h = self.hidden;
        match self.kind {
            CellKind::Lstm => {
                let gates = x
                    .matmul(&self.w_x)?
                    .add(&state.h.matmul(&self.w_h)?)?
                    .add(&self.b)?;
                let i = gates.narrow(1, 0, h)?.sigmoid();
                let f = gates.narrow(1, h, h)?.sigmoid();
                let g = gates.narrow(1, 2 * h, h)?.tanh();
                let o = gates.narrow(1, 3 * h, h)?.sigmoid();
                let c = f.mul(&state.c)?.add(&i.mul(&g)?)?;
                let hx = o.mul(&c.tanh())?;
                Ok(CellState { h: hx, c })
            }
            CellKind::Gru => {
                // The reset gate scales only the recurrent part of the
                // candidate.
                let xg = x.matmul(&self.w_x)?.add(&self.b)?;
                let hg = state.h.matmul(&self.w_h)?;
                let pre = xg.add(&hg)?;
                let r = pre.narrow(1, 0, h)?.sigmoid();
                let z = pre.narrow(1, h, h)?.sigmoid();
                let n = xg
                    .narrow(1, 2 * h, h)?
                    .add(&r.mul(&hg.narrow(1, 2 * h, h)?)?)?
                    .tanh();
                let one = Tensor::full(&[1, h], 1.0);
                let hx = one.sub(&z)?.mul(&n)?.add(&z.mul(&state.h)?)?;
                Ok(CellState { h: hx, c: state.c.clone() })
            }
        }
    }

    fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{name}.w_x"), self.w_x.clone()));
        out.push((format!("{name}.w_h"), self.w_h.clone()));
        out.push((format!("{name}.b"), self.b.clone()));
    }
}

/// Two-layer recurrent seq2seq with Bahdanau-style additive attention from
/// the decoder onto the encoder states.
pub struct RecurrentSeq2Seq {
    cfg: ModelConfig,
    kind: CellKind,
    hidden: usize,
    tok_embed: Tensor,
    conf_embed: Tensor,
    dec_embed: Tensor,
    enc1: RnnCell,
    enc2: RnnCell,
    dec1: RnnCell,
    dec2: RnnCell,
    attn_dec: Tensor,
    attn_enc: Tensor,
    attn_v: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl RecurrentSeq2Seq {
    /// Build with the hidden width matched to a same-config transformer's
    /// parameter count.
    pub fn new(kind: CellKind, cfg: &ModelConfig, seed: u64) -> Result<RecurrentSeq2Seq> {
        cfg.validate()?;
        let target = TransformerCs::new(cfg, 0)?.parameter_count();
        let hidden = solve_hidden(kind, cfg, target);
        let got = param_count(kind, cfg, hidden);
        let ratio = got as f64 / target as f64;
        if !(0.9..=1.1).contains(&ratio) {
            return Err(ModelError::BadConfig(format!(
                "no hidden width matches transformer parameter count within 10% \
                 (best {got} vs {target})"
            )));
        }
        Ok(Self::with_hidden(kind, cfg, hidden, seed))
    }

    pub fn with_hidden(kind: CellKind, cfg: &ModelConfig, hidden: usize, seed: u64) -> RecurrentSeq2Seq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_model = cfg.d_model();
        let quantizer = cfg.quantizer();
        RecurrentSeq2Seq {
            kind,
            hidden,
            tok_embed: embedding_init(cfg.vocab_size, cfg.d_token, &mut rng),
            conf_embed: conf_embedding_init(&quantizer, cfg.d_conf),
            dec_embed: embedding_init(cfg.vocab_size, d_model, &mut rng),
            enc1: RnnCell::new(kind, d_model, hidden, &mut rng),
            enc2: RnnCell::new(kind, hidden, hidden, &mut rng),
            dec1: RnnCell::new(kind, d_model, hidden, &mut rng),
            dec2: RnnCell::new(kind, hidden, hidden, &mut rng),
            attn_dec: xavier_uniform(hidden, hidden, &mut rng),
            attn_enc: xavier_uniform(hidden, hidden, &mut rng),
            attn_v: xavier_uniform(hidden, 1, &mut rng),
            out_w: xavier_uniform(2 * hidden, cfg.vocab_size, &mut rng),
            out_b: Tensor::param(&[cfg.vocab_size], vec![0.0; cfg.vocab_size])
                .expect("sized buffer"),
            cfg: cfg.clone(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn embed_inputs(&self, tokens: &[usize], confs: &[usize]) -> Result<Tensor> {
        let tok = self.tok_embed.embedding_lookup(tokens)?;
        if self.cfg.d_conf == 0 {
            return Ok(tok);
        }
        let conf = self.conf_embed.embedding_lookup(confs)?;
        Ok(Tensor::concat(&[&tok, &conf], 1)?)
    }

    /// Additive attention of decoder state `s` over encoder states: weights
    /// `softmax(v^T tanh(W_dec s + W_enc h_t))`, context `alpha @ H`.
    fn attend(&self, s: &Tensor, enc_states: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = enc_states.shape()[0];
        let query = s.matmul(&self.attn_dec)?.repeat_rows(n)?;
        let energy = enc_states
            .matmul(&self.attn_enc)?
            .add(&query)?
            .tanh()
            .matmul(&self.attn_v)?; // (n, 1)
        let alpha = energy.transpose()?.softmax()?; // (1, n)
        let context = alpha.matmul(enc_states)?; // (1, hidden)
        Ok((alpha, context))
    }
}

impl Seq2Seq for RecurrentSeq2Seq {
    fn arch(&self) -> ArchKind {
        match self.kind {
            CellKind::Lstm => ArchKind::Lstm2Lstm,
            CellKind::Gru => ArchKind::Gru2Gru,
        }
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn encode(&self, tokens: &[usize], confs: &[usize], ctx: &mut ForwardCtx) -> Result<Tensor> {
        validate_encoder_input(&self.cfg, tokens, confs)?;
        let rate = self.cfg.dropout;
        let embedded = ctx.dropout(&self.embed_inputs(tokens, confs)?, rate);
        let n = tokens.len();
        let mut s1 = self.enc1.initial_state();
        let mut s2 = self.enc2.initial_state();
        let mut rows = Vec::with_capacity(n);
        for t in 0..n {
            let x = embedded.narrow(0, t, 1)?;
            s1 = self.enc1.step(&x, &s1)?;
            s2 = self.enc2.step(&s1.h, &s2)?;
            rows.push(s2.h.clone());
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }

    fn decode_log_probs(
        &self,
        z: &Tensor,
        prefix: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        validate_prefix(&self.cfg, prefix)?;
        let rate = self.cfg.dropout;
        let embedded = ctx.dropout(&self.dec_embed.embedding_lookup(prefix)?, rate);
        let mut s1 = self.dec1.initial_state();
        let mut s2 = self.dec2.initial_state();
        let mut logit_rows = Vec::with_capacity(prefix.len());
        let mut alphas = ctx.trace.is_some().then(Vec::new);
        for t in 0..prefix.len() {
            let x = embedded.narrow(0, t, 1)?;
            s1 = self.dec1.step(&x, &s1)?;
            s2 = self.dec2.step(&s1.h, &s2)?;
            let (alpha, context) = self.attend(&s2.h, z)?;
            if let Some(list) = alphas.as_mut() {
                list.push(alpha.to_vec());
            }
            let features = Tensor::concat(&[&s2.h, &context], 1)?;
            let features = ctx.dropout(&features, rate);
            logit_rows.push(features.matmul(&self.out_w)?.add_bias(&self.out_b)?);
        }
        if let Some(list) = alphas {
            let cols = z.shape()[0];
            let data: Vec<f64> = list.concat();
            ctx.record(
                AttentionKind::Source,
                vec![AttnMatrix {
                    rows: prefix.len(),
                    cols,
                    data,
                }],
            );
        }
        let refs: Vec<&Tensor> = logit_rows.iter().collect();
        Ok(Tensor::concat(&refs, 0)?.log_softmax()?)
    }

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("tok_embed".to_string(), self.tok_embed.clone()));
        if self.cfg.d_conf > 0 {
            out.push(("conf_embed".to_string(), self.conf_embed.clone()));
        }
        out.push(("dec_embed".to_string(), self.dec_embed.clone()));
        self.enc1.collect("enc1", &mut out);
        self.enc2.collect("enc2", &mut out);
        self.dec1.collect("dec1", &mut out);
        self.dec2.collect("dec2", &mut out);
        out.push(("attn.dec".to_string(), self.attn_dec.clone()));
        out.push(("attn.enc".to_string(), self.attn_enc.clone()));
        out.push(("attn.v".to_string(), self.attn_v.clone()));
        out.push(("out.w".to_string(), self.out_w.clone()));
        out.push(("out.b".to_string(), self.out_b.clone()));
        out
    }
}

/// Closed-form parameter count for a hidden width, mirroring the struct
/// above.
fn param_count(kind: CellKind, cfg: &ModelConfig, h: usize) -> usize {
    let g = kind.gates();
    let d = cfg.d_model();
    let v = cfg.vocab_size;
    let embeddings = v * cfg.d_token
        + if cfg.d_conf > 0 { cfg.conf_vocab_size * cfg.d_conf } else { 0 }
        + v * d;
    let cell = |input: usize| input * g * h + h * g * h + g * h;
    let attn = 2 * h * h + h;
    let out = 2 * h * v + v;
    embeddings + cell(d) + cell(h) + cell(d) + cell(h) + attn + out
}

fn solve_hidden(kind: CellKind, cfg: &ModelConfig, target: usize) -> usize {
    let mut best = 1;
    let mut best_gap = usize::MAX;
    for h in 1..=4096 {
        let count = param_count(kind, cfg, h);
        let gap = count.abs_diff(target);
        if gap < best_gap {
            best = h;
            best_gap = gap;
        }
        if count > target {
            break;
        }
    }
    best
}
