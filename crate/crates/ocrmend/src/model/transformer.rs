//! Post-norm encoder/decoder transformer with the confidence-score channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{
    causal_mask, conf_embedding_init, embedding_init, sinusoidal_positions, validate_encoder_input,
    validate_prefix, xavier_uniform, ArchKind, AttentionKind, AttnMatrix, ForwardCtx, ModelConfig,
    Result, Seq2Seq,
};

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Linear {
        Linear {
            w: xavier_uniform(inp, out, rng),
            b: Tensor::param(&[out], vec![0.0; out]).expect("sized buffer"),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.add_bias(&self.b)?)
    }

    fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{name}.w"), self.w.clone()));
        out.push((format!("{name}.b"), self.b.clone()));
    }
}

struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(width: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::param(&[width], vec![1.0; width]).expect("sized buffer"),
            bias: Tensor::param(&[width], vec![0.0; width]).expect("sized buffer"),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&self.gain, &self.bias)?)
    }

    fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{name}.gain"), self.gain.clone()));
        out.push((format!("{name}.bias"), self.bias.clone()));
    }
}

struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    fn new(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> MultiHeadAttention {
        MultiHeadAttention {
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
            n_heads,
        }
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys_values: &Tensor,
        mask: Option<&Tensor>,
        dropout: f64,
        sink: AttentionKind,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let d_model = queries.shape()[1];
        let dk = d_model / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.wq.forward(queries)?;
        let k = self.wk.forward(keys_values)?;
        let v = self.wv.forward(keys_values)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut recorded = ctx.trace.is_some().then(Vec::new);
        for h in 0..self.n_heads {
            let qh = q.narrow(1, h * dk, dk)?;
            let kh = k.narrow(1, h * dk, dk)?;
            let vh = v.narrow(1, h * dk, dk)?;
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let attn = scores.softmax()?;
            if let Some(rec) = recorded.as_mut() {
                rec.push(AttnMatrix {
                    rows: attn.shape()[0],
                    cols: attn.shape()[1],
                    data: attn.to_vec(),
                });
            }
            let attn = ctx.dropout(&attn, dropout);
            heads.push(attn.matmul(&vh)?);
        }
        if let Some(rec) = recorded {
            ctx.record(sink, rec);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        self.wo.forward(&Tensor::concat(&refs, 1)?)
    }

    fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.collect(&format!("{name}.wq"), out);
        self.wk.collect(&format!("{name}.wk"), out);
        self.wv.collect(&format!("{name}.wv"), out);
        self.wo.collect(&format!("{name}.wo"), out);
    }
}

struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn new(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> FeedForward {
        FeedForward {
            lin1: Linear::new(d_model, d_ff, rng),
            lin2: Linear::new(d_ff, d_model, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.relu())
    }

    fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        self.lin1.collect(&format!("{name}.lin1"), out);
        self.lin2.collect(&format!("{name}.lin2"), out);
    }
}

struct EncoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    src_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// The confidence-score transformer. With `d_conf = 0` the confidence table
/// is empty and the model degenerates to a plain transformer.
pub struct TransformerCs {
    cfg: ModelConfig,
    tok_embed: Tensor,
    conf_embed: Tensor,
    dec_embed: Tensor,
    pos_enc: Tensor,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
    out_proj: Linear,
}

impl TransformerCs {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<TransformerCs> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_model = cfg.d_model();
        let quantizer = cfg.quantizer();
        let enc_layers = (0..cfg.n_enc_layers)
            .map(|_| EncoderLayer {
                self_attn: MultiHeadAttention::new(d_model, cfg.n_heads, &mut rng),
                norm1: LayerNorm::new(d_model),
                ff: FeedForward::new(d_model, cfg.d_ff, &mut rng),
                norm2: LayerNorm::new(d_model),
            })
            .collect();
        let dec_layers = (0..cfg.n_dec_layers)
            .map(|_| DecoderLayer {
                self_attn: MultiHeadAttention::new(d_model, cfg.n_heads, &mut rng),
                norm1: LayerNorm::new(d_model),
                src_attn: MultiHeadAttention::new(d_model, cfg.n_heads, &mut rng),
                norm2: LayerNorm::new(d_model),
                ff: FeedForward::new(d_model, cfg.d_ff, &mut rng),
                norm3: LayerNorm::new(d_model),
            })
            .collect();
        Ok(TransformerCs {
            tok_embed: embedding_init(cfg.vocab_size, cfg.d_token, &mut rng),
            conf_embed: conf_embedding_init(&quantizer, cfg.d_conf),
            dec_embed: embedding_init(cfg.vocab_size, d_model, &mut rng),
            pos_enc: sinusoidal_positions(cfg.max_len, d_model),
            enc_layers,
            dec_layers,
            out_proj: Linear::new(d_model, cfg.vocab_size, &mut rng),
            cfg: cfg.clone(),
        })
    }

    /// The confidence embedding table, `(conf_vocab_size, d_conf)`.
    pub fn conf_embedding(&self) -> &Tensor {
        &self.conf_embed
    }

    /// Zero the output projection; handy for uniform-distribution checks.
    pub fn zero_output_projection(&self) {
        self.out_proj.w.update_data(|d| d.fill(0.0));
        self.out_proj.b.update_data(|d| d.fill(0.0));
    }

    /// Token+confidence embedding scaled by sqrt(d_model) so the added
    /// positional encoding does not dominate the token signal.
    fn embed_inputs(&self, tokens: &[usize], confs: &[usize]) -> Result<Tensor> {
        let tok = self.tok_embed.embedding_lookup(tokens)?;
        let embedded = if self.cfg.d_conf == 0 {
            tok
        } else {
            let conf = self.conf_embed.embedding_lookup(confs)?;
            Tensor::concat(&[&tok, &conf], 1)?
        };
        Ok(embedded.scale((self.cfg.d_model() as f64).sqrt()))
    }
}

impl Seq2Seq for TransformerCs {
    fn arch(&self) -> ArchKind {
        if self.cfg.d_conf == 0 {
            ArchKind::Transformer
        } else {
            ArchKind::TransformerCs
        }
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn encode(&self, tokens: &[usize], confs: &[usize], ctx: &mut ForwardCtx) -> Result<Tensor> {
        validate_encoder_input(&self.cfg, tokens, confs)?;
        let n = tokens.len();
        let rate = self.cfg.dropout;
        let embedded = self.embed_inputs(tokens, confs)?;
        let positioned = embedded.add(&self.pos_enc.narrow(0, 0, n)?)?;
        let mut x = ctx.dropout(&positioned, rate);
        for layer in &self.enc_layers {
            let attended = layer.self_attn.forward(
                &x,
                &x,
                None,
                rate,
                AttentionKind::EncoderSelf,
                ctx,
            )?;
            x = layer.norm1.forward(&x.add(&ctx.dropout(&attended, rate))?)?;
            let ff = layer.ff.forward(&x)?;
            x = layer.norm2.forward(&x.add(&ctx.dropout(&ff, rate))?)?;
        }
        Ok(x)
    }

    fn decode_log_probs(
        &self,
        z: &Tensor,
        prefix: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        validate_prefix(&self.cfg, prefix)?;
        let n = prefix.len();
        let rate = self.cfg.dropout;
        let mask = causal_mask(n);
        let embedded = self
            .dec_embed
            .embedding_lookup(prefix)?
            .scale((self.cfg.d_model() as f64).sqrt())
            .add(&self.pos_enc.narrow(0, 0, n)?)?;
        let mut x = ctx.dropout(&embedded, rate);
        for layer in &self.dec_layers {
            let attended = layer.self_attn.forward(
                &x,
                &x,
                Some(&mask),
                rate,
                AttentionKind::DecoderSelf,
                ctx,
            )?;
            x = layer.norm1.forward(&x.add(&ctx.dropout(&attended, rate))?)?;
            let attended =
                layer
                    .src_attn
                    .forward(&x, z, None, rate, AttentionKind::Source, ctx)?;
            x = layer.norm2.forward(&x.add(&ctx.dropout(&attended, rate))?)?;
            let ff = layer.ff.forward(&x)?;
            x = layer.norm3.forward(&x.add(&ctx.dropout(&ff, rate))?)?;
        }
        Ok(self.out_proj.forward(&x)?.log_softmax()?)
    }

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("tok_embed".to_string(), self.tok_embed.clone()));
        if self.cfg.d_conf > 0 {
            out.push(("conf_embed".to_string(), self.conf_embed.clone()));
        }
        out.push(("dec_embed".to_string(), self.dec_embed.clone()));
        for (i, layer) in self.enc_layers.iter().enumerate() {
            let base = format!("enc.{i}");
            layer.self_attn.collect(&format!("{base}.self_attn"), &mut out);
            layer.norm1.collect(&format!("{base}.norm1"), &mut out);
            layer.ff.collect(&format!("{base}.ff"), &mut out);
            layer.norm2.collect(&format!("{base}.norm2"), &mut out);
        }
        for (i, layer) in self.dec_layers.iter().enumerate() {
            let base = format!("dec.{i}");
            layer.self_attn.collect(&format!("{base}.self_attn"), &mut out);
            layer.norm1.collect(&format!("{base}.norm1"), &mut out);
            layer.src_attn.collect(&format!("{base}.src_attn"), &mut out);
            layer.norm2.collect(&format!("{base}.norm2"), &mut out);
            layer.ff.collect(&format!("{base}.ff"), &mut out);
            layer.norm3.collect(&format!("{base}.norm3"), &mut out);
        }
        self.out_proj.collect("out_proj", &mut out);
        out
    }
}
