//! Training: label-smoothed KL loss, Adam with an inverse-square-root
//! warmup schedule, token-budget batching, periodic dev evaluation with
//! best-checkpoint retention, plus the hyperparameter sweep and architecture
//! comparison harnesses.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Dataset;
use crate::eval;
use crate::model::{
    build_model, greedy_decode, ArchKind, ForwardCtx, ModelConfig, ModelError, Seq2Seq,
    TransformerCs,
};
use crate::tensor::checkpoint::SavedTensor;
use crate::tensor::{Tensor, TensorError};
use crate::tokenizer::{
    decode, encode, encode_with_scores, train_bpe, BpeVocab, ConfQuantizer, ScoreReduce,
    TokenizerError, BOS, EOS, PAD,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label smoothing epsilon {0} outside [0,1)")]
    BadEpsilon(f64),
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("no usable training examples")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training hyperparameters. The optimizer is Adam(0.9, 0.98, 1e-9) under
/// the inverse-square-root schedule
/// `lr = lr_factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Token budget per batch (max of source/target length per sentence).
    pub tokens_per_batch: usize,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub lr_factor: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Dev sentences greedy-decoded per CER evaluation; 0 skips CER.
    pub cer_sentences: usize,
    /// Global gradient-norm clip; recurrent models need it to stay finite.
    pub grad_clip: Option<f64>,
    /// Wall-clock budget; exceeding it stops the run with the best
    /// checkpoint retained.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tokens_per_batch: 2048,
            label_smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            warmup_steps: 4000,
            lr_factor: 1.0,
            max_steps: 1000,
            seed: 0,
            eval_every: 100,
            cer_sentences: 128,
            grad_clip: Some(1.0),
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::BadEpsilon(self.label_smoothing));
        }
        if self.tokens_per_batch == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(TrainError::BadConfig(
                "tokens_per_batch, max_steps, eval_every must be positive".into(),
            ));
        }
        if self.warmup_steps == 0 {
            return Err(TrainError::BadConfig("warmup_steps must be positive".into()));
        }
        Ok(())
    }
}

/// One dev-evaluation checkpoint row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// NaN when CER evaluation is disabled.
    pub dev_cer: f64,
    pub seconds: f64,
}

/// A tokenized training example. `conf` holds confidence embedding rows
/// (`ConfQuantizer::row_of` of the quantized bucket); `tgt` ends with EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub conf: Vec<usize>,
    pub tgt: Vec<usize>,
    pub clean: String,
}

/// Tokenize a dataset into training examples. Pairs whose source or target
/// exceed `max_len` are skipped and counted.
pub fn prepare_examples(
    ds: &Dataset,
    vocab: &BpeVocab,
    quantizer: &ConfQuantizer,
    reduce: ScoreReduce,
    max_len: usize,
) -> Result<(Vec<Example>, usize)> {
    let mut out = Vec::with_capacity(ds.pairs.len());
    let mut skipped = 0usize;
    for pair in &ds.pairs {
        let sent = encode_with_scores(&pair.noisy, &pair.scores, vocab, reduce)?;
        let scores = sent.token_scores.as_ref().expect("scores attached");
        let mut conf = Vec::with_capacity(scores.len());
        for &s in scores {
            conf.push(quantizer.row_of(quantizer.quantize(s)?)?);
        }
        let mut tgt = encode(&pair.clean, vocab).ids;
        tgt.push(EOS);
        if sent.ids.is_empty() || sent.ids.len() > max_len || tgt.len() + 1 > max_len {
            skipped += 1;
            continue;
        }
        out.push(Example {
            src: sent.ids,
            conf,
            tgt,
            clean: pair.clean.clone(),
        });
    }
    if out.is_empty() {
        return Err(TrainError::NoData);
    }
    Ok((out, skipped))
}

/// Label-smoothed target distribution: the true class gets `1 - eps`, the
/// rest of the mass spreads uniformly over the non-excluded classes.
/// Excluded class ids (PAD/BOS in training) receive zero mass.
pub fn label_smooth(
    target: usize,
    vocab_size: usize,
    eps: f64,
    excluded: &[usize],
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(TrainError::BadEpsilon(eps));
    }
    if target >= vocab_size {
        return Err(TrainError::BadConfig(format!(
            "target {target} outside vocab of {vocab_size}"
        )));
    }
    let mut row = vec![0.0; vocab_size];
    let spread = vocab_size - excluded.iter().filter(|&&e| e != target).count() - 1;
    if eps == 0.0 || spread == 0 {
        row[target] = 1.0;
        return Ok(row);
    }
    let share = eps / spread as f64;
    for (id, slot) in row.iter_mut().enumerate() {
        if id == target {
            *slot = 1.0 - eps;
        } else if !excluded.contains(&id) {
            *slot = share;
        }
    }
    Ok(row)
}

/// Smoothed target matrix and PAD mask for a target sequence.
fn build_targets(
    tgt: &[usize],
    vocab_size: usize,
    eps: f64,
) -> Result<(Tensor, Vec<bool>)> {
    let mut data = Vec::with_capacity(tgt.len() * vocab_size);
    let mut mask = Vec::with_capacity(tgt.len());
    for &id in tgt {
        data.extend(label_smooth(id, vocab_size, eps, &[PAD, BOS])?);
        mask.push(id == PAD);
    }
    Ok((Tensor::from_vec(&[tgt.len(), vocab_size], data)?, mask))
}

/// Per-token KL loss of one example under teacher forcing.
pub fn example_loss(
    model: &dyn Seq2Seq,
    ex: &Example,
    eps: f64,
    ctx: &mut ForwardCtx,
) -> Result<(Tensor, usize)> {
    let z = model.encode(&ex.src, &ex.conf, ctx)?;
    let mut prefix = Vec::with_capacity(ex.tgt.len());
    prefix.push(BOS);
    prefix.extend_from_slice(&ex.tgt[..ex.tgt.len() - 1]);
    let log_probs = model.decode_log_probs(&z, &prefix, ctx)?;
    let (targets, mask) = build_targets(&ex.tgt, model.config().vocab_size, eps)?;
    let tokens = mask.iter().filter(|&&m| !m).count();
    let loss = log_probs.kl_div(&targets, Some(&mask))?;
    Ok((loss, tokens))
}

struct Adam {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(params: Vec<Tensor>) -> Adam {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            t: 0,
        }
    }

    fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Scale all gradients down to a global norm of `max_norm`.
    fn clip_gradients(&self, max_norm: f64) {
        let mut total = 0.0;
        for p in &self.params {
            if let Some(g) = p.grad() {
                total += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = total.sqrt();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for p in &self.params {
                p.scale_grad(scale);
            }
        }
    }

    fn step(&mut self, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for j in 0..data.len() {
                    let g = grad[j];
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
                }
            });
        }
    }
}

fn noam_lr(step: usize, d_model: usize, cfg: &TrainConfig) -> f64 {
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    cfg.lr_factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    /// Loss went NaN/inf; the best checkpoint was restored.
    Diverged { step: usize },
    /// Wall-clock budget exhausted.
    OutOfBudget { step: usize },
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub step: usize,
    pub dev_loss: f64,
    pub params: Vec<SavedTensor>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    pub best: BestCheckpoint,
    pub stop: StopReason,
    /// Dev metrics of the retained (best) checkpoint.
    pub final_dev_loss: f64,
    pub final_dev_cer: f64,
    /// Per-step training losses, for convergence diagnostics.
    pub step_losses: Vec<f64>,
}

/// Deterministic length-bucketed batching: seeded shuffle, stable sort by
/// length, greedy packing under the token budget, then a seeded shuffle of
/// batch order.
fn make_batches(
    examples: &[Example],
    tokens_per_batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    use rand::Rng;
    let weight = |i: usize| examples[i].src.len().max(examples[i].tgt.len() + 1);
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx.sort_by_key(|&i| weight(i));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0usize;
    for i in idx {
        let w = weight(i);
        if !current.is_empty() && used + w > tokens_per_batch {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += w;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    for i in (1..batches.len()).rev() {
        let j = rng.random_range(0..=i);
        batches.swap(i, j);
    }
    batches
}

/// Mean per-token dev loss, dropout off.
pub fn dev_loss(model: &dyn Seq2Seq, dev: &[Example], eps: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in dev {
        let mut ctx = ForwardCtx::inference();
        let (loss, n) = example_loss(model, ex, eps, &mut ctx)?;
        total += loss.item() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(TrainError::NoData);
    }
    Ok(total / tokens as f64)
}

/// Corpus CER of greedy decodes against the clean text, over at most `cap`
/// dev sentences. NaN when `cap` is zero.
pub fn dev_cer(
    model: &dyn Seq2Seq,
    dev: &[Example],
    vocab: &BpeVocab,
    cap: usize,
) -> Result<f64> {
    if cap == 0 || dev.is_empty() {
        return Ok(f64::NAN);
    }
    let take = cap.min(dev.len());
    let mut pairs = Vec::with_capacity(take);
    for ex in &dev[..take] {
        let max_out = (ex.tgt.len() + 8).min(model.config().max_len - 1);
        let ids = greedy_decode(model, &ex.src, &ex.conf, max_out)?;
        pairs.push((decode(&ids, vocab)?, ex.clean.clone()));
    }
    eval::corpus_cer(pairs.iter().map(|(h, r)| (h.as_str(), r.as_str())))
        .map_err(|e| TrainError::BadConfig(e.to_string()))
}

/// Train `model` in place. Deterministic under a fixed seed on one thread.
/// Ends with the best-dev checkpoint restored into the model.
pub fn train(
    model: &dyn Seq2Seq,
    train_ex: &[Example],
    dev_ex: &[Example],
    vocab: &BpeVocab,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ex.is_empty() || dev_ex.is_empty() {
        return Err(TrainError::NoData);
    }
    let started = Instant::now();
    let eps = cfg.label_smoothing;
    let d_model = model.config().d_model();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(model.named_parameters().into_iter().map(|(_, t)| t).collect());

    let mut records = Vec::new();
    let mut step_losses: Vec<f64> = Vec::with_capacity(cfg.max_steps);
    // The pre-training state is the first "best" checkpoint, so a run that
    // diverges before its first evaluation still has a finite state to
    // restore.
    let mut best = BestCheckpoint {
        step: 0,
        dev_loss: dev_loss(model, dev_ex, eps)?,
        params: model.snapshot(),
    };
    let mut stop = StopReason::Completed;
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut step = 0usize;

    'outer: while step < cfg.max_steps {
        if batches.is_empty() {
            batches = make_batches(train_ex, cfg.tokens_per_batch, &mut rng);
            batches.reverse(); // consume by pop
        }
        let batch = batches.pop().expect("non-empty batch list");
        step += 1;

        optimizer.zero_grads();
        let mut weighted: Option<Tensor> = None;
        let mut tokens = 0usize;
        for &i in &batch {
            let mut ctx = ForwardCtx::training(&mut rng);
            let (loss, n) = example_loss(model, &train_ex[i], eps, &mut ctx)?;
            tokens += n;
            let term = loss.scale(n as f64);
            weighted = Some(match weighted {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let loss = weighted.expect("non-empty batch").scale(1.0 / tokens as f64);
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            stop = StopReason::Diverged { step };
            break 'outer;
        }
        step_losses.push(loss_value);
        loss.backward()?;
        if let Some(max_norm) = cfg.grad_clip {
            optimizer.clip_gradients(max_norm);
        }
        optimizer.step(noam_lr(step, d_model, cfg), cfg);

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let dl = dev_loss(model, dev_ex, eps)?;
            let dc = dev_cer(model, dev_ex, vocab, cfg.cer_sentences)?;
            let window = &step_losses[step_losses.len().saturating_sub(cfg.eval_every)..];
            let train_loss = window.iter().sum::<f64>() / window.len() as f64;
            records.push(RunRecord {
                step,
                train_loss,
                dev_loss: dl,
                dev_cer: dc,
                seconds: started.elapsed().as_secs_f64(),
            });
            if dl < best.dev_loss {
                best = BestCheckpoint {
                    step,
                    dev_loss: dl,
                    params: model.snapshot(),
                };
            }
        }
        if let Some(budget) = cfg.max_seconds {
            if started.elapsed().as_secs_f64() > budget {
                stop = StopReason::OutOfBudget { step };
                break 'outer;
            }
        }
    }

    model.load_parameters(&best.params)?;
    let final_dev_loss = best.dev_loss;
    let final_dev_cer = dev_cer(model, dev_ex, vocab, cfg.cer_sentences)?;
    Ok(TrainOutcome {
        records,
        best,
        stop,
        final_dev_loss,
        final_dev_cer,
        step_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BpeVocab,
    ConfVocab,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<SweepAxis> {
        match s {
            "bpe" => Some(SweepAxis::BpeVocab),
            "conf" => Some(SweepAxis::ConfVocab),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub bpe_size: usize,
    pub conf_size: usize,
    pub loss: f64,
    pub cer: f64,
}

/// One training run per axis value with a shared seed; rows mirror the
/// (variant, bpe size, conf size, loss, CER) reporting shape.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    axis: SweepAxis,
    values: &[usize],
    train_ds: &Dataset,
    dev_ds: &Dataset,
    base_bpe_size: usize,
    base_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    reduce: ScoreReduce,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(TrainError::BadConfig("empty sweep values".into()));
    }
    let noisy: Vec<String> = train_ds.pairs.iter().map(|p| p.noisy.clone()).collect();
    let shared_vocab = match axis {
        SweepAxis::ConfVocab => Some(train_bpe(&noisy, base_bpe_size)?),
        SweepAxis::BpeVocab => None,
    };
    let run_one = |&value: &usize| -> Result<SweepRow> {
        let vocab = match axis {
            SweepAxis::BpeVocab => train_bpe(&noisy, value)?,
            SweepAxis::ConfVocab => shared_vocab.clone().expect("shared vocab built"),
        };
        let conf_size = match axis {
            SweepAxis::BpeVocab => base_cfg.conf_vocab_size,
            SweepAxis::ConfVocab => value,
        };
        let quantizer = ConfQuantizer::from_vocab_size(conf_size).ok_or_else(|| {
            TrainError::BadConfig(format!("conf vocab size {conf_size} not one of 101, 5, 2"))
        })?;
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            conf_vocab_size: conf_size,
            ..base_cfg.clone()
        };
        let (train_ex, _) = prepare_examples(train_ds, &vocab, &quantizer, reduce, cfg.max_len)?;
        let (dev_ex, _) = prepare_examples(dev_ds, &vocab, &quantizer, reduce, cfg.max_len)?;
        let model = TransformerCs::new(&cfg, tcfg.seed)?;
        let outcome = train(&model, &train_ex, &dev_ex, &vocab, tcfg)?;
        Ok(SweepRow {
            variant: "transformer-cs".to_string(),
            bpe_size: vocab.target_size,
            conf_size,
            loss: outcome.final_dev_loss,
            cer: outcome.final_dev_cer,
        })
    };
    run_indexed(values, jobs, run_one)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub arch: ArchKind,
    pub loss: f64,
    pub cer: f64,
}

/// Train all four architectures on the same data and seed; rows come back in
/// `ArchKind::ALL` order. The plain transformer is the confidence model with
/// `d_conf = 0` at equal total width.
pub fn compare_architectures(
    train_ds: &Dataset,
    dev_ds: &Dataset,
    vocab: &BpeVocab,
    base_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    reduce: ScoreReduce,
    jobs: usize,
) -> Result<Vec<CompareRow>> {
    let quantizer = base_cfg.quantizer();
    let (train_ex, _) = prepare_examples(train_ds, vocab, &quantizer, reduce, base_cfg.max_len)?;
    let (dev_ex, _) = prepare_examples(dev_ds, vocab, &quantizer, reduce, base_cfg.max_len)?;
    let archs = ArchKind::ALL;
    let run_one = |arch: &ArchKind| -> Result<CompareRow> {
        let cfg = match arch {
            // Same d_model, zero confidence parameters.
            ArchKind::Transformer => ModelConfig {
                d_token: base_cfg.d_model(),
                d_conf: 0,
                vocab_size: vocab.len(),
                ..base_cfg.clone()
            },
            _ => ModelConfig {
                vocab_size: vocab.len(),
                ..base_cfg.clone()
            },
        };
        let model = build_model(*arch, &cfg, tcfg.seed)?;
        let outcome = train(model.as_ref(), &train_ex, &dev_ex, vocab, tcfg)?;
        Ok(CompareRow {
            arch: *arch,
            loss: outcome.final_dev_loss,
            cer: outcome.final_dev_cer,
        })
    };
    run_indexed(&archs, jobs, run_one)
}

/// Run `f` over `items`, optionally fanning out across `jobs` threads; each
/// run is self-contained and seeded, so results are identical either way.
fn run_indexed<I: Sync, O: Send>(
    items: &[I],
    jobs: usize,
    f: impl Fn(&I) -> Result<O> + Sync,
) -> Result<Vec<O>> {
    let jobs = jobs.max(1).min(items.len());
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let mut slots: Vec<Option<Result<O>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (item_chunk, slot_chunk) in items.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (item, slot) in item_chunk.iter().zip(slot_chunk.iter_mut()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled slot"))
        .collect()
}

/// CSV rows `step,train_loss,dev_loss,dev_cer,seconds`.
pub fn write_records_csv<W: std::io::Write>(mut w: W, records: &[RunRecord]) -> std::io::Result<()> {
    writeln!(w, "step,train_loss,dev_loss,dev_cer,seconds")?;
    for r in records {
        writeln!(
            w,
            "{},{:.6},{:.6},{},{:.3}",
            r.step,
            r.train_loss,
            r.dev_loss,
            fmt_cer(r.dev_cer),
            r.seconds
        )?;
    }
    Ok(())
}

/// CSV rows `variant,bpe_vocab_size,conf_vocab_size,loss,cer`.
pub fn write_sweep_csv<W: std::io::Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "variant,bpe_vocab_size,conf_vocab_size,loss,cer")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{}",
            r.variant,
            r.bpe_size,
            r.conf_size,
            r.loss,
            fmt_cer(r.cer)
        )?;
    }
    Ok(())
}

/// CSV rows `arch,seed,loss,cer`.
pub fn write_compare_csv<W: std::io::Write>(
    mut w: W,
    rows: &[(CompareRow, String)],
) -> std::io::Result<()> {
    writeln!(w, "arch,seed,loss,cer")?;
    for (r, seed) in rows {
        writeln!(w, "{},{},{:.6},{}", r.arch.as_str(), seed, r.loss, fmt_cer(r.cer))?;
    }
    Ok(())
}

fn fmt_cer(cer: f64) -> String {
    if cer.is_nan() {
        String::new()
    } else {
        format!("{cer:.6}")
    }
}
