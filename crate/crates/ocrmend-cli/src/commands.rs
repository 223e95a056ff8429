//! Subcommand implementations and exit-code policy.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};

use ocrmend::corpus::{self, CorpusError, Dataset};
use ocrmend::eval::{self, EvalError, HeadSelect};
use ocrmend::model::{
    attention_trace, greedy_decode, load_model, save_model, ArchKind, AttentionKind, ModelConfig,
    ModelError, ModelMeta, Seq2Seq,
};
use ocrmend::noiser::{self, NoiseError};
use ocrmend::tensor::TensorError;
use ocrmend::tokenizer::{
    self, BpeVocab, ConfQuantizer, ScoreReduce, TokenizerError,
};
use ocrmend::trainer::{self, StopReason, TrainConfig, TrainError};

use crate::config::{ConfigFile, Merged};
use crate::{
    AttnArgs, BpeTrainArgs, Cli, Command, CompareArgs, CorrectArgs, EvalArgs, ModelFlags,
    NoiseArgs, ReportArgs, SweepArgs, TrainArgs, TrainFlags,
};

/// A problem with how the tool was invoked, as opposed to the data or the
/// run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

/// Training crossed into NaN; artifacts up to the last good checkpoint were
/// written.
#[derive(Debug)]
pub struct DivergedError {
    pub step: usize,
}

impl std::fmt::Display for DivergedError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training diverged at step {}", self.step)
    }
}

impl std::error::Error for DivergedError {}

pub fn classify_exit(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let code = if cause.downcast_ref::<UsageError>().is_some() {
            Some(1)
        } else if cause.downcast_ref::<DivergedError>().is_some() {
            Some(3)
        } else if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::BadEpsilon(_) | TrainError::BadConfig(_) => Some(1),
                TrainError::NoData => Some(2),
                // Wrapped causes classify themselves further down the chain.
                _ => None,
            }
        } else if let Some(e) = cause.downcast_ref::<ModelError>() {
            match e {
                ModelError::BadConfig(_) => Some(1),
                ModelError::Tensor(_) | ModelError::Io(_) => None,
                _ => Some(2),
            }
        } else if let Some(e) = cause.downcast_ref::<NoiseError>() {
            match e {
                NoiseError::BadConfig(_) => Some(1),
                _ => Some(2),
            }
        } else if cause.downcast_ref::<CorpusError>().is_some()
            || cause.downcast_ref::<TokenizerError>().is_some()
            || cause.downcast_ref::<EvalError>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            Some(2)
        } else if cause.downcast_ref::<TensorError>().is_some() {
            Some(3)
        } else if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            match io.kind() {
                std::io::ErrorKind::NotFound => Some(2),
                _ => Some(3),
            }
        } else {
            None
        };
        if let Some(code) = code {
            return code;
        }
    }
    3
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.config {
        Some(path) => Some(ConfigFile::load(path).map_err(|e| anyhow!(UsageError(format!("{e:#}"))))?),
        None => None,
    };
    let mut merged = Merged::from_file(file.as_ref())
        .map_err(|e| anyhow!(UsageError(format!("{e:#}"))))?;
    if let Some(seed) = cli.seed {
        merged.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        merged.jobs = jobs.max(1);
    }
    match cli.command {
        Command::Noise(args) => cmd_noise(args, merged),
        Command::BpeTrain(args) => cmd_bpe_train(args, merged),
        Command::Train(args) => cmd_train(args, merged),
        Command::Correct(args) => cmd_correct(args, merged),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args, merged),
        Command::Compare(args) => cmd_compare(args, merged),
        Command::Attn(args) => cmd_attn(args, merged),
        Command::Report(args) => cmd_report(args, merged),
    }
}

// ---- shared helpers ----

fn apply_model_flags(merged: &mut Merged, flags: &ModelFlags) -> Result<()> {
    if let Some(text) = &flags.arch {
        merged.arch = ArchKind::parse(text)
            .ok_or_else(|| anyhow!(UsageError(format!("unknown architecture {text:?}"))))?;
    }
    macro_rules! over {
        ($($field:ident),*) => { $( if let Some(v) = flags.$field { merged.$field = v; } )* };
    }
    over!(d_token, d_conf, n_heads, enc_layers, dec_layers, d_ff, max_len, conf_vocab, dropout);
    Ok(())
}

fn apply_train_flags(merged: &mut Merged, flags: &TrainFlags) -> Result<()> {
    macro_rules! over {
        ($($field:ident),*) => { $( if let Some(v) = flags.$field { merged.$field = v; } )* };
    }
    over!(
        max_steps,
        tokens_per_batch,
        label_smoothing,
        warmup,
        lr_factor,
        eval_every,
        cer_sentences
    );
    if flags.max_seconds.is_some() {
        merged.max_seconds = flags.max_seconds;
    }
    if let Some(text) = &flags.score_reduce {
        merged.score_reduce = ScoreReduce::parse(text)
            .ok_or_else(|| anyhow!(UsageError(format!("unknown score reduction {text:?}"))))?;
    }
    Ok(())
}

/// Model config from the merged settings; the plain transformer folds the
/// confidence width into the token width so total capacity stays equal.
fn model_config(merged: &Merged, vocab_size: usize) -> ModelConfig {
    let (d_token, d_conf) = if merged.arch == ArchKind::Transformer {
        (merged.d_token + merged.d_conf, 0)
    } else {
        (merged.d_token, merged.d_conf)
    };
    ModelConfig {
        d_token,
        d_conf,
        n_heads: merged.n_heads,
        n_enc_layers: merged.enc_layers,
        n_dec_layers: merged.dec_layers,
        d_ff: merged.d_ff,
        max_len: merged.max_len,
        vocab_size,
        conf_vocab_size: merged.conf_vocab,
        dropout: merged.dropout,
    }
}

fn train_config(merged: &Merged) -> TrainConfig {
    TrainConfig {
        tokens_per_batch: merged.tokens_per_batch,
        label_smoothing: merged.label_smoothing,
        warmup_steps: merged.warmup,
        lr_factor: merged.lr_factor,
        max_steps: merged.max_steps,
        seed: merged.seed,
        eval_every: merged.eval_every,
        cer_sentences: merged.cer_sentences,
        max_seconds: merged.max_seconds,
        ..TrainConfig::default()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line?);
    }
    Ok(lines)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let outcome = corpus::load_pairs(path, false)
        .with_context(|| format!("loading pairs from {}", path.display()))?;
    if !outcome.dropped.is_empty() {
        eprintln!(
            "note: dropped {} malformed record(s) from {}",
            outcome.dropped.len(),
            path.display()
        );
    }
    Ok(outcome.dataset)
}

/// Two-way split: hold out `dev_frac` of the data, deterministically.
fn split_train_dev(ds: Dataset, dev_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&dev_frac) || dev_frac == 0.0 {
        bail!(UsageError(format!("dev fraction {dev_frac} outside (0,1)")));
    }
    let half = dev_frac / 2.0;
    let (train, mut dev, test) = corpus::split(&ds, (1.0 - dev_frac, half, half), seed)?;
    dev.pairs.extend(test.pairs);
    Ok((train, dev))
}

fn resolve_data(
    data: &Path,
    dev: Option<&Path>,
    dev_frac: Option<f64>,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let main = load_dataset(data)?;
    match dev {
        Some(path) => Ok((main, load_dataset(path)?)),
        None => split_train_dev(main, dev_frac.unwrap_or(0.1), seed),
    }
}

fn load_or_train_vocab(
    vocab: Option<&Path>,
    train_ds: &Dataset,
    vocab_size: usize,
) -> Result<BpeVocab> {
    match vocab {
        Some(path) => Ok(tokenizer::load_vocab(path)
            .with_context(|| format!("loading vocabulary {}", path.display()))?),
        None => {
            let noisy: Vec<String> = train_ds.pairs.iter().map(|p| p.noisy.clone()).collect();
            Ok(tokenizer::train_bpe(&noisy, vocab_size)?)
        }
    }
}

fn effective_sibling(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".effective.cfg");
    output.with_file_name(name)
}

fn write_effective(path: &Path, merged: &Merged) -> Result<()> {
    std::fs::write(path, merged.render())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

const VOCAB_FILE: &str = "vocab.bpe";

struct LoadedModel {
    model: Box<dyn Seq2Seq>,
    meta: ModelMeta,
    vocab: BpeVocab,
}

fn load_model_dir(dir: &Path) -> Result<LoadedModel> {
    let (model, meta) =
        load_model(dir).with_context(|| format!("loading model from {}", dir.display()))?;
    let vocab = tokenizer::load_vocab(&dir.join(VOCAB_FILE))
        .with_context(|| format!("loading vocabulary from {}", dir.display()))?;
    Ok(LoadedModel { model, meta, vocab })
}

fn suggested_max_out(src_tokens: usize, max_len: usize) -> usize {
    (src_tokens * 2 + 8).min(max_len.saturating_sub(1))
}

/// Tokenize one noisy sentence with scores into (token ids, confidence
/// rows), truncating to the model's window.
fn prepare_input(
    noisy: &str,
    scores: &[f64],
    loaded: &LoadedModel,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let quantizer = loaded.meta.config.quantizer();
    let sent =
        tokenizer::encode_with_scores(noisy, scores, &loaded.vocab, loaded.meta.score_reduce)?;
    let mut ids = sent.ids;
    let scores = sent.token_scores.expect("scores attached");
    let mut conf = Vec::with_capacity(ids.len());
    for &s in &scores {
        conf.push(quantizer.row_of(quantizer.quantize(s)?)?);
    }
    let cap = loaded.meta.config.max_len;
    if ids.len() > cap {
        eprintln!("note: truncating a {}-token sentence to {cap}", ids.len());
        ids.truncate(cap);
        conf.truncate(cap);
    }
    Ok((ids, conf))
}

// ---- subcommands ----

fn cmd_noise(args: NoiseArgs, mut merged: Merged) -> Result<ExitCode> {
    macro_rules! over {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { merged.$field = v; } )* };
    }
    over!(
        p_remove,
        p_insert,
        p_replace,
        gamma_shape,
        gamma_scale,
        beta_alpha,
        beta_beta,
        gamma_score_divisor
    );
    let clean: Vec<String> = read_lines(&args.input)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    if clean.is_empty() {
        bail!(NoiseError::EmptyInput);
    }
    let cfg = noiser::NoiseConfig {
        p_remove: merged.p_remove,
        p_insert: merged.p_insert,
        p_replace: merged.p_replace,
        gamma_shape: merged.gamma_shape,
        gamma_scale: merged.gamma_scale,
        beta_alpha: merged.beta_alpha,
        beta_beta: merged.beta_beta,
        gamma_score_divisor: merged.gamma_score_divisor,
        seed: merged.seed,
        replacement_pool: noiser::char_inventory(&clean),
    };
    let (ds, stats) = noiser::corrupt_corpus_jobs(&clean, &cfg, merged.jobs)?;
    corpus::write_pairs(&ds, &args.output)?;
    write_effective(&effective_sibling(&args.output), &merged)?;
    eprintln!(
        "noised {} sentences: kept {}, removed {}, replaced {}, inserted {}",
        ds.len(),
        stats.kept,
        stats.removed,
        stats.replaced,
        stats.inserted
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bpe_train(args: BpeTrainArgs, mut merged: Merged) -> Result<ExitCode> {
    if let Some(v) = args.vocab_size {
        merged.vocab_size = v;
    }
    let ds = load_dataset(&args.input)?;
    if ds.is_empty() {
        bail!(TrainError::NoData);
    }
    let noisy: Vec<String> = ds.pairs.iter().map(|p| p.noisy.clone()).collect();
    let vocab = tokenizer::train_bpe(&noisy, merged.vocab_size)?;
    tokenizer::save_vocab(&vocab, &args.output)?;
    write_effective(&effective_sibling(&args.output), &merged)?;
    eprintln!(
        "trained vocabulary: {} tokens ({} merges) for target {}",
        vocab.len(),
        vocab.merges().len(),
        merged.vocab_size
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs, mut merged: Merged) -> Result<ExitCode> {
    apply_model_flags(&mut merged, &args.model)?;
    apply_train_flags(&mut merged, &args.train)?;
    let (train_ds, dev_ds) =
        resolve_data(&args.data, args.dev.as_deref(), args.dev_frac, merged.seed)?;
    let vocab = load_or_train_vocab(args.vocab.as_deref(), &train_ds, merged.vocab_size)?;
    let cfg = model_config(&merged, vocab.len());
    let quantizer = ConfQuantizer::from_vocab_size(cfg.conf_vocab_size)
        .ok_or_else(|| anyhow!(UsageError(format!("conf vocab {} not one of 101, 5, 2", cfg.conf_vocab_size))))?;
    let (train_ex, skipped) =
        trainer::prepare_examples(&train_ds, &vocab, &quantizer, merged.score_reduce, cfg.max_len)?;
    if skipped > 0 {
        eprintln!("note: skipped {skipped} over-length training pair(s)");
    }
    let (dev_ex, _) =
        trainer::prepare_examples(&dev_ds, &vocab, &quantizer, merged.score_reduce, cfg.max_len)?;

    let model = ocrmend::model::build_model(merged.arch, &cfg, merged.seed)?;
    let tcfg = train_config(&merged);
    let outcome = trainer::train(model.as_ref(), &train_ex, &dev_ex, &vocab, &tcfg)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let meta = ModelMeta {
        arch: merged.arch,
        config: cfg,
        score_reduce: merged.score_reduce,
    };
    save_model(&args.out_dir, model.as_ref(), &meta)?;
    tokenizer::save_vocab(&vocab, &args.out_dir.join(VOCAB_FILE))?;
    let records = File::create(args.out_dir.join("records.csv"))?;
    trainer::write_records_csv(BufWriter::new(records), &outcome.records)?;
    write_effective(&args.out_dir.join("effective.cfg"), &merged)?;

    println!(
        "trained {} for {} steps: best dev loss {:.6} (step {}), dev cer {}",
        merged.arch.as_str(),
        tcfg.max_steps.min(outcome.step_losses.len()),
        outcome.final_dev_loss,
        outcome.best.step,
        if outcome.final_dev_cer.is_nan() {
            "n/a".to_string()
        } else {
            format!("{:.6}", outcome.final_dev_cer)
        }
    );
    match outcome.stop {
        StopReason::Completed => Ok(ExitCode::SUCCESS),
        StopReason::OutOfBudget { step } => {
            eprintln!("note: wall-clock budget reached at step {step}; best checkpoint kept");
            Ok(ExitCode::SUCCESS)
        }
        StopReason::Diverged { step } => Err(anyhow!(DivergedError { step })),
    }
}

fn cmd_correct(args: CorrectArgs, _merged: Merged) -> Result<ExitCode> {
    let loaded = load_model_dir(&args.model)?;
    let stdin_path = PathBuf::from("-");
    let input = args.input.unwrap_or_else(|| stdin_path.clone());
    let output = args.output.unwrap_or(stdin_path);

    let reader: Box<dyn Read> = if input.as_os_str() == "-" {
        Box::new(std::io::stdin().lock())
    } else {
        Box::new(File::open(&input).with_context(|| format!("opening {}", input.display()))?)
    };
    let mut writer: Box<dyn Write> = if output.as_os_str() == "-" {
        Box::new(std::io::stdout().lock())
    } else {
        Box::new(BufWriter::new(File::create(&output)?))
    };

    let parse_record = |line: &str| -> Result<(String, Vec<f64>)> {
        let value: serde_json::Value = serde_json::from_str(line)?;
        let noisy = value
            .get("noisy")
            .and_then(|v| v.as_str())
            .ok_or_else(|| anyhow!("record lacks a string `noisy` field"))?
            .to_string();
        let scores: Vec<f64> = value
            .get("scores")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
            .unwrap_or_default();
        Ok((noisy, scores))
    };

    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            writeln!(writer)?;
            continue;
        }
        let (noisy, scores) = if line.trim_start().starts_with('{') {
            let (noisy, scores) = parse_record(&line)?;
            let n = noisy.chars().count();
            if scores.len() != n {
                bail!(CorpusError::ScoreLengthMismatch {
                    index: 0,
                    scores: scores.len(),
                    chars: n,
                });
            }
            (noisy, scores)
        } else {
            let n = line.chars().count();
            (line.clone(), vec![1.0; n])
        };
        let (ids, conf) = prepare_input(&noisy, &scores, &loaded)?;
        let max_out = suggested_max_out(ids.len(), loaded.meta.config.max_len);
        let out_ids = greedy_decode(loaded.model.as_ref(), &ids, &conf, max_out)?;
        writeln!(writer, "{}", tokenizer::decode(&out_ids, &loaded.vocab)?)?;
    }
    writer.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let hyp = read_lines(&args.hyp)?;
    let reference = read_lines(&args.reference)?;
    if hyp.len() != reference.len() {
        bail!(EvalError::AlignmentFailure(format!(
            "{} hypothesis lines vs {} reference lines",
            hyp.len(),
            reference.len()
        )));
    }
    let mut subs = 0usize;
    let mut dels = 0usize;
    let mut inss = 0usize;
    let mut total_n = 0usize;
    for (h, r) in hyp.iter().zip(&reference) {
        let counts = eval::levenshtein(h, r);
        subs += counts.substitutions;
        dels += counts.deletions;
        inss += counts.insertions;
        total_n += counts.n;
    }
    if total_n == 0 {
        bail!(EvalError::EmptyReference);
    }
    let cer = (subs + dels + inss) as f64 / total_n as f64;
    println!("sentences {}", hyp.len());
    println!("reference_chars {total_n}");
    println!("edits {} (S={subs} D={dels} I={inss})", subs + dels + inss);
    println!("cer {cer:.6}");
    Ok(ExitCode::SUCCESS)
}

fn parse_values(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!(UsageError(format!("bad value {v:?} in list"))))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs, mut merged: Merged) -> Result<ExitCode> {
    apply_model_flags(&mut merged, &args.model)?;
    apply_train_flags(&mut merged, &args.train)?;
    if let Some(v) = args.bpe_size {
        merged.vocab_size = v;
    }
    let axis = trainer::SweepAxis::parse(&args.axis)
        .ok_or_else(|| anyhow!(UsageError(format!("unknown axis {:?}, expected bpe or conf", args.axis))))?;
    let values = parse_values(&args.values)?;
    if values.is_empty() {
        bail!(UsageError("empty --values list".into()));
    }
    if axis == trainer::SweepAxis::ConfVocab {
        for &v in &values {
            if ConfQuantizer::from_vocab_size(v).is_none() {
                bail!(UsageError(format!("confidence vocab size {v} not one of 101, 5, 2")));
            }
        }
    }
    let (train_ds, dev_ds) =
        resolve_data(&args.data, args.dev.as_deref(), args.dev_frac, merged.seed)?;
    let base_cfg = model_config(&merged, 0);
    let tcfg = train_config(&merged);
    let rows = trainer::sweep(
        axis,
        &values,
        &train_ds,
        &dev_ds,
        merged.vocab_size,
        &base_cfg,
        &tcfg,
        merged.score_reduce,
        merged.jobs,
    )?;
    let out = File::create(&args.out)?;
    trainer::write_sweep_csv(BufWriter::new(out), &rows)?;
    write_effective(&effective_sibling(&args.out), &merged)?;
    for row in &rows {
        println!(
            "{} bpe={} conf={} loss={:.6} cer={}",
            row.variant,
            row.bpe_size,
            row.conf_size,
            row.loss,
            if row.cer.is_nan() { "n/a".into() } else { format!("{:.6}", row.cer) }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite medians"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn cmd_compare(args: CompareArgs, mut merged: Merged) -> Result<ExitCode> {
    apply_model_flags(&mut merged, &args.model)?;
    apply_train_flags(&mut merged, &args.train)?;
    if let Some(v) = args.bpe_size {
        merged.vocab_size = v;
    }
    let seeds: Vec<u64> = match &args.seeds {
        Some(list) => list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| anyhow!(UsageError(format!("bad seed {v:?}"))))
            })
            .collect::<Result<_>>()?,
        None => vec![merged.seed],
    };
    let (train_ds, dev_ds) =
        resolve_data(&args.data, args.dev.as_deref(), args.dev_frac, merged.seed)?;
    let vocab = load_or_train_vocab(args.vocab.as_deref(), &train_ds, merged.vocab_size)?;
    let base_cfg = model_config(&merged, vocab.len());

    let mut labeled: Vec<(trainer::CompareRow, String)> = Vec::new();
    let mut per_arch: std::collections::BTreeMap<&'static str, Vec<(f64, f64)>> =
        std::collections::BTreeMap::new();
    for &seed in &seeds {
        let tcfg = TrainConfig {
            seed,
            ..train_config(&merged)
        };
        let rows = trainer::compare_architectures(
            &train_ds,
            &dev_ds,
            &vocab,
            &base_cfg,
            &tcfg,
            merged.score_reduce,
            merged.jobs,
        )?;
        for row in rows {
            per_arch
                .entry(row.arch.as_str())
                .or_default()
                .push((row.loss, row.cer));
            labeled.push((row, seed.to_string()));
        }
    }
    if seeds.len() > 1 {
        for arch in ArchKind::ALL {
            let stats = &per_arch[arch.as_str()];
            labeled.push((
                trainer::CompareRow {
                    arch,
                    loss: median(stats.iter().map(|s| s.0).collect()),
                    cer: median(stats.iter().map(|s| s.1).collect()),
                },
                "median".to_string(),
            ));
        }
    }
    let out = File::create(&args.out)?;
    trainer::write_compare_csv(BufWriter::new(out), &labeled)?;
    write_effective(&effective_sibling(&args.out), &merged)?;
    for (row, seed) in &labeled {
        println!(
            "{} seed={} loss={:.6} cer={}",
            row.arch.as_str(),
            seed,
            row.loss,
            if row.cer.is_nan() { "n/a".into() } else { format!("{:.6}", row.cer) }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_attn(args: AttnArgs, merged: Merged) -> Result<ExitCode> {
    let loaded = load_model_dir(&args.model)?;
    let (noisy, scores) = match (&args.sentence, &args.input) {
        (Some(text), _) => {
            let n = text.chars().count();
            (text.clone(), vec![1.0; n])
        }
        (None, Some(path)) => {
            let ds = load_dataset(path)?;
            let first = ds
                .pairs
                .first()
                .ok_or_else(|| anyhow!(CorpusError::EmptyDataset))?;
            (first.noisy.clone(), first.scores.clone())
        }
        (None, None) => bail!(UsageError("provide --sentence or --input".into())),
    };
    let (ids, conf) = prepare_input(&noisy, &scores, &loaded)?;
    let max_out = suggested_max_out(ids.len(), loaded.meta.config.max_len);
    let target = greedy_decode(loaded.model.as_ref(), &ids, &conf, max_out)?;
    let trace = attention_trace(loaded.model.as_ref(), &ids, &conf, &target)?;

    let layer_1based = args.layer.unwrap_or(3);
    if layer_1based == 0 {
        bail!(UsageError("--layer is 1-based".into()));
    }
    let layer = layer_1based - 1;
    let head = match args.head.as_deref() {
        None | Some("mean") => HeadSelect::Mean,
        Some(text) => HeadSelect::Index(
            text.parse::<usize>()
                .map_err(|_| anyhow!(UsageError(format!("bad head {text:?}"))))?,
        ),
    };
    let head_label = match head {
        HeadSelect::Mean => "mean".to_string(),
        HeadSelect::Index(i) => format!("head{i}"),
    };
    let kinds: Vec<AttentionKind> = match args.kind.as_deref() {
        None | Some("all") => vec![
            AttentionKind::EncoderSelf,
            AttentionKind::DecoderSelf,
            AttentionKind::Source,
        ],
        Some("encoder-self") => vec![AttentionKind::EncoderSelf],
        Some("decoder-self") => vec![AttentionKind::DecoderSelf],
        Some("source") => vec![AttentionKind::Source],
        Some(other) => bail!(UsageError(format!("unknown attention kind {other:?}"))),
    };

    let surface = |id: usize| -> String {
        loaded
            .vocab
            .token(id)
            .unwrap_or("\u{fffd}")
            .to_string()
    };
    let src_labels: Vec<String> = ids.iter().map(|&id| surface(id)).collect();
    let mut out_labels: Vec<String> = vec!["<bos>".to_string()];
    out_labels.extend(target.iter().map(|&id| surface(id)));

    std::fs::create_dir_all(&args.out_dir)?;
    let mut written = 0usize;
    for kind in kinds {
        if trace.layers(kind).is_empty() {
            eprintln!(
                "note: model records no {} attention; skipping",
                kind.as_str()
            );
            continue;
        }
        let (x_labels, y_labels) = match kind {
            AttentionKind::EncoderSelf => (&src_labels, &src_labels),
            AttentionKind::DecoderSelf => (&out_labels, &out_labels),
            AttentionKind::Source => (&src_labels, &out_labels),
        };
        let heatmap = eval::export_heatmap(&trace, kind, layer, head, x_labels, y_labels)?;
        let base = format!("{}-layer{layer_1based}-{head_label}", kind.as_str());
        let csv_path = args.out_dir.join(format!("{base}.csv"));
        eval::write_heatmap_csv(BufWriter::new(File::create(&csv_path)?), &heatmap)?;
        written += 1;
        if args.pgm {
            let pgm_path = args.out_dir.join(format!("{base}.pgm"));
            eval::write_heatmap_pgm(BufWriter::new(File::create(&pgm_path)?), &heatmap)?;
        }
    }
    if let Some(locality) = eval::self_attention_locality(&trace) {
        println!("encoder self-attention mass within 3 neighbors: {locality:.4}");
    }
    write_effective(&args.out_dir.join("effective.cfg"), &merged)?;
    println!("wrote {written} heatmap(s) to {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs, _merged: Merged) -> Result<ExitCode> {
    let loaded = load_model_dir(&args.model)?;
    let ds = load_dataset(&args.data)?;
    if ds.is_empty() {
        bail!(CorpusError::EmptyDataset);
    }
    let mut outputs = Vec::with_capacity(ds.len());
    let mut references = Vec::with_capacity(ds.len());
    let mut noisy = Vec::with_capacity(ds.len());
    for pair in &ds.pairs {
        let (ids, conf) = prepare_input(&pair.noisy, &pair.scores, &loaded)?;
        let max_out = suggested_max_out(ids.len(), loaded.meta.config.max_len);
        let out_ids = greedy_decode(loaded.model.as_ref(), &ids, &conf, max_out)?;
        outputs.push(tokenizer::decode(&out_ids, &loaded.vocab)?);
        references.push(pair.clean.clone());
        noisy.push(pair.noisy.clone());
    }
    let report = eval::token_error_report(&outputs, &references, &noisy, &loaded.vocab)?;
    report.write_csv(BufWriter::new(File::create(&args.out)?))?;

    let k = args.top_k.unwrap_or(20);
    println!("tokens corrected most often:");
    for (token, s, f) in report.top_successes(k) {
        println!("  {token:?}: corrected {s}, missed {f}");
    }
    println!("tokens missed most often:");
    for (token, s, f) in report.top_failures(k) {
        println!("  {token:?}: corrected {s}, missed {f}");
    }
    println!(
        "total: corrected {} of {} corrupted token occurrences",
        report.success_total(),
        report.success_total() + report.failure_total()
    );
    Ok(ExitCode::SUCCESS)
}
