//! `ocrmend`: train and evaluate a confidence-aware corrector for OCR
//! output.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error
//! (including diverged training).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "ocrmend",
    version,
    about = "Confidence-aware OCR post-correction pipeline",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/divergence."
)]
pub struct Cli {
    /// Seed for every random choice [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 guarantees byte-reproducible outputs [default: 1]
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Run configuration file; flags override file values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Corrupt clean text into noisy/score/clean JSONL pairs
    Noise(NoiseArgs),
    /// Train a BPE vocabulary on the noisy side of a pair file
    BpeTrain(BpeTrainArgs),
    /// Train a corrector model
    Train(TrainArgs),
    /// Correct noisy text with a trained model
    Correct(CorrectArgs),
    /// Character error rate of hypothesis text against a reference
    Eval(EvalArgs),
    /// Train once per value of a tokenizer or confidence vocabulary axis
    Sweep(SweepArgs),
    /// Train all four architectures on the same data and compare
    Compare(CompareArgs),
    /// Export attention heatmaps for one sentence
    Attn(AttnArgs),
    /// Report which tokens the model corrects or misses
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    /// Clean text, one sentence per line
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Output JSONL pair file
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Per-character removal probability [default: 0.05]
    #[arg(long, value_name = "P")]
    pub p_remove: Option<f64>,
    /// Per-gap insertion probability [default: 0.05]
    #[arg(long, value_name = "P")]
    pub p_insert: Option<f64>,
    /// Per-character replacement probability [default: 0.15]
    #[arg(long, value_name = "P")]
    pub p_replace: Option<f64>,
    /// Gamma shape for clean-character scores [default: 2]
    #[arg(long, value_name = "K")]
    pub gamma_shape: Option<f64>,
    /// Gamma scale for clean-character scores [default: 1]
    #[arg(long, value_name = "THETA")]
    pub gamma_scale: Option<f64>,
    /// Beta alpha for error-character scores [default: 6]
    #[arg(long, value_name = "A")]
    pub beta_alpha: Option<f64>,
    /// Beta beta for error-character scores [default: 4]
    #[arg(long, value_name = "B")]
    pub beta_beta: Option<f64>,
    /// Divisor in the gamma-to-score transform clamp(1 - g/div, 0, 1)
    /// [default: 10]
    #[arg(long, value_name = "D")]
    pub gamma_score_divisor: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BpeTrainArgs {
    /// JSONL pair file; merges are learned from the noisy side
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Target vocabulary size, specials included [default: 300]
    #[arg(long, value_name = "N")]
    pub vocab_size: Option<usize>,
    /// Output vocabulary file
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    /// Architecture: transformer-cs, transformer, lstm-2-lstm, gru-2-gru
    /// [default: transformer-cs]
    #[arg(long, value_name = "ARCH")]
    pub arch: Option<String>,
    /// Token embedding width [default: 112]
    #[arg(long, value_name = "D")]
    pub d_token: Option<usize>,
    /// Confidence embedding width; 0 disables the channel [default: 16]
    #[arg(long, value_name = "D")]
    pub d_conf: Option<usize>,
    /// Attention heads per layer [default: 4]
    #[arg(long, value_name = "N")]
    pub n_heads: Option<usize>,
    /// Encoder layers [default: 3]
    #[arg(long, value_name = "N")]
    pub enc_layers: Option<usize>,
    /// Decoder layers [default: 3]
    #[arg(long, value_name = "N")]
    pub dec_layers: Option<usize>,
    /// Feed-forward width [default: 256]
    #[arg(long, value_name = "D")]
    pub d_ff: Option<usize>,
    /// Maximum sentence length in tokens [default: 512]
    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,
    /// Confidence vocabulary size: 101, 5, or 2 [default: 101]
    #[arg(long, value_name = "N")]
    pub conf_vocab: Option<usize>,
    /// Dropout rate during training [default: 0.1]
    #[arg(long, value_name = "P")]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Optimizer steps [default: 1000]
    #[arg(long, value_name = "N")]
    pub max_steps: Option<usize>,
    /// Token budget per batch [default: 2048]
    #[arg(long, value_name = "N")]
    pub tokens_per_batch: Option<usize>,
    /// Label smoothing epsilon [default: 0.1]
    #[arg(long, value_name = "EPS")]
    pub label_smoothing: Option<f64>,
    /// Warmup steps of the learning-rate schedule [default: 4000]
    #[arg(long, value_name = "N")]
    pub warmup: Option<usize>,
    /// Multiplier on the schedule [default: 1]
    #[arg(long, value_name = "F")]
    pub lr_factor: Option<f64>,
    /// Steps between dev evaluations [default: 100]
    #[arg(long, value_name = "N")]
    pub eval_every: Option<usize>,
    /// Dev sentences decoded per CER evaluation; 0 skips CER [default: 128]
    #[arg(long, value_name = "N")]
    pub cer_sentences: Option<usize>,
    /// Wall-clock budget in seconds [default: none]
    #[arg(long, value_name = "S")]
    pub max_seconds: Option<f64>,
    /// Token score reduction: min or mean [default: min]
    #[arg(long, value_name = "HOW")]
    pub score_reduce: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training JSONL pair file
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Dev JSONL pair file; when absent a fraction of --data is split off
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,
    /// Fraction of --data held out when --dev is absent [default: 0.1]
    #[arg(long, value_name = "F")]
    pub dev_frac: Option<f64>,
    /// BPE vocabulary file; when absent one is trained on --data
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Output directory for checkpoint, records, and config
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct CorrectArgs {
    /// Model directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    /// JSONL pairs or plain noisy lines; - for stdin [default: -]
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Corrected text, one line per input; - for stdout [default: -]
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Hypothesis text, one sentence per line
    #[arg(long, value_name = "PATH")]
    pub hyp: PathBuf,
    /// Reference text, line-aligned with --hyp
    #[arg(long = "ref", value_name = "PATH")]
    pub reference: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Axis to sweep: bpe or conf
    #[arg(long, value_name = "AXIS")]
    pub axis: String,
    /// Comma-separated axis values, e.g. 100,300,500,1000,2000
    #[arg(long, value_name = "LIST")]
    pub values: String,
    /// Training JSONL pair file
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Dev JSONL pair file; when absent a fraction of --data is split off
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,
    /// Fraction of --data held out when --dev is absent [default: 0.1]
    #[arg(long, value_name = "F")]
    pub dev_frac: Option<f64>,
    /// BPE size used while sweeping the confidence axis [default: 300]
    #[arg(long, value_name = "N")]
    pub bpe_size: Option<usize>,
    /// Output CSV
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Training JSONL pair file
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Dev JSONL pair file; when absent a fraction of --data is split off
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,
    /// Fraction of --data held out when --dev is absent [default: 0.1]
    #[arg(long, value_name = "F")]
    pub dev_frac: Option<f64>,
    /// BPE vocabulary file; when absent one is trained on --data
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Target size of the vocabulary trained when --vocab is absent
    /// [default: 300]
    #[arg(long, value_name = "N")]
    pub bpe_size: Option<usize>,
    /// Comma-separated seeds, one full comparison per seed [default: --seed]
    #[arg(long, value_name = "LIST")]
    pub seeds: Option<String>,
    /// Output CSV; per-seed rows plus a median row per architecture
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    /// Model directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    /// Sentence to trace (plain text, scores assumed 1.0)
    #[arg(long, value_name = "TEXT", conflicts_with = "input")]
    pub sentence: Option<String>,
    /// JSONL pair file; the first record is traced
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Attention layer, 1-based [default: 3]
    #[arg(long, value_name = "N")]
    pub layer: Option<usize>,
    /// Head index (0-based) or "mean" [default: mean]
    #[arg(long, value_name = "HEAD")]
    pub head: Option<String>,
    /// Which matrices: all, encoder-self, decoder-self, source
    /// [default: all]
    #[arg(long, value_name = "KIND")]
    pub kind: Option<String>,
    /// Output directory for heatmap CSVs
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Also write grayscale PGM renders
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Model directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    /// Labeled JSONL pair file to evaluate on
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Rows printed per success/failure list [default: 20]
    #[arg(long, value_name = "K")]
    pub top_k: Option<usize>,
    /// Output CSV with per-token counts
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::classify_exit(&err))
        }
    }
}
