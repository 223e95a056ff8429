//! Run configuration: a flat `key = value` file with `[section]` headers,
//! merged with command-line flags (flags win). The merged effective
//! configuration is echoed next to every output for provenance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ocrmend::model::ArchKind;
use ocrmend::tokenizer::ScoreReduce;

/// Parsed config file content, unvalidated values as strings.
#[derive(Debug, Default)]
pub struct ConfigFile {
    /// section -> key -> value; top-level keys live under "".
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

const KNOWN: &[(&str, &[&str])] = &[
    ("", &["seed", "jobs"]),
    (
        "noise",
        &[
            "p_remove",
            "p_insert",
            "p_replace",
            "gamma_shape",
            "gamma_scale",
            "beta_alpha",
            "beta_beta",
            "gamma_score_divisor",
        ],
    ),
    ("tokenizer", &["vocab_size", "score_reduce"]),
    (
        "model",
        &[
            "arch",
            "d_token",
            "d_conf",
            "n_heads",
            "enc_layers",
            "dec_layers",
            "d_ff",
            "max_len",
            "conf_vocab",
            "dropout",
        ],
    ),
    (
        "train",
        &[
            "max_steps",
            "tokens_per_batch",
            "label_smoothing",
            "warmup",
            "lr_factor",
            "eval_every",
            "cer_sentences",
            "max_seconds",
        ],
    ),
];

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !KNOWN.iter().any(|(s, _)| *s == name) {
                    bail!("line {}: unknown section [{name}]", lineno + 1);
                }
                current = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got {line:?}", lineno + 1);
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let known_keys = KNOWN
                .iter()
                .find(|(s, _)| *s == current)
                .map(|(_, keys)| *keys)
                .unwrap_or(&[]);
            if !known_keys.contains(&key.as_str()) {
                let wheres = if current.is_empty() {
                    "at top level".to_string()
                } else {
                    format!("in [{current}]")
                };
                bail!("line {}: unknown key {key:?} {wheres}", lineno + 1);
            }
            sections
                .entry(current.clone())
                .or_default()
                .insert(key, value);
        }
        Ok(ConfigFile { sections })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file = ConfigFile::parse(&text)?;
        if file.get("", "seed").is_none() {
            bail!("config {} lacks the mandatory `seed` key", path.display());
        }
        Ok(file)
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }
}

/// Fully resolved settings: defaults, overlaid by a config file, overlaid by
/// flags.
#[derive(Debug, Clone)]
pub struct Merged {
    pub seed: u64,
    pub jobs: usize,
    // [noise]
    pub p_remove: f64,
    pub p_insert: f64,
    pub p_replace: f64,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub gamma_score_divisor: f64,
    // [tokenizer]
    pub vocab_size: usize,
    pub score_reduce: ScoreReduce,
    // [model]
    pub arch: ArchKind,
    pub d_token: usize,
    pub d_conf: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub conf_vocab: usize,
    pub dropout: f64,
    // [train]
    pub max_steps: usize,
    pub tokens_per_batch: usize,
    pub label_smoothing: f64,
    pub warmup: usize,
    pub lr_factor: f64,
    pub eval_every: usize,
    pub cer_sentences: usize,
    pub max_seconds: Option<f64>,
}

impl Default for Merged {
    fn default() -> Self {
        Merged {
            seed: 0,
            jobs: 1,
            p_remove: 0.05,
            p_insert: 0.05,
            p_replace: 0.15,
            gamma_shape: 2.0,
            gamma_scale: 1.0,
            beta_alpha: 6.0,
            beta_beta: 4.0,
            gamma_score_divisor: 10.0,
            vocab_size: 300,
            score_reduce: ScoreReduce::Min,
            arch: ArchKind::TransformerCs,
            d_token: 112,
            d_conf: 16,
            n_heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            d_ff: 256,
            max_len: 512,
            conf_vocab: 101,
            dropout: 0.1,
            max_steps: 1000,
            tokens_per_batch: 2048,
            label_smoothing: 0.1,
            warmup: 4000,
            lr_factor: 1.0,
            eval_every: 100,
            cer_sentences: 128,
            max_seconds: None,
        }
    }
}

fn set<T: std::str::FromStr>(slot: &mut T, file: &ConfigFile, section: &str, key: &str) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(text) = file.get(section, key) {
        *slot = text
            .parse()
            .map_err(|e| anyhow!("config key {section}.{key} = {text:?}: {e}"))?;
    }
    Ok(())
}

impl Merged {
    pub fn from_file(file: Option<&ConfigFile>) -> Result<Merged> {
        let mut m = Merged::default();
        let Some(f) = file else { return Ok(m) };
        set(&mut m.seed, f, "", "seed")?;
        set(&mut m.jobs, f, "", "jobs")?;
        set(&mut m.p_remove, f, "noise", "p_remove")?;
        set(&mut m.p_insert, f, "noise", "p_insert")?;
        set(&mut m.p_replace, f, "noise", "p_replace")?;
        set(&mut m.gamma_shape, f, "noise", "gamma_shape")?;
        set(&mut m.gamma_scale, f, "noise", "gamma_scale")?;
        set(&mut m.beta_alpha, f, "noise", "beta_alpha")?;
        set(&mut m.beta_beta, f, "noise", "beta_beta")?;
        set(&mut m.gamma_score_divisor, f, "noise", "gamma_score_divisor")?;
        set(&mut m.vocab_size, f, "tokenizer", "vocab_size")?;
        if let Some(text) = f.get("tokenizer", "score_reduce") {
            m.score_reduce = ScoreReduce::parse(text)
                .ok_or_else(|| anyhow!("config key tokenizer.score_reduce = {text:?}"))?;
        }
        if let Some(text) = f.get("model", "arch") {
            m.arch = ArchKind::parse(text)
                .ok_or_else(|| anyhow!("config key model.arch = {text:?}"))?;
        }
        set(&mut m.d_token, f, "model", "d_token")?;
        set(&mut m.d_conf, f, "model", "d_conf")?;
        set(&mut m.n_heads, f, "model", "n_heads")?;
        set(&mut m.enc_layers, f, "model", "enc_layers")?;
        set(&mut m.dec_layers, f, "model", "dec_layers")?;
        set(&mut m.d_ff, f, "model", "d_ff")?;
        set(&mut m.max_len, f, "model", "max_len")?;
        set(&mut m.conf_vocab, f, "model", "conf_vocab")?;
        set(&mut m.dropout, f, "model", "dropout")?;
        set(&mut m.max_steps, f, "train", "max_steps")?;
        set(&mut m.tokens_per_batch, f, "train", "tokens_per_batch")?;
        set(&mut m.label_smoothing, f, "train", "label_smoothing")?;
        set(&mut m.warmup, f, "train", "warmup")?;
        set(&mut m.lr_factor, f, "train", "lr_factor")?;
        set(&mut m.eval_every, f, "train", "eval_every")?;
        set(&mut m.cer_sentences, f, "train", "cer_sentences")?;
        if let Some(text) = f.get("train", "max_seconds") {
            m.max_seconds = Some(
                text.parse()
                    .map_err(|e| anyhow!("config key train.max_seconds = {text:?}: {e}"))?,
            );
        }
        Ok(m)
    }

    /// Deterministic rendering of the full effective configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# ocrmend effective configuration");
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "jobs = {}", self.jobs);
        let _ = writeln!(out, "\n[noise]");
        let _ = writeln!(out, "p_remove = {}", self.p_remove);
        let _ = writeln!(out, "p_insert = {}", self.p_insert);
        let _ = writeln!(out, "p_replace = {}", self.p_replace);
        let _ = writeln!(out, "gamma_shape = {}", self.gamma_shape);
        let _ = writeln!(out, "gamma_scale = {}", self.gamma_scale);
        let _ = writeln!(out, "beta_alpha = {}", self.beta_alpha);
        let _ = writeln!(out, "beta_beta = {}", self.beta_beta);
        let _ = writeln!(out, "gamma_score_divisor = {}", self.gamma_score_divisor);
        let _ = writeln!(out, "\n[tokenizer]");
        let _ = writeln!(out, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(out, "score_reduce = {}", self.score_reduce.as_str());
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "arch = {}", self.arch.as_str());
        let _ = writeln!(out, "d_token = {}", self.d_token);
        let _ = writeln!(out, "d_conf = {}", self.d_conf);
        let _ = writeln!(out, "n_heads = {}", self.n_heads);
        let _ = writeln!(out, "enc_layers = {}", self.enc_layers);
        let _ = writeln!(out, "dec_layers = {}", self.dec_layers);
        let _ = writeln!(out, "d_ff = {}", self.d_ff);
        let _ = writeln!(out, "max_len = {}", self.max_len);
        let _ = writeln!(out, "conf_vocab = {}", self.conf_vocab);
        let _ = writeln!(out, "dropout = {}", self.dropout);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "max_steps = {}", self.max_steps);
        let _ = writeln!(out, "tokens_per_batch = {}", self.tokens_per_batch);
        let _ = writeln!(out, "label_smoothing = {}", self.label_smoothing);
        let _ = writeln!(out, "warmup = {}", self.warmup);
        let _ = writeln!(out, "lr_factor = {}", self.lr_factor);
        let _ = writeln!(out, "eval_every = {}", self.eval_every);
        let _ = writeln!(out, "cer_sentences = {}", self.cer_sentences);
        if let Some(s) = self.max_seconds {
            let _ = writeln!(out, "max_seconds = {s}");
        }
        out
    }
}
