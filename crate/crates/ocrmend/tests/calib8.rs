//! Scratch calibration for the architecture comparison; removed once tuned.

use ocrmend::corpus::{split, Dataset};
use ocrmend::model::{build_model, ArchKind, ModelConfig};
use ocrmend::noiser::{char_inventory, corrupt_corpus, NoiseConfig};
use ocrmend::synth;
use ocrmend::tokenizer::{train_bpe, BpeVocab, ConfQuantizer, ScoreReduce};
use ocrmend::trainer::{prepare_examples, train, TrainConfig};

fn data() -> (Dataset, Dataset, BpeVocab) {
    let clean = synth::sentences_sized(20_000, 777, 20, 2, 4);
    let noise = NoiseConfig {
        seed: 777,
        replacement_pool: char_inventory(&clean),
        ..NoiseConfig::default()
    };
    let (ds, _) = corrupt_corpus(&clean, &noise).unwrap();
    let (train_ds, mut dev_ds, test_ds) = split(&ds, (0.95, 0.025, 0.025), 777).unwrap();
    dev_ds.pairs.extend(test_ds.pairs);
    dev_ds.pairs.truncate(400);
    let noisy: Vec<String> = train_ds.pairs.iter().map(|p| p.noisy.clone()).collect();
    let vocab = train_bpe(&noisy, 300).unwrap();
    (train_ds, dev_ds, vocab)
}

fn base_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_token: 28,
        d_conf: 4,
        n_heads: 4,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 64,
        max_len: 64,
        vocab_size: vocab,
        conf_vocab_size: 101,
        dropout: 0.0,
    }
}

#[test]
#[ignore]
fn probe_single_arch() {
    let t0 = std::time::Instant::now();
    let (train_ds, dev_ds, vocab) = data();
    eprintln!(
        "data ready: {} train, {} dev, vocab {} [{:.0}s]",
        train_ds.len(),
        dev_ds.len(),
        vocab.len(),
        t0.elapsed().as_secs_f64()
    );
    let arch = match std::env::var("PROBE_ARCH").as_deref() {
        Ok("lstm") => ArchKind::Lstm2Lstm,
        Ok("gru") => ArchKind::Gru2Gru,
        Ok("plain") => ArchKind::Transformer,
        _ => ArchKind::TransformerCs,
    };
    let steps: usize = std::env::var("PROBE_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1500);
    let lr: f64 = std::env::var("PROBE_LR")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(2.0);
    let mut cfg = base_cfg(vocab.len());
    if arch == ArchKind::Transformer {
        cfg.d_token += cfg.d_conf;
        cfg.d_conf = 0;
    }
    let q = ConfQuantizer::from_vocab_size(101).unwrap();
    let (tr, _) = prepare_examples(&train_ds, &vocab, &q, ScoreReduce::Min, cfg.max_len).unwrap();
    let (dv, _) = prepare_examples(&dev_ds, &vocab, &q, ScoreReduce::Min, cfg.max_len).unwrap();
    let clip: f64 = std::env::var("PROBE_CLIP")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    let tcfg = TrainConfig {
        tokens_per_batch: 512,
        max_steps: steps,
        warmup_steps: 150,
        lr_factor: lr,
        eval_every: 250,
        cer_sentences: 0,
        seed: 1,
        grad_clip: (clip > 0.0).then_some(clip),
        ..TrainConfig::default()
    };
    let model = build_model(arch, &cfg, tcfg.seed).unwrap();
    let outcome = train(model.as_ref(), &tr, &dv, &vocab, &tcfg).unwrap();
    for r in &outcome.records {
        eprintln!(
            "step {:5} train {:.4} dev {:.4} [{:.0}s]",
            r.step, r.train_loss, r.dev_loss, r.seconds
        );
    }
    eprintln!("stop: {:?}", outcome.stop);
    let cer = ocrmend::trainer::dev_cer(model.as_ref(), &dv, &vocab, 200).unwrap();
    eprintln!(
        "{}: final dev cer {:.4} [{:.0}s total]",
        arch.as_str(),
        cer,
        t0.elapsed().as_secs_f64()
    );
    // A couple of sample decodes.
    for ex in dv.iter().take(3) {
        let out = ocrmend::model::greedy_decode(model.as_ref(), &ex.src, &ex.conf, 40).unwrap();
        eprintln!(
            "  noisy:  {:?}\n  output: {:?}\n  clean:  {:?}",
            ocrmend::tokenizer::decode(&ex.src, &vocab).unwrap(),
            ocrmend::tokenizer::decode(&out, &vocab).unwrap(),
            ex.clean
        );
    }
}
