//! Trains the shared stages once on the toy corpus and checks each of them.

mod common;

use std::sync::OnceLock;

use s2st::corpus::Manifest;
use s2st::model::S2stModel;
use s2st::pipeline::{prompt_embeddings, text_derived_tokens, train_text_tokens, vocoder_examples, PipelineConfig, SharedStages};
use s2st::vocoder::{reconstruction_mse, TimbreVocoder};

use common::toy_split;

struct Fixture {
    shared: SharedStages,
    train: Manifest,
    val: Manifest,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (train, val) = toy_split(3);
        let shared = SharedStages::train(&PipelineConfig::toy(3), &train, &val).expect("shared stages");
        Fixture { shared, train, val }
    })
}

#[test]
fn tokens_are_nearly_pure_symbols() {
    let f = fixture();
    let purity = f.shared.symbols.purity();
    assert!(purity >= 0.9, "purity {purity}");
    for (tokens, r) in f.shared.val_tokens.iter().zip(&f.val.records) {
        assert_eq!(tokens.len(), r.tgt_text.len());
    }
}

#[test]
fn tokenizer_training_lowered_the_loss() {
    let log = &fixture().shared.tokenizer_log.losses;
    let head: f64 = log[..10].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    let tail: f64 = log[log.len() - 10..].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn vocoder_halves_reconstruction_error() {
    let f = fixture();
    let ex = vocoder_examples(&f.shared.vocoder, &f.val, &f.shared.val_tokens).unwrap();
    let untrained = TimbreVocoder::new(&f.shared.cfg.vocoder).unwrap();
    let before = reconstruction_mse(&untrained, &ex).unwrap();
    let after = reconstruction_mse(&f.shared.vocoder, &ex).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn text_derived_tokens_keep_the_symbol_alignment() {
    // vocode the text-derived tokens, re-quantize, and compare symbols with
    // those of the speech-derived tokens position by position
    let f = fixture();
    let s = &f.shared;
    let (t2t, _) = train_text_tokens(&s.cfg, &s.vocoder, &f.train, &s.train_tokens, &f.val, &s.val_tokens).unwrap();
    let got = text_derived_tokens(&t2t, &s.vocoder, &f.val).unwrap();
    let spk = prompt_embeddings(&s.vocoder, &f.val).unwrap();
    let (mut hit, mut total) = (0, 0);
    for ((g, w), e) in got.iter().zip(&s.val_tokens).zip(&spk) {
        let want = s.symbols.transcribe(w);
        total += want.len();
        if g.is_empty() {
            continue;
        }
        let frames = s.vocoder.synthesize(g, e).unwrap();
        let back = s.symbols.transcribe(&s.tokenizer.tokenize(&frames).unwrap());
        hit += back.iter().zip(&want).filter(|(a, b)| a == b).count();
    }
    let acc = hit as f64 / total as f64;
    assert!(acc >= 0.8, "recovered {acc}");
}

#[test]
fn system_checkpoint_round_trips() {
    let f = fixture();
    let system = f.shared.with_model(S2stModel::new(&f.shared.cfg.model).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("system.ckpt");
    system.save(&path).unwrap();
    let back = s2st::pipeline::S2stSystem::load(&path).unwrap();
    let r = &f.val.records[0];
    let prompt = &f.val.records[1].tgt_frames;
    assert_eq!(system.translate(&r.src_frames, prompt).unwrap(), back.translate(&r.src_frames, prompt).unwrap());
    assert_eq!(back.to_checkpoint().to_bytes(), system.to_checkpoint().to_bytes());
}
