mod common;

use proptest::prelude::*;
use s2st::corpus::SpeechFrames;
use s2st::rng::seeded;
use s2st::tokenizer::{
    dequantize, quantize, Codebook, SpeechTokenizer, TextToTokenConfig, TextToTokenModel, TokenizerConfig,
};
use s2st::{Tape, Tensor};

use common::rand_tensor;

fn brute_force(h: &Tensor, cb: &Codebook) -> Vec<usize> {
    (0..h.rows())
        .map(|i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for n in 0..cb.size() {
                let d: f64 = h.row(i).iter().zip(cb.entry(n)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = n;
                }
            }
            best
        })
        .collect()
}

fn tensor_strategy(max_rows: usize, dim: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows).prop_flat_map(move |r| {
        prop::collection::vec(-3.0f64..3.0, r * dim).prop_map(move |d| Tensor::new(vec![r, dim], d).unwrap())
    })
}

proptest! {
    #[test]
    fn quantize_stays_in_range_and_matches_scan(
        h in tensor_strategy(12, 4),
        cb in tensor_strategy(20, 4),
    ) {
        let cb = Codebook::new(cb).unwrap();
        let mu = quantize(&h, &cb).unwrap();
        prop_assert_eq!(mu.len(), h.rows());
        prop_assert!(mu.iter().all(|&m| m < cb.size()));
        prop_assert_eq!(mu, brute_force(&h, &cb));
    }

    #[test]
    fn dequantize_quantize_is_fixed_point_on_entries(cb in tensor_strategy(10, 3), picks in prop::collection::vec(0usize..10, 0..8)) {
        let cb = Codebook::new(cb).unwrap();
        let picks: Vec<usize> = picks.into_iter().map(|p| p % cb.size()).collect();
        let rows = dequantize(&picks, &cb).unwrap();
        let back = quantize(&rows, &cb).unwrap();
        // duplicate entries resolve to the lowest equal index
        for (b, p) in back.iter().zip(&picks) {
            prop_assert_eq!(cb.entry(*b), cb.entry(*p));
            prop_assert!(b <= p);
        }
    }
}

#[test]
fn single_entry_codebook_maps_everything_to_zero() {
    let mut rng = seeded(3);
    let cb = Codebook::new(rand_tensor(&mut rng, &[1, 5])).unwrap();
    let h = rand_tensor(&mut rng, &[7, 5]);
    assert_eq!(quantize(&h, &cb).unwrap(), vec![0; 7]);
}

#[test]
fn random_instance_matches_exhaustive_scan() {
    let mut rng = seeded(4);
    let h = rand_tensor(&mut rng, &[10, 8]);
    let cb = Codebook::new(rand_tensor(&mut rng, &[16, 8])).unwrap();
    assert_eq!(quantize(&h, &cb).unwrap(), brute_force(&h, &cb));
}

#[test]
fn round_trip_error_is_bounded_by_codebook_spread() {
    let mut rng = seeded(5);
    let cb = Codebook::new(rand_tensor(&mut rng, &[16, 4])).unwrap();
    // points drawn inside the codebook's cloud
    let mut spread: f64 = 0.0;
    for a in 0..16 {
        for b in 0..16 {
            let d: f64 = cb.entry(a).iter().zip(cb.entry(b)).map(|(x, y)| (x - y) * (x - y)).sum();
            spread = spread.max(d.sqrt());
        }
    }
    for i in 0..16 {
        let j = (i + 5) % 16;
        let mid: Vec<f64> = cb.entry(i).iter().zip(cb.entry(j)).map(|(x, y)| 0.3 * x + 0.7 * y).collect();
        let h = Tensor::new(vec![1, 4], mid.clone()).unwrap();
        let back = dequantize(&quantize(&h, &cb).unwrap(), &cb).unwrap();
        let err: f64 = back.data().iter().zip(&mid).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(err <= spread);
    }
}

#[test]
fn small_perturbations_never_change_the_token() {
    // entries on a line; gap to the second nearest is known exactly
    let cb = Codebook::new(Tensor::new(vec![3, 1], vec![0.0, 1.0, 3.0]).unwrap()).unwrap();
    for (x, half_gap) in [(0.1, 0.4), (1.2, 0.3), (2.9, 0.9)] {
        let base = quantize(&Tensor::new(vec![1, 1], vec![x]).unwrap(), &cb).unwrap();
        for eps in [-0.99 * half_gap, 0.99 * half_gap] {
            let moved = quantize(&Tensor::new(vec![1, 1], vec![x + eps]).unwrap(), &cb).unwrap();
            assert_eq!(base, moved, "x={x} eps={eps}");
        }
    }
}

#[test]
fn straight_through_passes_the_gradient_unchanged() {
    let mut rng = seeded(6);
    let h = rand_tensor(&mut rng, &[3, 4]);
    let c = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let loss = |t: &mut Tape, x: s2st::Var| {
        let w = t.constant(w.clone());
        let y = t.mul(x, x).unwrap();
        let y = t.mul(y, w).unwrap();
        t.sum(y)
    };
    let mut t1 = Tape::new();
    let hv = t1.variable(h);
    let cv = t1.constant(c.clone());
    let hb = t1.straight_through(hv, cv).unwrap();
    let l = loss(&mut t1, hb);
    t1.backward(l).unwrap();

    let mut t2 = Tape::new();
    let cv = t2.variable(c);
    let l = loss(&mut t2, cv);
    t2.backward(l).unwrap();
    assert_eq!(t1.grad(hv).unwrap(), t2.grad(cv).unwrap());
}

fn frames(rows: usize, f: usize, seed: u64) -> SpeechFrames {
    let mut rng = seeded(seed);
    SpeechFrames::new(rand_tensor(&mut rng, &[rows, f]), 50.0).unwrap()
}

#[test]
fn stage1_shapes_and_preconditions() {
    let tok = SpeechTokenizer::new(&TokenizerConfig::default()).unwrap();
    let h = tok.encode_stage1(&frames(1, 16, 1)).unwrap();
    assert_eq!(h.shape(), &[1, tok.cfg.d]);
    assert!(tok.encode_stage1(&SpeechFrames::empty(16, 50.0)).is_err());
    assert!(tok.encode_stage1(&frames(4, 15, 1)).is_err());
    let x = frames(13, 16, 2);
    assert_eq!(tok.encode_stage1(&x).unwrap(), tok.encode_stage1(&x).unwrap());
    let again = SpeechTokenizer::new(&TokenizerConfig::default()).unwrap();
    assert_eq!(tok.encode_stage1(&x).unwrap(), again.encode_stage1(&x).unwrap());
}

#[test]
fn tokens_are_one_per_encoder_position() {
    let tok = SpeechTokenizer::new(&TokenizerConfig::default()).unwrap();
    for t in [1, 4, 9, 32] {
        let x = frames(t, 16, t as u64);
        let h = tok.encode_stage1(&x).unwrap();
        let mu = tok.tokenize(&x).unwrap();
        assert_eq!(mu.len(), h.rows());
        assert_eq!(mu.len(), t.div_ceil(4));
        let h2 = tok.encode_stage2(&dequantize(&mu, &tok.codebook()).unwrap()).unwrap();
        assert_eq!(h2.rows(), mu.len());
    }
}

#[test]
fn asr_decoder_rejects_an_empty_target() {
    let tok = SpeechTokenizer::new(&TokenizerConfig::default()).unwrap();
    let h = tok.encode_stage1(&frames(8, 16, 3)).unwrap();
    assert!(tok.asr_decode_logits(&h, &[]).is_err());
    let l = tok.asr_decode_logits(&h, &[tok.bos(), 3, 4]).unwrap();
    assert_eq!(l.shape(), &[3, tok.cfg.text_vocab + 1]);
}

#[test]
fn asr_decoder_is_causal_over_the_text() {
    let tok = SpeechTokenizer::new(&TokenizerConfig::default()).unwrap();
    let h = tok.encode_stage1(&frames(8, 16, 3)).unwrap();
    let a = tok.asr_decode_logits(&h, &[tok.bos(), 3, 4]).unwrap();
    let b = tok.asr_decode_logits(&h, &[tok.bos(), 3, 9]).unwrap();
    let v = tok.cfg.text_vocab + 1;
    assert_eq!(&a.data()[..2 * v], &b.data()[..2 * v]);
    assert_ne!(&a.data()[2 * v..], &b.data()[2 * v..]);
}

#[test]
fn text_to_token_generation_is_deterministic_and_empty_text_gives_nothing() {
    let m = TextToTokenModel::new(&TextToTokenConfig::default()).unwrap();
    let spk = vec![0.25; 16];
    let a = m.generate(&[1, 2, 3], &spk).unwrap();
    let b = m.generate(&[1, 2, 3], &spk).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.iter().all(|&t| t < 64));
    assert!(a.tokens.len() <= 16 && (a.truncated == (a.tokens.len() == 16)));
    let e = m.generate(&[], &spk).unwrap();
    assert!(e.tokens.is_empty() && !e.truncated);
}
