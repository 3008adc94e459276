use std::collections::BTreeMap;

use proptest::prelude::*;
use s2st::corpus::SpeechFrames;
use s2st::evaluation::{
    corpus_bleu, corpus_meteor, meteor_lite, relative_delta_percent, speaker_similarity, EvalReport, SystemRow,
};
use s2st::rng::{normal_vec, seeded};
use s2st::vocoder::SpeakerEmbedder;
use s2st::Tensor;

/// Straightforward re-derivation: count every n-gram by scanning, clip by
/// the reference count, smooth orders 2..4 by one.
fn bleu_oracle(hyps: &[Vec<u8>], refs: &[Vec<u8>]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let hg: Vec<&[u8]> = h.windows(n).collect();
            let rg: Vec<&[u8]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
            t[n - 1] += hg.len();
            let mut done: Vec<&[u8]> = Vec::new();
            for g in &hg {
                if done.contains(g) {
                    continue;
                }
                done.push(g);
                let ch = hg.iter().filter(|x| *x == g).count();
                let cr = rg.iter().filter(|x| *x == g).count();
                m[n - 1] += ch.min(cr);
            }
        }
    }
    if m[0] == 0 {
        return 0.0;
    }
    let p1 = m[0] as f64 / t[0] as f64;
    let rest: f64 = (1..4).map(|i| (m[i] + 1) as f64 / (t[i] + 1) as f64).product();
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (p1 * rest).powf(0.25)
}

fn corpus_strategy() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<u8>>)> {
    (1usize..6).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(0u8..5, 0..9), n),
            prop::collection::vec(prop::collection::vec(0u8..5, 1..9), n),
        )
    })
}

proptest! {
    #[test]
    fn bleu_matches_the_oracle((h, r) in corpus_strategy()) {
        let got = corpus_bleu(&h, &r).unwrap();
        let want = bleu_oracle(&h, &r);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn meteor_stays_in_unit_range((h, r) in corpus_strategy()) {
        let m = corpus_meteor(&h, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn identical_corpora_score_perfectly(r in prop::collection::vec(prop::collection::vec(0u8..5, 1..9), 1..5)) {
        prop_assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
        for s in &r {
            let m = meteor_lite(s, s);
            let want = 1.0 - 0.5 * (1.0 / s.len() as f64).powi(3);
            prop_assert!((m - want).abs() < 1e-12);
        }
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn bleu_hand_cases() {
    let r = vec![words("the cat sat")];
    assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
    let short = corpus_bleu(&[words("the cat")], &r).unwrap();
    assert!((short - 100.0 * (-0.5f64).exp()).abs() < 1e-9);
    assert_eq!(corpus_bleu(&[vec![]], &r).unwrap(), 0.0);
    assert_eq!(corpus_bleu(&[words("dog ran")], &r).unwrap(), 0.0);
    assert!(corpus_bleu::<u8>(&[], &[]).is_err());
    assert!(corpus_bleu(&[words("a")], &[words("a"), words("b")]).is_err());
}

#[test]
fn meteor_hand_cases() {
    let r = words("the cat sat down");
    assert_eq!(meteor_lite(&r, &r), 0.9921875);
    assert_eq!(meteor_lite(&words("a b"), &r), 0.0);
    assert_eq!(meteor_lite(&Vec::<&str>::new(), &r), 0.0);
    // two matches in two chunks: P = 1, R = 1/2, F = 0.5/0.55
    let m = meteor_lite(&words("sat the"), &r);
    let f = 0.5 / (0.9 + 0.1 * 0.5);
    assert!((m - f * (1.0 - 0.5)).abs() < 1e-12);
    assert!(corpus_meteor::<u8>(&[], &[]).is_err());
}

#[test]
fn speaker_similarity_of_a_signal_with_itself_is_one() {
    let e = SpeakerEmbedder::new(16, 32, 16, 3);
    let x = SpeechFrames::new(Tensor::new(vec![9, 16], normal_vec(&mut seeded(1), 144, 1.0)).unwrap(), 50.0).unwrap();
    assert!((speaker_similarity(&x, &x, &e).unwrap() - 1.0).abs() < 1e-12);
    let y = SpeechFrames::new(Tensor::new(vec![5, 16], normal_vec(&mut seeded(2), 80, 1.0)).unwrap(), 50.0).unwrap();
    let s = speaker_similarity(&x, &y, &e).unwrap();
    assert!((-1.0..=1.0).contains(&s));
    assert!(speaker_similarity(&SpeechFrames::empty(16, 50.0), &y, &e).is_err());
}

fn row(bleu: f64, meteor: f64, sim: Option<f64>) -> SystemRow {
    SystemRow {
        system: "sys".into(),
        bleu,
        meteor,
        speaker_sim: sim,
        count: 3,
        extra: BTreeMap::new(),
    }
}

#[test]
fn report_rejects_out_of_range_rows() {
    let mut r = EvalReport::new("toy");
    assert!(r.push(row(50.0, 0.5, Some(0.9))).is_ok());
    assert!(r.push(row(100.5, 0.5, None)).is_err());
    assert!(r.push(row(50.0, 1.5, None)).is_err());
    assert!(r.push(row(50.0, 0.5, Some(-1.2))).is_err());
    assert_eq!(r.rows.len(), 1);
    let table = r.render_table();
    assert!(table.contains("sys") && table.contains("50.00"));
    assert!(r.render_kv().contains("sys.bleu=50"));
}

#[test]
fn relative_delta_sign_and_zero_baseline() {
    assert_eq!(relative_delta_percent(10.0, 8.0), Some(-20.0));
    assert_eq!(relative_delta_percent(0.0, 8.0), None);
}
