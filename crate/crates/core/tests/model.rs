mod common;

use proptest::prelude::*;
use s2st::corpus::SpeechFrames;
use s2st::model::{
    apply_repetition_penalty, compute_loss, decode_greedy, group_tokens, ungroup_tokens, AugmentedVocab, DecodeConfig,
    LmExample, LmTask, ModelConfig, PadSide, ProjectorKind, S2stModel, StepModel, StepTargets, TokenKind,
};
use s2st::nn::Graph;
use s2st::rng::seeded;
use s2st::training::{TrainConfig, Trainer};
use s2st::{Result, Tensor};

use common::{rand_tensor, tiny_model_config};

proptest! {
    #[test]
    fn grouping_round_trips(tokens in prop::collection::vec(0usize..100, 0..=50), g in 1usize..=8) {
        let pad = 1000;
        let seq = group_tokens(&tokens, g, pad).unwrap();
        prop_assert_eq!(seq.groups.len(), tokens.len().div_ceil(g));
        prop_assert!(seq.groups.iter().all(|grp| grp.len() == g));
        for (i, grp) in seq.groups.iter().enumerate() {
            for (j, &t) in grp.iter().enumerate() {
                let expect = tokens.get(i * g + j).copied().unwrap_or(pad);
                prop_assert_eq!(t, expect);
            }
        }
        prop_assert_eq!(ungroup_tokens(&seq, pad), tokens);
    }

    #[test]
    fn unit_penalty_changes_nothing(
        logits in prop::collection::vec(-5.0f64..5.0, 1..20),
        hist in prop::collection::vec(0usize..25, 0..10),
    ) {
        let mut l = logits.clone();
        apply_repetition_penalty(&mut l, &hist, 1.0);
        prop_assert_eq!(l, logits);
    }
}

#[test]
fn zero_group_size_is_rejected() {
    assert!(group_tokens(&[1, 2], 0, 9).is_err());
}

#[test]
fn vocabulary_partitions_into_disjoint_ranges() {
    let v = AugmentedVocab::new(20, 64);
    let mut counts = [0usize; 6];
    for id in 0..v.size() {
        let k = match v.kind(id).unwrap() {
            TokenKind::Text(_) => 0,
            TokenKind::Audio(_) => 1,
            TokenKind::Bos => 2,
            TokenKind::EosText => 3,
            TokenKind::EosAudio => 4,
            TokenKind::Pad => 5,
        };
        counts[k] += 1;
    }
    assert_eq!(counts, [20, 64, 1, 1, 1, 1]);
    assert!(v.kind(v.size()).is_err());
}

fn projected_shape(kind: ProjectorKind, t_e: usize) -> Result<Vec<usize>> {
    let cfg = ModelConfig {
        projector: kind,
        fixed_input_len: t_e,
        ..tiny_model_config(1)
    };
    let m = S2stModel::new(&cfg)?;
    let a_f = rand_tensor(&mut seeded(2), &[t_e, cfg.encoder_dim]);
    Ok(m.project(&a_f)?.shape().to_vec())
}

#[test]
fn projector_output_shapes() {
    for t_e in [2, 5, 8, 9] {
        assert_eq!(projected_shape(ProjectorKind::Linear, t_e).unwrap(), vec![t_e / 2, 8]);
        assert_eq!(projected_shape(ProjectorKind::Conv1dLinear, t_e).unwrap(), vec![t_e / 2, 8]);
        assert_eq!(projected_shape(ProjectorKind::QFormer { layers: 1 }, t_e).unwrap(), vec![3, 8]);
    }
    assert!(projected_shape(ProjectorKind::Linear, 1).is_err());
    assert!(projected_shape(ProjectorKind::Conv1dLinear, 1).is_err());
    assert_eq!(projected_shape(ProjectorKind::QFormer { layers: 1 }, 1).unwrap(), vec![3, 8]);
}

#[test]
fn unit_group_linear_projector_reduces_to_a_matrix() {
    // k = 1, W1 = I, b = 0 and positive inputs: ReLU is the identity, so
    // the projector is x·W2.
    let cfg = ModelConfig {
        k: 1,
        encoder_dim: 8,
        d: 8,
        ..tiny_model_config(3)
    };
    let mut m = S2stModel::new(&cfg).unwrap();
    let mut eye = vec![0.0; 64];
    for i in 0..8 {
        eye[i * 9] = 1.0;
    }
    let w2 = rand_tensor(&mut seeded(4), &[8, 8]);
    for (name, value) in [
        ("projector.mlp.fc1.w", Tensor::new(vec![8, 8], eye).unwrap()),
        ("projector.mlp.fc2.w", w2.clone()),
    ] {
        let id = m.store.find(name).unwrap_or_else(|| panic!("{name}"));
        *m.store.get_mut(id) = value;
    }
    let x: Vec<f64> = (0..5 * 8).map(|i| 0.1 + (i % 7) as f64 * 0.3).collect();
    let a_f = Tensor::new(vec![5, 8], x.clone()).unwrap();
    let got = m.project(&a_f).unwrap();
    for r in 0..5 {
        for c in 0..8 {
            let want: f64 = (0..8).map(|j| x[r * 8 + j] * w2.data()[j * 8 + c]).sum();
            assert!((got.data()[r * 8 + c] - want).abs() < 1e-12);
        }
    }
}

fn step_logits(m: &S2stModel, a_f: &Tensor, t: &StepTargets) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new(&m.store);
    let (a, x) = m.forward_teacher_forced(&mut g, a_f, t).unwrap();
    (g.value(a).to_vec(), g.value(x).to_vec())
}

#[test]
fn later_steps_never_influence_earlier_logits() {
    let cfg = tiny_model_config(5);
    let m = S2stModel::new(&cfg).unwrap();
    let a_f = rand_tensor(&mut seeded(6), &[cfg.fixed_input_len, cfg.encoder_dim]);
    let base = StepTargets::new(&m.decoder, &[1, 2, 3, 4], &[0, 1, 2, 3, 4, 5, 0]).unwrap();
    let mut probe = base.clone();
    let last = probe.steps() - 1;
    probe.text_in[last] = 0;
    probe.audio_in[last] = vec![m.decoder.vocab.audio_id(5); cfg.group];
    let (a0, t0) = step_logits(&m, &a_f, &base);
    let (a1, t1) = step_logits(&m, &a_f, &probe);
    let tc = cfg.text_vocab + 4;
    let ac = cfg.group * (cfg.codebook_size + 1);
    assert_eq!(&t0[..last * tc], &t1[..last * tc]);
    assert_eq!(&a0[..last * ac], &a1[..last * ac]);
    assert_ne!(&t0[last * tc..], &t1[last * tc..]);
}

#[test]
fn step_targets_follow_the_padding_contract() {
    let m = S2stModel::new(&tiny_model_config(7)).unwrap();
    let v = m.decoder.vocab;
    // text of 2 (+EOS = 3 steps), 7 audio tokens (+EOS = 8, 3 groups of 3)
    let t = StepTargets::new(&m.decoder, &[0, 4], &[0, 1, 2, 3, 4, 5, 0]).unwrap();
    assert_eq!(t.steps(), 3);
    assert_eq!(t.text_in, vec![v.bos(), 0, 4]);
    assert_eq!(t.text_out, vec![Some(0), Some(4), Some(v.text + 1)]);
    assert_eq!(t.audio_in[0], vec![v.bos(); 3]);
    assert_eq!(t.audio_in[2], vec![v.audio_id(3), v.audio_id(4), v.audio_id(5)]);
    let eos = v.audio;
    assert_eq!(&t.audio_out[6..], &[Some(0), Some(eos), None]);
    // audio longer than text: text is masked after its EOS
    let t = StepTargets::new(&m.decoder, &[1], &[0, 1, 2, 3, 4, 5, 0]).unwrap();
    assert_eq!(t.text_out, vec![Some(1), Some(v.text + 1), None]);
    assert_eq!(t.text_in[2], v.eos_text());
    assert!(StepTargets::new(&m.decoder, &[5], &[]).is_err());
    assert!(StepTargets::new(&m.decoder, &[], &[6]).is_err());
}

#[test]
fn encoder_pads_at_the_start_and_keeps_the_tail() {
    let cfg = tiny_model_config(8);
    let m = S2stModel::new(&cfg).unwrap();
    assert_eq!(m.encoder.pad_side, PadSide::Start);
    let short = SpeechFrames::new(Tensor::new(vec![3, 4], (1..=12).map(f64::from).collect()).unwrap(), 50.0).unwrap();
    let p = m.encoder.pad(&short).unwrap();
    assert_eq!(p.shape(), &[8, 4]);
    assert!(p.data()[..20].iter().all(|&x| x == 0.0));
    assert_eq!(&p.data()[20..], short.tensor().data());
    let long = SpeechFrames::new(Tensor::new(vec![10, 4], (0..40).map(f64::from).collect()).unwrap(), 50.0).unwrap();
    let p = m.encoder.pad(&long).unwrap();
    assert_eq!(p.data(), &long.tensor().data()[8..]);
    let wrong = SpeechFrames::new(Tensor::zeros(&[3, 5]), 50.0).unwrap();
    assert!(m.encoder.pad(&wrong).is_err());
    assert_eq!(m.encode_speech(&short).unwrap().shape(), &[8, cfg.encoder_dim]);
}

fn loss_of(logits_a: Tensor, logits_t: Tensor, t: &StepTargets, la: f64, lt: f64) -> (f64, f64, f64) {
    let store = s2st::nn::ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(logits_a);
    let x = g.constant(logits_t);
    let p = compute_loss(&mut g, a, x, t, la, lt).unwrap();
    (g.item(p.total), g.item(p.audio), g.item(p.text))
}

fn manual_targets(text_out: Vec<Option<usize>>, audio_out: Vec<Option<usize>>, g: usize) -> StepTargets {
    let s = text_out.len();
    StepTargets {
        text_in: vec![0; s],
        audio_in: vec![vec![0; g]; s],
        text_out,
        audio_out,
    }
}

#[test]
fn uniform_logits_give_log_class_count() {
    let t = manual_targets(vec![Some(1), Some(3)], vec![Some(0), Some(63), None, Some(5)], 2);
    let (total, audio, text) = loss_of(Tensor::zeros(&[4, 64]), Tensor::zeros(&[2, 24]), &t, 1.0, 1.0);
    assert!((audio - 64f64.ln()).abs() < 1e-12);
    assert!((text - 24f64.ln()).abs() < 1e-12);
    assert!((total - audio - text).abs() < 1e-12);
}

#[test]
fn text_weight_zero_leaves_only_the_audio_term() {
    let mut rng = seeded(9);
    let t = manual_targets(vec![Some(1), None], vec![Some(0), Some(2), None, None], 2);
    let (total, audio, _) = loss_of(rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[2, 6]), &t, 1.0, 0.0);
    assert_eq!(total, audio);
}

#[test]
fn hand_computed_two_slot_loss() {
    // G = 2, |V_a| = 4 (5 audio classes with EOS); one step, both slots live.
    let la = Tensor::new(vec![2, 5], vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 1.0]).unwrap();
    let t = manual_targets(vec![Some(0)], vec![Some(1), Some(4)], 2);
    let (_, audio, _) = loss_of(la, Tensor::zeros(&[1, 3]), &t, 1.0, 1.0);
    let r1 = -(2.0 - (1f64.exp() + 2f64.exp() + 3.0).ln());
    let r2 = -(1.0 - (3.0 + 3f64.exp() + 1f64.exp()).ln());
    assert!((audio - (r1 + r2) / 2.0).abs() < 1e-12);
}

#[test]
fn logits_at_padded_slots_do_not_matter() {
    let mut rng = seeded(10);
    let t = manual_targets(vec![Some(1), None], vec![Some(0), None, Some(2), None], 2);
    let la = rand_tensor(&mut rng, &[4, 5]);
    let lt = rand_tensor(&mut rng, &[2, 6]);
    let base = loss_of(la.clone(), lt.clone(), &t, 1.0, 1.0);
    let mut la2 = la.data().to_vec();
    for c in 0..5 {
        la2[5 + c] += 7.0 * c as f64;
        la2[15 + c] -= 3.0;
    }
    let mut lt2 = lt.data().to_vec();
    lt2[6..].iter_mut().for_each(|x| *x *= -4.0);
    let moved = loss_of(Tensor::new(vec![4, 5], la2).unwrap(), Tensor::new(vec![2, 6], lt2).unwrap(), &t, 1.0, 1.0);
    assert_eq!(base, moved);
}

fn tiny_task(seed: u64) -> LmTask {
    let cfg = tiny_model_config(seed);
    let model = S2stModel::new(&cfg).unwrap();
    let mut rng = seeded(seed + 100);
    let mut train = Vec::new();
    for i in 0..6 {
        let src = SpeechFrames::new(rand_tensor(&mut rng, &[6, cfg.features]), 50.0).unwrap();
        let text: Vec<usize> = (0..2 + i % 3).map(|j| (i + j) % cfg.text_vocab).collect();
        let tokens: Vec<usize> = (0..3 + i % 4).map(|j| (i * j) % cfg.codebook_size).collect();
        train.push(LmExample::new(&model, &src, &text, &tokens).unwrap());
    }
    LmTask {
        model,
        val: train[..2].to_vec(),
        train,
        lambda_audio: 1.0,
        lambda_text: 1.0,
    }
}

#[test]
fn training_leaves_encoder_and_text_rows_untouched() {
    let mut task = tiny_task(11);
    let enc_before = task.model.encoder.store.to_named("");
    let text_id = task.model.decoder.text_embed;
    let text_before = task.model.store.get(text_id).clone();
    let other_id = task.model.decoder.other_embed;
    let other_before = task.model.store.get(other_id).clone();
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 2,
        warmup_steps: 1,
        validate_every: 100,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let state = Trainer::new(cfg).unwrap().train(&mut task).unwrap();
    assert!(state.step() >= 5);
    assert_eq!(task.model.encoder.store.to_named(""), enc_before);
    assert_eq!(task.model.store.get(text_id), &text_before);
    assert_ne!(task.model.store.get(other_id), &other_before);
}

/// Emits text symbols then EOS, and `audio_len` codebook entries then EOS.
struct Scripted {
    text: Vec<usize>,
    audio_len: usize,
    g: usize,
}

impl StepModel for Scripted {
    fn vocab(&self) -> AugmentedVocab {
        AugmentedVocab::new(6, 10)
    }
    fn group(&self) -> usize {
        self.g
    }
    fn next_logits(&self, text_hist: &[usize], audio_hist: &[Vec<usize>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut t = vec![0.0; 10];
        let step = text_hist.len();
        t[self.text.get(step).copied().unwrap_or(7)] = 5.0;
        let emitted = audio_hist.len() * self.g;
        let rows = (0..self.g)
            .map(|j| {
                let mut r = vec![0.0; 11];
                let pos = emitted + j;
                r[if pos < self.audio_len { pos % 10 } else { 10 }] = 5.0;
                r
            })
            .collect();
        Ok((t, rows))
    }
}

#[test]
fn decoder_emits_full_groups_and_ceil_steps() {
    for t in 0..12 {
        let m = Scripted {
            text: vec![1, 1, 2],
            audio_len: t,
            g: 3,
        };
        let out = decode_greedy(
            &m,
            &DecodeConfig {
                max_steps: 20,
                repetition_penalty: 1.0,
            },
        )
        .unwrap();
        assert!(out.step_groups.iter().all(|grp| grp.len() == 3));
        assert_eq!(out.audio_steps, t.div_ceil(3));
        assert_eq!(out.audio, (0..t).map(|p| p % 10).collect::<Vec<_>>());
        assert_eq!(out.text, vec![1, 1, 2]);
        assert!(!out.truncated);
    }
}

#[test]
fn penalty_changes_repeated_text_only_when_above_one() {
    // 2.0 vs 1.9: the repeated symbol loses once divided by 1.2
    struct Close;
    impl StepModel for Close {
        fn vocab(&self) -> AugmentedVocab {
            AugmentedVocab::new(3, 2)
        }
        fn group(&self) -> usize {
            1
        }
        fn next_logits(&self, th: &[usize], _: &[Vec<usize>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
            let mut t = vec![2.0, 1.9, 0.0, -9.0, 0.0, -9.0, -9.0];
            if th.len() >= 2 {
                t[4] = 10.0;
            }
            Ok((t, vec![vec![0.0, 0.0, 5.0]]))
        }
    }
    let run = |rho| {
        decode_greedy(
            &Close,
            &DecodeConfig {
                max_steps: 5,
                repetition_penalty: rho,
            },
        )
        .unwrap()
        .text
    };
    assert_eq!(run(1.0), vec![0, 0]);
    assert_eq!(run(1.2), vec![0, 1]);
    assert!(decode_greedy(
        &Close,
        &DecodeConfig {
            max_steps: 5,
            repetition_penalty: 0.0
        }
    )
    .is_err());
}

#[test]
fn step_limit_marks_truncation() {
    let m = Scripted {
        text: vec![1; 10],
        audio_len: 30,
        g: 2,
    };
    let out = decode_greedy(
        &m,
        &DecodeConfig {
            max_steps: 4,
            repetition_penalty: 1.0,
        },
    )
    .unwrap();
    assert!(out.truncated);
    assert_eq!(out.step_groups.len(), 4);
    assert_eq!(out.audio.len(), 8);
}

#[test]
fn context_overflow_is_an_error() {
    let cfg = ModelConfig {
        context: 14,
        ..tiny_model_config(12)
    };
    let m = S2stModel::new(&cfg).unwrap();
    let a_f = rand_tensor(&mut seeded(1), &[8, cfg.encoder_dim]);
    // prompt 2 + 4 projected + 9 steps = 15 > 14
    let t = StepTargets::new(&m.decoder, &[0; 8], &[1]).unwrap();
    let mut g = Graph::new(&m.store);
    assert!(m.forward_teacher_forced(&mut g, &a_f, &t).is_err());
}
