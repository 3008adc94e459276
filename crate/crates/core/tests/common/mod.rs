//! Shared fixtures for the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;

use s2st::corpus::{generate_toy_corpus, Manifest, SpeechFrames, ToyCorpusConfig};
use s2st::model::{ModelConfig, Projector, ProjectorKind, S2stModel, StepTargets};
use s2st::nn::{gradcheck_params, Builder, ParamStore};
use s2st::rng::{derive, normal_vec, SeededRng};
use s2st::tensor::gradcheck::{check, GradCheck};
use s2st::vocoder::{TimbreVocoder, VocoderConfig, VocoderExample};
use s2st::{Mask, Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Parameter entries sampled per tensor in module checks.
pub const MODULE_COORDS: usize = 12;

/// 500 training and 50 validation pairs of the default toy corpus.
pub fn toy_split(seed: u64) -> (Manifest, Manifest) {
    let m = generate_toy_corpus(&ToyCorpusConfig::default(), seed).expect("toy corpus");
    m.split_at(500)
}

pub fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, 1.0)).expect("shape")
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output entry gets a
/// distinct weight.
fn weighted_sum(t: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(Tensor::new(t.shape(out).to_vec(), w.data()[..t.value(out).len()].to_vec())?);
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

pub struct Case {
    pub name: &'static str,
    pub run: fn(&mut SeededRng) -> Result<GradCheck>,
}

macro_rules! op_case {
    ($name:expr, |$rng:ident| $body:expr) => {
        Case {
            name: $name,
            run: |$rng: &mut SeededRng| $body,
        }
    };
}

fn dims(rng: &mut SeededRng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

fn unary(rng: &mut SeededRng, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<GradCheck> {
    let (m, n, _) = dims(rng);
    let x = rand_tensor(rng, &[m, n]);
    let w = rand_tensor(rng, &[64 * 64]);
    check(&[x], FD_STEP, move |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y, &w)
    })
}

fn binary(rng: &mut SeededRng, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<GradCheck> {
    let (m, n, _) = dims(rng);
    let a = rand_tensor(rng, &[m, n]);
    let b = rand_tensor(rng, &[m, n]);
    let w = rand_tensor(rng, &[64 * 64]);
    check(&[a, b], FD_STEP, move |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y, &w)
    })
}

/// One case per differentiable tape operation.
pub fn op_cases() -> Vec<Case> {
    vec![
        op_case!("matmul", |rng| {
            let (m, k, n) = dims(rng);
            let a = rand_tensor(rng, &[m, k]);
            let b = rand_tensor(rng, &[k, n]);
            let w = rand_tensor(rng, &[m * n]);
            check(&[a, b], FD_STEP, move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            })
        }),
        op_case!("add", |rng| binary(rng, |t, a, b| t.add(a, b))),
        op_case!("sub", |rng| binary(rng, |t, a, b| t.sub(a, b))),
        op_case!("mul", |rng| binary(rng, |t, a, b| t.mul(a, b))),
        op_case!("mse", |rng| binary(rng, |t, a, b| t.mse(a, b))),
        op_case!("scale", |rng| unary(rng, |t, a| Ok(t.scale(a, -1.7)))),
        op_case!("relu", |rng| unary(rng, |t, a| Ok(t.relu(a)))),
        op_case!("softmax", |rng| unary(rng, |t, a| Ok(t.softmax(a)))),
        op_case!("sum", |rng| unary(rng, |t, a| Ok(t.sum(a)))),
        op_case!("mean", |rng| unary(rng, |t, a| t.mean(a))),
        op_case!("reshape", |rng| unary(rng, |t, a| {
            let n = t.value(a).len();
            t.reshape(a, &[1, n])
        })),
        op_case!("slice_rows", |rng| unary(rng, |t, a| {
            let r = t.rows(a);
            t.slice_rows(a, r / 2, r - r / 2)
        })),
        op_case!("add_row", |rng| {
            let (m, n, _) = dims(rng);
            let a = rand_tensor(rng, &[m, n]);
            let r = rand_tensor(rng, &[n]);
            let w = rand_tensor(rng, &[m * n]);
            check(&[a, r], FD_STEP, move |t, v| {
                let y = t.add_row(v[0], v[1])?;
                weighted_sum(t, y, &w)
            })
        }),
        op_case!("layer_norm", |rng| {
            let m = rng.random_range(1..4);
            let n = rng.random_range(2..6);
            let x = rand_tensor(rng, &[m, n]);
            let gamma = rand_tensor(rng, &[n]);
            let beta = rand_tensor(rng, &[n]);
            let w = rand_tensor(rng, &[m * n]);
            check(&[x, gamma, beta], FD_STEP, move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &w)
            })
        }),
        op_case!("embedding_lookup", |rng| {
            let (v_n, d, _) = dims(rng);
            let table = rand_tensor(rng, &[v_n + 1, d]);
            let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..=v_n)).collect();
            let w = rand_tensor(rng, &[5 * d]);
            check(&[table], FD_STEP, move |t, v| {
                let y = t.gather_rows(v[0], &ids)?;
                weighted_sum(t, y, &w)
            })
        }),
        op_case!("concat_rows", |rng| {
            let (m, n, p) = dims(rng);
            let a = rand_tensor(rng, &[m, n]);
            let b = rand_tensor(rng, &[p, n]);
            let w = rand_tensor(rng, &[(m + p) * n]);
            check(&[a, b], FD_STEP, move |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                weighted_sum(t, y, &w)
            })
        }),
        op_case!("concat_cols", |rng| {
            let (m, n, p) = dims(rng);
            let a = rand_tensor(rng, &[m, n]);
            let b = rand_tensor(rng, &[m, p]);
            let w = rand_tensor(rng, &[m * (n + p)]);
            check(&[a, b], FD_STEP, move |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                weighted_sum(t, y, &w)
            })
        }),
        op_case!("softmax_cross_entropy", |rng| {
            let (n, v_n, _) = dims(rng);
            let v_n = v_n + 1;
            let logits = rand_tensor(rng, &[n, v_n]);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..v_n)).collect();
            check(&[logits], FD_STEP, move |t, v| t.softmax_cross_entropy(v[0], &targets))
        }),
        op_case!("masked_cross_entropy", |rng| {
            let n = rng.random_range(2..6);
            let v_n = rng.random_range(2..6);
            let logits = rand_tensor(rng, &[n, v_n]);
            let mut targets: Vec<Option<usize>> =
                (0..n).map(|_| rng.random_bool(0.6).then(|| rng.random_range(0..v_n))).collect();
            targets[0] = Some(0);
            check(&[logits], FD_STEP, move |t, v| t.masked_cross_entropy(v[0], &targets))
        }),
        op_case!("attention", |rng| attention_case(rng, Mask::None, false)),
        op_case!("attention_causal", |rng| attention_case(rng, Mask::Causal, false)),
        op_case!("cross_attention", |rng| attention_case(rng, Mask::None, true)),
    ]
}

fn attention_case(rng: &mut SeededRng, mask: Mask, cross: bool) -> Result<GradCheck> {
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..4);
    let tq = rng.random_range(1..5);
    let tk = if cross { rng.random_range(1..5) } else { tq };
    let q = rand_tensor(rng, &[tq, d]);
    let k = rand_tensor(rng, &[tk, d]);
    let v = rand_tensor(rng, &[tk, d]);
    let w = rand_tensor(rng, &[tq * d]);
    check(&[q, k, v], FD_STEP, move |t, x| {
        let y = t.attention(x[0], x[1], x[2], heads, mask)?;
        weighted_sum(t, y, &w)
    })
}

pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        features: 4,
        fixed_input_len: 8,
        encoder_dim: 8,
        encoder_layers: 1,
        encoder_heads: 2,
        k: 2,
        n_q: 3,
        d_q: 8,
        d: 8,
        layers: 1,
        heads: 2,
        d_ff: 16,
        context: 40,
        prompt_len: 2,
        text_vocab: 5,
        codebook_size: 6,
        group: 3,
        seed,
        ..ModelConfig::default()
    }
}

fn projector_case(rng: &mut SeededRng, kind: ProjectorKind) -> Result<GradCheck> {
    let cfg = ModelConfig {
        projector: kind,
        ..tiny_model_config(rng.random())
    };
    let mut store = ParamStore::new();
    let mut init = derive(cfg.seed, "gradcheck.projector");
    let p = Projector::new(&mut Builder::new(&mut store, &mut init), &cfg);
    let t_e = rng.random_range(cfg.k..12);
    let a_f = rand_tensor(rng, &[t_e, cfg.encoder_dim]);
    let w = rand_tensor(rng, &[64 * 64]);
    gradcheck_params(&store, FD_STEP, MODULE_COORDS, rng, |g| {
        let x = g.constant(a_f.clone());
        let y = p.forward(g, x)?;
        weighted_sum(g, y, &w)
    })
}

/// Parameter-gradient checks of whole modules.
pub fn module_cases() -> Vec<Case> {
    vec![
        op_case!("projector Linear", |rng| projector_case(rng, ProjectorKind::Linear)),
        op_case!("projector Conv1D-Linear", |rng| projector_case(rng, ProjectorKind::Conv1dLinear)),
        op_case!("projector Q-Former", |rng| projector_case(rng, ProjectorKind::QFormer { layers: 2 })),
        op_case!("decoder (projector + LM + losses)", |rng| {
            let cfg = tiny_model_config(rng.random());
            let model = S2stModel::new(&cfg)?;
            let a_f = rand_tensor(rng, &[cfg.fixed_input_len, cfg.encoder_dim]);
            let text: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..5)).collect();
            let tokens: Vec<usize> = (0..rng.random_range(0..7)).map(|_| rng.random_range(0..6)).collect();
            let targets = StepTargets::new(&model.decoder, &text, &tokens)?;
            gradcheck_params(&model.store, FD_STEP, MODULE_COORDS, rng, |g| {
                Ok(model.loss(g, &a_f, &targets, 1.0, 0.7)?.total)
            })
        }),
        op_case!("vocoder", |rng| {
            let cfg = VocoderConfig {
                codebook_size: 6,
                speaker_dim: 4,
                speaker_hidden: 4,
                features: 3,
                upsample: 2,
                d_embed: 4,
                hidden: 8,
                seed: rng.random(),
                ..VocoderConfig::default()
            };
            let voc = TimbreVocoder::new(&cfg)?;
            let n = rng.random_range(1..5);
            let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
            let mut speaker = normal_vec(rng, 4, 1.0);
            let norm = speaker.iter().map(|x| x * x).sum::<f64>().sqrt();
            speaker.iter_mut().for_each(|x| *x /= norm);
            let target = SpeechFrames::new(rand_tensor(rng, &[n * 2, 3]), 50.0)?;
            let ex = VocoderExample { tokens, speaker, target };
            gradcheck_params(&voc.store, FD_STEP, MODULE_COORDS, rng, |g| voc.loss(g, &ex))
        }),
    ]
}

/// Runs `trials` checks of one case; returns the worst relative error.
pub fn worst_over(case: &Case, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = derive(seed, case.name);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        worst = worst.max((case.run)(&mut rng)?.worst());
    }
    Ok(worst)
}
