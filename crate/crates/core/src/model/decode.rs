use serde::{Deserialize, Serialize};

use super::{AugmentedVocab, S2stModel};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::tensor::Tensor;

/// Anything that can score the next decode step from the streams emitted
/// so far.
pub trait StepModel {
    fn vocab(&self) -> AugmentedVocab;
    fn group(&self) -> usize;

    /// Text-head logits (`|V_t| + 4` classes) and one row of audio-head
    /// logits (`|V_a| + 1` classes) per group slot, given the augmented ids
    /// emitted at earlier steps.
    fn next_logits(&self, text_hist: &[usize], audio_hist: &[Vec<usize>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_steps: usize,
    pub repetition_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 32,
            repetition_penalty: 1.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeOutput {
    /// Text symbols, without EOS.
    pub text: Vec<usize>,
    /// Codebook indices, without EOS or padding.
    pub audio: Vec<usize>,
    /// The `G` augmented ids emitted at every step.
    pub step_groups: Vec<Vec<usize>>,
    /// Steps that emitted at least one codebook index.
    pub audio_steps: usize,
    /// Hit `max_steps` before both streams ended.
    pub truncated: bool,
}

/// `l → l/ρ` for positive and `l → l·ρ` for non-positive logits of every
/// token in `history` (each token penalized once).
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[usize], rho: f64) {
    let mut seen = vec![false; logits.len()];
    for &t in history {
        if t < logits.len() && !seen[t] {
            seen[t] = true;
            let l = logits[t];
            logits[t] = if l > 0.0 { l / rho } else { l * rho };
        }
    }
}

fn argmax_allowed(row: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && (best.1 == usize::MAX || v > best.0) {
            best = (v, i);
        }
    }
    best.1
}

/// Greedy decoding of both streams. Every step emits one text token and a
/// full group of `G` audio ids; each stream stops at its own EOS and is fed
/// PAD afterwards.
pub fn decode_greedy<M: StepModel + ?Sized>(m: &M, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    if cfg.repetition_penalty <= 0.0 {
        return Err(Error::Config("repetition penalty must be positive".into()));
    }
    let v = m.vocab();
    let g = m.group();
    let eos_text_class = v.text + 1;
    let eos_audio_class = v.audio;
    let mut out = DecodeOutput {
        text: Vec::new(),
        audio: Vec::new(),
        step_groups: Vec::new(),
        audio_steps: 0,
        truncated: false,
    };
    let mut text_hist = Vec::new();
    let mut audio_hist: Vec<Vec<usize>> = Vec::new();
    let (mut text_done, mut audio_done) = (false, false);
    for _ in 0..cfg.max_steps {
        if text_done && audio_done {
            break;
        }
        let (mut tl, al) = m.next_logits(&text_hist, &audio_hist)?;
        if tl.len() != v.text + AugmentedVocab::CONTROLS || al.len() != g {
            return Err(Error::dim("step logits", &[tl.len(), al.len()], &[v.text + 4, g]));
        }
        if text_done {
            text_hist.push(v.pad());
        } else {
            apply_repetition_penalty(&mut tl[..v.text], &out.text, cfg.repetition_penalty);
            let c = argmax_allowed(&tl, |i| i < v.text || i == eos_text_class);
            if c == eos_text_class {
                text_done = true;
                text_hist.push(v.eos_text());
            } else {
                out.text.push(c);
                text_hist.push(v.text_id(c));
            }
        }
        let mut grp = Vec::with_capacity(g);
        let mut emitted = false;
        for row in &al {
            if audio_done {
                grp.push(v.pad());
                continue;
            }
            let c = argmax_allowed(row, |i| i <= eos_audio_class);
            if c == eos_audio_class {
                audio_done = true;
                grp.push(v.eos_audio());
            } else {
                emitted = true;
                out.audio.push(c);
                grp.push(v.audio_id(c));
            }
        }
        out.audio_steps += usize::from(emitted);
        out.step_groups.push(grp.clone());
        audio_hist.push(grp);
    }
    out.truncated = !(text_done && audio_done);
    Ok(out)
}

/// Runs the full decoder for every step (no attention cache).
pub struct LmStepper<'a> {
    model: &'a S2stModel,
    a_p: Tensor,
}

impl<'a> LmStepper<'a> {
    pub fn new(model: &'a S2stModel, a_f: &Tensor) -> Result<Self> {
        Ok(Self {
            model,
            a_p: model.project(a_f)?,
        })
    }
}

impl StepModel for LmStepper<'_> {
    fn vocab(&self) -> AugmentedVocab {
        self.model.decoder.vocab
    }

    fn group(&self) -> usize {
        self.model.decoder.group
    }

    fn next_logits(&self, text_hist: &[usize], audio_hist: &[Vec<usize>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let v = self.vocab();
        let g = self.group();
        let mut text_in = vec![v.bos()];
        text_in.extend_from_slice(text_hist);
        let mut audio_in = vec![vec![v.bos(); g]];
        audio_in.extend_from_slice(audio_hist);
        let mut graph = Graph::new(&self.model.store);
        let a_p = graph.constant(self.a_p.clone());
        let (audio, text) = self.model.decoder.forward(&mut graph, a_p, &text_in, &audio_in)?;
        let steps = text_in.len();
        let tc = graph.cols(text);
        let text_row = graph.value(text)[(steps - 1) * tc..].to_vec();
        let ac = graph.cols(audio);
        let audio_rows = graph.value(audio)[(steps - 1) * g * ac..]
            .chunks(ac)
            .map(<[f64]>::to_vec)
            .collect();
        Ok((text_row, audio_rows))
    }
}
