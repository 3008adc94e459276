use std::collections::BTreeMap;

use super::decode::{decode_greedy, DecodeConfig, DecodeOutput, LmStepper};
use super::{group_tokens, AugmentedVocab, FrozenSpeechEncoder, ModelConfig, Projector};
use crate::corpus::SpeechFrames;
use crate::error::{Error, Result};
use crate::nn::{BlockDims, Builder, Graph, Linear, ParamId, ParamStore, Stack};
use crate::rng::derive;
use crate::tensor::{Mask, Tensor, Var};
use crate::training::TrainTask;

/// Initial scale of the learned position table, relative to unit-scale
/// token embeddings. Small tables leave the step-to-source alignment hard
/// to learn from a few hundred pairs.
const POSITION_INIT_STD: f64 = 2.0;

/// Decoder-only LM over `[prompt; A_p; steps]`. Each step position carries
/// the previous text token plus the previous audio group and predicts the
/// next text token and the next group of `G` audio tokens.
#[derive(Clone, Debug)]
pub struct DecoderLM {
    pub vocab: AugmentedVocab,
    pub group: usize,
    pub prompt_len: usize,
    pub context: usize,
    prompt: ParamId,
    pub text_embed: ParamId,
    pub other_embed: ParamId,
    group_in: Linear,
    positions: ParamId,
    stack: Stack,
    text_head: Linear,
    audio_head: Linear,
}

impl DecoderLM {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let vocab = AugmentedVocab::new(cfg.text_vocab, cfg.codebook_size);
        let mut s = b.scope("decoder");
        let d = cfg.d;
        let prompt = s.normal("prompt", &[cfg.prompt_len, d], 1.0);
        let text_embed = s.normal("embed.text", &[vocab.text, d], 1.0);
        let other_embed = s.normal("embed.audio_control", &[vocab.audio + AugmentedVocab::CONTROLS, d], 1.0);
        let group_in = Linear::new(&mut s, "group_in", cfg.group * d, d);
        let positions = s.normal("positions", &[cfg.context, d], POSITION_INIT_STD);
        let stack = Stack::new(
            &mut s,
            "stack",
            cfg.layers,
            BlockDims {
                d,
                heads: cfg.heads,
                d_ff: cfg.d_ff,
                d_cross: None,
            },
        );
        let text_head = Linear::new(&mut s, "text_head", d, vocab.text + AugmentedVocab::CONTROLS);
        let audio_head = Linear::new(&mut s, "audio_head", d, cfg.group * (vocab.audio + 1));
        Self {
            vocab,
            group: cfg.group,
            prompt_len: cfg.prompt_len,
            context: cfg.context,
            prompt,
            text_embed,
            other_embed,
            group_in,
            positions,
            stack,
            text_head,
            audio_head,
        }
    }

    /// Text-head class of an augmented id (text symbols, then controls).
    pub fn text_class(&self, id: usize) -> usize {
        if id < self.vocab.text {
            id
        } else {
            id - self.vocab.audio
        }
    }

    /// Audio-head class of an augmented id (codebook entries, then EOS).
    pub fn audio_class(&self, id: usize) -> usize {
        if id == self.vocab.eos_audio() {
            self.vocab.audio
        } else {
            id - self.vocab.text
        }
    }

    /// Audio logits `(S·G) × (|V_a|+1)` and text logits `S × (|V_t|+4)`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        a_p: Var,
        text_in: &[usize],
        audio_in: &[Vec<usize>],
    ) -> Result<(Var, Var)> {
        let steps = text_in.len();
        if audio_in.len() != steps || audio_in.iter().any(|grp| grp.len() != self.group) {
            return Err(Error::dim(
                "decoder step inputs",
                &[steps, self.group],
                &[audio_in.len(), audio_in.first().map_or(0, Vec::len)],
            ));
        }
        if let Some(&bad) = text_in.iter().chain(audio_in.iter().flatten()).find(|&&i| i >= self.vocab.size()) {
            return Err(Error::Index {
                index: bad,
                bound: self.vocab.size(),
            });
        }
        let t_p = g.rows(a_p);
        let n = self.prompt_len + t_p + steps;
        if n > self.context {
            return Err(Error::Context {
                len: n,
                max: self.context,
            });
        }
        let d = g.cols(a_p);
        let text_table = g.param(self.text_embed);
        let other_table = g.param(self.other_embed);
        let table = g.concat_rows(&[text_table, other_table])?;
        let x_text = g.gather_rows(table, text_in)?;
        let flat: Vec<usize> = audio_in.iter().flatten().copied().collect();
        let x_audio = g.gather_rows(table, &flat)?;
        let x_audio = g.reshape(x_audio, &[steps, self.group * d])?;
        let x_audio = self.group_in.forward(g, x_audio)?;
        let x_steps = g.add(x_text, x_audio)?;

        let prompt = g.param(self.prompt);
        let x = g.concat_rows(&[prompt, a_p, x_steps])?;
        let pos_table = g.param(self.positions);
        let pos = g.slice_rows(pos_table, 0, n)?;
        let x = g.add(x, pos)?;
        let h = self.stack.forward(g, x, None, Mask::Causal)?;
        let h = g.slice_rows(h, self.prompt_len + t_p, steps)?;
        let text_logits = self.text_head.forward(g, h)?;
        let audio_logits = self.audio_head.forward(g, h)?;
        let audio_logits = g.reshape(audio_logits, &[steps * self.group, self.vocab.audio + 1])?;
        Ok((audio_logits, text_logits))
    }
}

/// Teacher-forcing inputs and targets for one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepTargets {
    /// Augmented id fed at each step.
    pub text_in: Vec<usize>,
    pub audio_in: Vec<Vec<usize>>,
    /// Text-head class per step; `None` once the text stream has ended.
    pub text_out: Vec<Option<usize>>,
    /// Audio-head class per group slot; `None` for padding.
    pub audio_out: Vec<Option<usize>>,
}

impl StepTargets {
    /// Text stream `text ++ [EOS_text]`, audio stream `tokens ++ [EOS_audio]`
    /// grouped by `G` with PAD; the step count is the longer of the two.
    pub fn new(lm: &DecoderLM, text: &[usize], tokens: &[usize]) -> Result<Self> {
        let v = lm.vocab;
        let g = lm.group;
        if let Some(&bad) = text.iter().find(|&&t| t >= v.text) {
            return Err(Error::Index {
                index: bad,
                bound: v.text,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v.audio) {
            return Err(Error::Index {
                index: bad,
                bound: v.audio,
            });
        }
        let mut text_stream: Vec<usize> = text.to_vec();
        text_stream.push(v.eos_text());
        let mut audio_stream: Vec<usize> = tokens.iter().map(|&t| v.audio_id(t)).collect();
        audio_stream.push(v.eos_audio());
        let groups = group_tokens(&audio_stream, g, v.pad())?.groups;
        let steps = text_stream.len().max(groups.len());

        let mut text_in = vec![v.bos()];
        let mut audio_in = vec![vec![v.bos(); g]];
        let mut text_out = Vec::with_capacity(steps);
        let mut audio_out = Vec::with_capacity(steps * g);
        for i in 0..steps {
            let t = text_stream.get(i).copied();
            text_out.push(t.map(|id| lm.text_class(id)));
            let grp = groups.get(i).cloned().unwrap_or_else(|| vec![v.pad(); g]);
            audio_out.extend(grp.iter().map(|&id| (id != v.pad()).then(|| lm.audio_class(id))));
            if i + 1 < steps {
                text_in.push(t.unwrap_or(v.pad()));
                audio_in.push(grp);
            }
        }
        Ok(Self {
            text_in,
            audio_in,
            text_out,
            audio_out,
        })
    }

    pub fn steps(&self) -> usize {
        self.text_in.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub audio: Var,
    pub text: Var,
}

/// `L = λ_a·L_audio + λ_t·L_text`, each a mean cross-entropy over the
/// unmasked positions of its stream.
pub fn compute_loss(
    g: &mut Graph<'_>,
    audio_logits: Var,
    text_logits: Var,
    targets: &StepTargets,
    lambda_audio: f64,
    lambda_text: f64,
) -> Result<LossParts> {
    let audio = g.masked_cross_entropy(audio_logits, &targets.audio_out)?;
    let text = g.masked_cross_entropy(text_logits, &targets.text_out)?;
    let wa = g.scale(audio, lambda_audio);
    let wt = g.scale(text, lambda_text);
    let total = g.add(wa, wt)?;
    Ok(LossParts { total, audio, text })
}

/// Frozen encoder plus the trainable projector and decoder.
#[derive(Clone, Debug)]
pub struct S2stModel {
    pub cfg: ModelConfig,
    pub encoder: FrozenSpeechEncoder,
    pub store: ParamStore,
    pub projector: Projector,
    pub decoder: DecoderLM,
}

impl S2stModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = FrozenSpeechEncoder::new(cfg);
        let mut store = ParamStore::new();
        let mut rng = derive(cfg.seed, "lm.init");
        let mut b = Builder::new(&mut store, &mut rng);
        let projector = Projector::new(&mut b, cfg);
        let decoder = DecoderLM::new(&mut b, cfg);
        store.set_trainable(decoder.text_embed, !cfg.preserve_text_embeddings);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            store,
            projector,
            decoder,
        })
    }

    /// A_f for one utterance.
    pub fn encode_speech(&self, s: &SpeechFrames) -> Result<Tensor> {
        self.encoder.encode(s)
    }

    pub fn project(&self, a_f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(a_f.clone());
        let p = self.projector.forward(&mut g, x)?;
        Ok(g.tensor(p))
    }

    pub fn forward_teacher_forced(&self, g: &mut Graph<'_>, a_f: &Tensor, targets: &StepTargets) -> Result<(Var, Var)> {
        let x = g.constant(a_f.clone());
        let a_p = self.projector.forward(g, x)?;
        self.decoder.forward(g, a_p, &targets.text_in, &targets.audio_in)
    }

    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        a_f: &Tensor,
        targets: &StepTargets,
        lambda_audio: f64,
        lambda_text: f64,
    ) -> Result<LossParts> {
        let (audio, text) = self.forward_teacher_forced(g, a_f, targets)?;
        compute_loss(g, audio, text, targets, lambda_audio, lambda_text)
    }

    /// Greedy translation of encoded speech.
    pub fn translate(&self, a_f: &Tensor, cfg: &DecodeConfig) -> Result<DecodeOutput> {
        let stepper = LmStepper::new(self, a_f)?;
        decode_greedy(&stepper, cfg)
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.store.to_named("")
    }

    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        self.store.load_named(named, "")
    }
}

/// One training utterance with its cached encoder output.
#[derive(Clone, Debug)]
pub struct LmExample {
    pub a_f: Tensor,
    pub targets: StepTargets,
    pub key: usize,
}

impl LmExample {
    pub fn new(model: &S2stModel, src: &SpeechFrames, tgt_text: &[usize], tokens: &[usize]) -> Result<Self> {
        let targets = StepTargets::new(&model.decoder, tgt_text, tokens)?;
        Ok(Self {
            a_f: model.encode_speech(src)?,
            key: targets.steps(),
            targets,
        })
    }
}

pub struct LmTask {
    pub model: S2stModel,
    pub train: Vec<LmExample>,
    pub val: Vec<LmExample>,
    pub lambda_audio: f64,
    pub lambda_text: f64,
}

impl TrainTask for LmTask {
    fn params(&self) -> &ParamStore {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn length_key(&self, i: usize) -> usize {
        self.train[i].key
    }

    fn example_loss(&self, g: &mut Graph<'_>, i: usize) -> Result<(Var, [f64; 2])> {
        let ex = &self.train[i];
        let parts = self.model.loss(g, &ex.a_f, &ex.targets, self.lambda_audio, self.lambda_text)?;
        Ok((parts.total, [g.item(parts.audio), g.item(parts.text)]))
    }

    fn validation_loss(&self) -> Result<f64> {
        let set = if self.val.is_empty() { &self.train } else { &self.val };
        let mut total = 0.0;
        for ex in set {
            let mut g = Graph::new(&self.model.store);
            let parts = self.model.loss(&mut g, &ex.a_f, &ex.targets, self.lambda_audio, self.lambda_text)?;
            total += g.item(parts.total);
        }
        Ok(total / set.len() as f64)
    }
}
