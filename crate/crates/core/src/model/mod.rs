//! The translation network: frozen speech encoder, projector, and a
//! decoder-only language model over an augmented text + audio vocabulary
//! that emits one text token and a group of audio tokens per step.

mod decode;
mod decoder;
mod encoder;
mod projector;

pub use decode::{apply_repetition_penalty, decode_greedy, DecodeConfig, DecodeOutput, LmStepper, StepModel};
pub use decoder::{compute_loss, DecoderLM, LossParts, LmExample, LmTask, S2stModel, StepTargets};
pub use encoder::{FrozenSpeechEncoder, PadSide};
pub use projector::{Projector, ProjectorKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub features: usize,
    /// Encoder input length after zero padding or truncation.
    pub fixed_input_len: usize,
    pub pad_side: PadSide,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub projector: ProjectorKind,
    /// Grouping factor of the Linear and Conv1D projectors.
    pub k: usize,
    pub n_q: usize,
    pub d_q: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub prompt_len: usize,
    pub text_vocab: usize,
    pub codebook_size: usize,
    pub group: usize,
    /// Freeze the text rows of the embedding table.
    pub preserve_text_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 16,
            fixed_input_len: 32,
            pad_side: PadSide::Start,
            encoder_dim: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            projector: ProjectorKind::Linear,
            k: 4,
            n_q: 32,
            d_q: 128,
            d: 128,
            layers: 4,
            heads: 4,
            d_ff: 512,
            context: 512,
            prompt_len: 4,
            text_vocab: 20,
            codebook_size: 64,
            group: 3,
            preserve_text_embeddings: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smaller decoder for quick CPU runs on the toy corpus.
    pub fn toy() -> Self {
        Self {
            d: 128,
            layers: 2,
            heads: 8,
            d_ff: 256,
            n_q: 8,
            d_q: 64,
            context: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.features,
            self.fixed_input_len,
            self.encoder_dim,
            self.encoder_heads,
            self.k,
            self.d,
            self.heads,
            self.d_ff,
            self.context,
            self.text_vocab,
            self.codebook_size,
            self.group,
        ];
        let qformer_ok = match self.projector {
            ProjectorKind::QFormer { layers } => layers > 0 && self.n_q > 0 && self.d_q.is_multiple_of(self.heads),
            _ => true,
        };
        if positive.contains(&0)
            || !self.d.is_multiple_of(self.heads)
            || !self.encoder_dim.is_multiple_of(self.encoder_heads)
            || !qformer_ok
        {
            return Err(Error::Config(format!("invalid model configuration: {self:?}")));
        }
        Ok(())
    }
}

/// What an augmented-vocabulary id stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Text(usize),
    Audio(usize),
    Bos,
    EosText,
    EosAudio,
    Pad,
}

/// Text ids `[0, V_t)`, audio ids `[V_t, V_t + V_a)`, then BOS, EOS_text,
/// EOS_audio and PAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedVocab {
    pub text: usize,
    pub audio: usize,
}

impl AugmentedVocab {
    pub const CONTROLS: usize = 4;

    pub fn new(text: usize, audio: usize) -> Self {
        Self { text, audio }
    }

    pub fn size(&self) -> usize {
        self.text + self.audio + Self::CONTROLS
    }

    pub fn bos(&self) -> usize {
        self.text + self.audio
    }

    pub fn eos_text(&self) -> usize {
        self.bos() + 1
    }

    pub fn eos_audio(&self) -> usize {
        self.bos() + 2
    }

    pub fn pad(&self) -> usize {
        self.bos() + 3
    }

    pub fn text_id(&self, i: usize) -> usize {
        debug_assert!(i < self.text);
        i
    }

    pub fn audio_id(&self, i: usize) -> usize {
        debug_assert!(i < self.audio);
        self.text + i
    }

    pub fn id(&self, kind: TokenKind) -> usize {
        match kind {
            TokenKind::Text(i) => self.text_id(i),
            TokenKind::Audio(i) => self.audio_id(i),
            TokenKind::Bos => self.bos(),
            TokenKind::EosText => self.eos_text(),
            TokenKind::EosAudio => self.eos_audio(),
            TokenKind::Pad => self.pad(),
        }
    }

    pub fn kind(&self, id: usize) -> Result<TokenKind> {
        let t = self.text;
        let a = t + self.audio;
        Ok(match id {
            i if i < t => TokenKind::Text(i),
            i if i < a => TokenKind::Audio(i - t),
            i if i == a => TokenKind::Bos,
            i if i == a + 1 => TokenKind::EosText,
            i if i == a + 2 => TokenKind::EosAudio,
            i if i == a + 3 => TokenKind::Pad,
            i => {
                return Err(Error::Index {
                    index: i,
                    bound: self.size(),
                })
            }
        })
    }
}

/// A token sequence padded to a multiple of `group` and cut into groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupedTokenSeq {
    pub groups: Vec<Vec<usize>>,
    pub group: usize,
    /// Length before padding.
    pub len: usize,
}

/// Pads `tokens` with `pad` to a multiple of `g` and partitions it so that
/// group `i` holds `tokens[i*g .. (i+1)*g]`.
pub fn group_tokens(tokens: &[usize], g: usize, pad: usize) -> Result<GroupedTokenSeq> {
    if g == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    let groups = tokens
        .chunks(g)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(g, pad);
            v
        })
        .collect();
    Ok(GroupedTokenSeq {
        groups,
        group: g,
        len: tokens.len(),
    })
}

/// Concatenates groups and strips `pad` entries.
pub fn ungroup_tokens(seq: &GroupedTokenSeq, pad: usize) -> Vec<usize> {
    seq.groups.iter().flatten().copied().filter(|&t| t != pad).collect()
}
