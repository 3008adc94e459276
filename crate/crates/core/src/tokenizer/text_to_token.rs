use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockDims, Builder, Graph, Linear, ParamId, ParamStore, Stack};
use crate::rng::derive;
use crate::tensor::{Mask, Tensor, Var};
use crate::training::{TrainConfig, TrainState, TrainTask, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextToTokenConfig {
    pub text_vocab: usize,
    pub codebook_size: usize,
    pub speaker_dim: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_text_len: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for TextToTokenConfig {
    fn default() -> Self {
        Self {
            text_vocab: 20,
            codebook_size: 64,
            speaker_dim: 16,
            d: 32,
            heads: 2,
            d_ff: 64,
            layers: 2,
            max_text_len: 8,
            max_tokens: 16,
            seed: 0,
        }
    }
}

/// Decoder-only model over
/// `[speaker; BOS; text padded to max_text_len; SEP; tokens...; EOS]`.
///
/// Inputs use one table over text symbols, codebook indices and the
/// controls; the output head covers codebook indices plus EOS only.
#[derive(Clone, Debug)]
pub struct TextToTokenModel {
    pub cfg: TextToTokenConfig,
    pub store: ParamStore,
    speaker: Linear,
    embed: ParamId,
    positions: ParamId,
    decoder: Stack,
    head: Linear,
}

/// Result of greedy token generation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGeneration {
    pub tokens: Vec<usize>,
    /// Generation hit `max_tokens` before EOS.
    pub truncated: bool,
}

impl TextToTokenModel {
    pub fn new(cfg: &TextToTokenConfig) -> Result<Self> {
        if !cfg.d.is_multiple_of(cfg.heads) || cfg.text_vocab == 0 || cfg.codebook_size == 0 || cfg.max_text_len == 0 {
            return Err(Error::Config(format!("invalid text-to-token configuration: {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let mut rng = derive(cfg.seed, "t2t.init");
        let mut b = Builder::new(&mut store, &mut rng);
        let speaker = Linear::new(&mut b, "speaker", cfg.speaker_dim, cfg.d);
        let vocab = cfg.text_vocab + cfg.codebook_size + 4;
        let embed = b.normal("embed", &[vocab, cfg.d], 1.0);
        let positions = b.normal("positions", &[Self::context(cfg), cfg.d], 0.1);
        let decoder = Stack::new(
            &mut b,
            "decoder",
            cfg.layers,
            BlockDims {
                d: cfg.d,
                heads: cfg.heads,
                d_ff: cfg.d_ff,
                d_cross: None,
            },
        );
        let head = Linear::new(&mut b, "head", cfg.d, cfg.codebook_size + 1);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            speaker,
            embed,
            positions,
            decoder,
            head,
        })
    }

    fn context(cfg: &TextToTokenConfig) -> usize {
        cfg.max_text_len + cfg.max_tokens + 4
    }

    fn audio_id(&self, t: usize) -> usize {
        self.cfg.text_vocab + t
    }

    fn control(&self, k: usize) -> usize {
        self.cfg.text_vocab + self.cfg.codebook_size + k
    }

    /// Output class used for EOS.
    pub fn eos_class(&self) -> usize {
        self.cfg.codebook_size
    }

    /// Hidden states for the prefix plus `tokens`; row `r` of the returned
    /// logits predicts token `r` (the last row predicts what follows).
    fn logits(&self, g: &mut Graph<'_>, text: &[usize], speaker: &[f64], tokens: &[usize]) -> Result<Var> {
        let c = &self.cfg;
        if text.len() > c.max_text_len {
            return Err(Error::Context {
                len: text.len(),
                max: c.max_text_len,
            });
        }
        if speaker.len() != c.speaker_dim {
            return Err(Error::dim("speaker embedding", &[speaker.len()], &[c.speaker_dim]));
        }
        if let Some(&bad) = text.iter().find(|&&s| s >= c.text_vocab) {
            return Err(Error::Index {
                index: bad,
                bound: c.text_vocab,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.codebook_size) {
            return Err(Error::Index {
                index: bad,
                bound: c.codebook_size,
            });
        }
        let (bos, sep, pad) = (self.control(0), self.control(1), self.control(3));
        let mut ids = vec![bos];
        ids.extend_from_slice(text);
        ids.resize(1 + c.max_text_len, pad);
        ids.push(sep);
        ids.extend(tokens.iter().map(|&t| self.audio_id(t)));
        let n = ids.len() + 1;
        if n > Self::context(c) {
            return Err(Error::Context {
                len: n,
                max: Self::context(c),
            });
        }
        let spk = g.constant(Tensor::new(vec![1, c.speaker_dim], speaker.to_vec())?);
        let spk = self.speaker.forward(g, spk)?;
        let table = g.param(self.embed);
        let emb = g.gather_rows(table, &ids)?;
        let x = g.concat_rows(&[spk, emb])?;
        let pos_table = g.param(self.positions);
        let pos = g.slice_rows(pos_table, 0, n)?;
        let x = g.add(x, pos)?;
        let h = self.decoder.forward(g, x, None, Mask::Causal)?;
        // the SEP row and every token row predict the next token
        let start = 1 + 1 + c.max_text_len;
        let h = g.slice_rows(h, start, tokens.len() + 1)?;
        self.head.forward(g, h)
    }

    /// Teacher-forced cross-entropy of `tokens` followed by EOS.
    pub fn loss(&self, g: &mut Graph<'_>, text: &[usize], speaker: &[f64], tokens: &[usize]) -> Result<Var> {
        let logits = self.logits(g, text, speaker, tokens)?;
        let mut targets = tokens.to_vec();
        targets.push(self.eos_class());
        g.softmax_cross_entropy(logits, &targets)
    }

    /// Greedy generation; every step re-runs the full prefix.
    pub fn generate(&self, text: &[usize], speaker: &[f64]) -> Result<TokenGeneration> {
        if text.is_empty() {
            return Ok(TokenGeneration {
                tokens: Vec::new(),
                truncated: false,
            });
        }
        let mut tokens = Vec::new();
        while tokens.len() < self.cfg.max_tokens {
            let mut g = Graph::new(&self.store);
            let l = self.logits(&mut g, text, speaker, &tokens)?;
            let v = self.cfg.codebook_size + 1;
            let last = &g.value(l)[tokens.len() * v..];
            let next = argmax(last);
            if next == self.eos_class() {
                return Ok(TokenGeneration {
                    tokens,
                    truncated: false,
                });
            }
            tokens.push(next);
        }
        Ok(TokenGeneration {
            tokens,
            truncated: true,
        })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &v) in row.iter().enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

pub fn text_to_tokens(model: &TextToTokenModel, text: &[usize], speaker: &[f64]) -> Result<TokenGeneration> {
    model.generate(text, speaker)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextToTokenExample {
    pub text: Vec<usize>,
    pub speaker: Vec<f64>,
    pub tokens: Vec<usize>,
}

pub struct TextToTokenTask {
    pub model: TextToTokenModel,
    pub train: Vec<TextToTokenExample>,
    pub val: Vec<TextToTokenExample>,
}

impl TrainTask for TextToTokenTask {
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
        self.train[i].tokens.len()
    }

    fn example_loss(&self, g: &mut Graph<'_>, i: usize) -> Result<(Var, [f64; 2])> {
        let ex = &self.train[i];
        let l = self.model.loss(g, &ex.text, &ex.speaker, &ex.tokens)?;
        Ok((l, [g.item(l), 0.0]))
    }

    fn validation_loss(&self) -> Result<f64> {
        let set = if self.val.is_empty() { &self.train } else { &self.val };
        let mut total = 0.0;
        for ex in set {
            let mut g = Graph::new(&self.model.store);
            let l = self.model.loss(&mut g, &ex.text, &ex.speaker, &ex.tokens)?;
            total += g.item(l);
        }
        Ok(total / set.len() as f64)
    }
}

pub fn train_text_to_token(
    train: Vec<TextToTokenExample>,
    val: Vec<TextToTokenExample>,
    cfg: &TextToTokenConfig,
    tcfg: &TrainConfig,
) -> Result<(TextToTokenModel, TrainState)> {
    let mut task = TextToTokenTask {
        model: TextToTokenModel::new(cfg)?,
        train,
        val,
    };
    let state = Trainer::new(tcfg.clone())?.train(&mut task)?;
    Ok((task.model, state))
}
