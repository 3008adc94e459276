use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{quantize, stack_frames, Codebook};
use crate::corpus::{Manifest, SpeechFrames};
use crate::error::{Error, Result};
use crate::nn::{add_positions, BlockDims, Builder, Graph, Linear, ParamId, ParamStore, Stack};
use crate::rng::{derive, normal_vec};
use crate::tensor::{Mask, Tensor, Var};
use crate::training::{Adam, TrainConfig, TrainState, TrainTask, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub features: usize,
    /// Frames concatenated into one encoder position.
    pub frame_stack: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder1_layers: usize,
    pub encoder2_layers: usize,
    pub asr_layers: usize,
    pub codebook_size: usize,
    pub text_vocab: usize,
    /// Commitment weight.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    /// Toy scale.
    fn default() -> Self {
        Self {
            features: 16,
            frame_stack: 4,
            d: 32,
            heads: 2,
            d_ff: 64,
            encoder1_layers: 2,
            encoder2_layers: 2,
            asr_layers: 2,
            codebook_size: 64,
            text_vocab: 20,
            beta: 0.25,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    /// Codebook and encoder1 depth of the full-size tokenizer.
    pub fn full_scale() -> Self {
        Self {
            codebook_size: 4096,
            encoder1_layers: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.features,
            self.frame_stack,
            self.d,
            self.heads,
            self.d_ff,
            self.codebook_size,
            self.text_vocab,
        ];
        if positive.contains(&0) || !self.d.is_multiple_of(self.heads) || self.beta < 0.0 {
            return Err(Error::Config(format!("invalid tokenizer configuration: {self:?}")));
        }
        Ok(())
    }
}

/// Split encoder, quantizer and ASR decoder with their parameters.
#[derive(Clone, Debug)]
pub struct SpeechTokenizer {
    pub cfg: TokenizerConfig,
    pub store: ParamStore,
    input: Linear,
    encoder1: Stack,
    codebook: ParamId,
    encoder2: Stack,
    asr_embed: ParamId,
    asr: Stack,
    asr_out: Linear,
}

impl SpeechTokenizer {
    pub fn new(cfg: &TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = derive(cfg.seed, "tokenizer.init");
        let mut b = Builder::new(&mut store, &mut rng);
        let enc = BlockDims {
            d: cfg.d,
            heads: cfg.heads,
            d_ff: cfg.d_ff,
            d_cross: None,
        };
        let input = Linear::new(&mut b, "input", cfg.features * cfg.frame_stack, cfg.d);
        let encoder1 = Stack::new(&mut b, "encoder1", cfg.encoder1_layers, enc);
        let codebook = b.normal("codebook", &[cfg.codebook_size, cfg.d], 1.0);
        let encoder2 = Stack::new(&mut b, "encoder2", cfg.encoder2_layers, enc);
        // text symbols, then BOS
        let asr_embed = b.normal("asr.embed", &[cfg.text_vocab + 1, cfg.d], 1.0);
        let asr = Stack::new(
            &mut b,
            "asr",
            cfg.asr_layers,
            BlockDims {
                d_cross: Some(cfg.d),
                ..enc
            },
        );
        // text symbols, then EOS
        let asr_out = Linear::new(&mut b, "asr.out", cfg.d, cfg.text_vocab + 1);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            input,
            encoder1,
            codebook,
            encoder2,
            asr_embed,
            asr,
            asr_out,
        })
    }

    pub fn bos(&self) -> usize {
        self.cfg.text_vocab
    }

    pub fn eos(&self) -> usize {
        self.cfg.text_vocab
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.store.get(self.codebook).clone(),
        }
    }

    pub fn codebook_param(&self) -> ParamId {
        self.codebook
    }

    /// Stacked encoder input for a frame matrix.
    pub fn prepare(&self, frames: &SpeechFrames) -> Result<Tensor> {
        if frames.num_frames() == 0 {
            return Err(Error::InputTooShort { len: 0, min: 1 });
        }
        if frames.features() != self.cfg.features {
            return Err(Error::dim(
                "tokenizer input",
                &[frames.num_frames(), frames.features()],
                &[frames.num_frames(), self.cfg.features],
            ));
        }
        Ok(stack_frames(frames.tensor(), self.cfg.frame_stack))
    }

    /// H = Encoder₁(PosEnc(X)) on prepared input.
    pub fn stage1(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.input.forward(g, x)?;
        let h = add_positions(g, h)?;
        self.encoder1.forward(g, h, None, Mask::None)
    }

    /// H̃ = Encoder₂(PosEnc(H̄)).
    pub fn stage2(&self, g: &mut Graph<'_>, h_bar: Var) -> Result<Var> {
        let h = add_positions(g, h_bar)?;
        self.encoder2.forward(g, h, None, Mask::None)
    }

    /// Text logits for `y_shifted` (BOS followed by the text prefix), causal
    /// over the text and cross-attending to `h_tilde`.
    pub fn asr_logits(&self, g: &mut Graph<'_>, h_tilde: Var, y_shifted: &[usize]) -> Result<Var> {
        if y_shifted.is_empty() {
            return Err(Error::Contract("ASR decoding needs a non-empty target".into()));
        }
        if let Some(&bad) = y_shifted.iter().find(|&&y| y > self.cfg.text_vocab) {
            return Err(Error::Index {
                index: bad,
                bound: self.cfg.text_vocab + 1,
            });
        }
        let table = g.param(self.asr_embed);
        let y = g.gather_rows(table, y_shifted)?;
        let y = add_positions(g, y)?;
        let h = self.asr.forward(g, y, Some(h_tilde), Mask::Causal)?;
        self.asr_out.forward(g, h)
    }

    pub fn encode_stage1(&self, frames: &SpeechFrames) -> Result<Tensor> {
        let x = self.prepare(frames)?;
        let mut g = Graph::new(&self.store);
        let x = g.constant(x);
        let h = self.stage1(&mut g, x)?;
        Ok(g.tensor(h))
    }

    pub fn encode_stage2(&self, h_bar: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(h_bar.clone());
        let h = self.stage2(&mut g, x)?;
        Ok(g.tensor(h))
    }

    pub fn asr_decode_logits(&self, h_tilde: &Tensor, y_shifted: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let h = g.constant(h_tilde.clone());
        let l = self.asr_logits(&mut g, h, y_shifted)?;
        Ok(g.tensor(l))
    }

    /// Semantic tokens for a frame matrix, one per stacked position.
    pub fn tokenize(&self, frames: &SpeechFrames) -> Result<Vec<usize>> {
        let h = self.encode_stage1(frames)?;
        quantize(&h, &self.codebook())
    }

    /// Total training loss and its (ASR cross-entropy, VQ) parts for one
    /// utterance.
    pub fn loss(&self, g: &mut Graph<'_>, x: &Tensor, text: &[usize]) -> Result<(Var, [f64; 2])> {
        let x = g.constant(x.clone());
        let h = self.stage1(g, x)?;
        let table = g.param(self.codebook);
        let cb = Codebook::new(g.tensor(table))?;
        let codes = quantize(&g.tensor(h), &cb)?;
        let c = g.gather_rows(table, &codes)?;
        let h_bar = g.straight_through(h, c)?;
        let h_sg = g.detach(h);
        let c_sg = g.detach(c);
        let codebook_loss = g.mse(h_sg, c)?;
        let commit = g.mse(h, c_sg)?;
        let commit = g.scale(commit, self.cfg.beta);
        let vq = g.add(codebook_loss, commit)?;

        let h_tilde = self.stage2(g, h_bar)?;
        let mut y_in = vec![self.bos()];
        y_in.extend_from_slice(text);
        let mut targets = text.to_vec();
        targets.push(self.eos());
        let logits = self.asr_logits(g, h_tilde, &y_in)?;
        let ce = g.softmax_cross_entropy(logits, &targets)?;
        let parts = [g.item(ce), g.item(vq)];
        Ok((g.add(ce, vq)?, parts))
    }

    /// Sets the codebook to distinct encoder outputs drawn from `inputs`.
    pub fn init_codebook(&mut self, inputs: &[Tensor]) -> Result<()> {
        let rows = self.encoder_rows(inputs)?;
        let mut rng = derive(self.cfg.seed, "tokenizer.codebook");
        let c = self.cfg.codebook_size;
        let d = self.cfg.d;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng);
        let table = self.store.get_mut(self.codebook).data_mut();
        for n in 0..c {
            let src = &rows[order[n % order.len().max(1)]];
            let jitter = normal_vec(&mut rng, d, 1e-3);
            for j in 0..d {
                table[n * d + j] = src[j] + jitter[j];
            }
        }
        Ok(())
    }

    fn encoder_rows(&self, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::new();
        for x in inputs {
            let mut g = Graph::new(&self.store);
            let x = g.constant(x.clone());
            let h = self.stage1(&mut g, x)?;
            let t = g.tensor(h);
            rows.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        if rows.is_empty() {
            return Err(Error::Contract("no encoder outputs to draw codebook entries from".into()));
        }
        Ok(rows)
    }

    /// Re-seeds entries no input quantizes to; returns their indices.
    pub fn reseed_dead_codes(&mut self, inputs: &[Tensor], salt: &str) -> Result<Vec<usize>> {
        let rows = self.encoder_rows(inputs)?;
        let cb = self.codebook();
        let mut used = vec![false; cb.size()];
        for r in &rows {
            let t = Tensor::new(vec![1, r.len()], r.clone())?;
            used[quantize(&t, &cb)?[0]] = true;
        }
        let dead: Vec<usize> = (0..cb.size()).filter(|&n| !used[n]).collect();
        let mut rng = derive(self.cfg.seed, &format!("tokenizer.reseed/{salt}"));
        let d = self.cfg.d;
        let table = self.store.get_mut(self.codebook).data_mut();
        for &n in &dead {
            let src = rows.choose(&mut rng).expect("non-empty");
            let jitter = normal_vec(&mut rng, d, 1e-3);
            for j in 0..d {
                table[n * d + j] = src[j] + jitter[j];
            }
        }
        Ok(dead)
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.store.to_named("")
    }

    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        self.store.load_named(named, "")
    }
}

/// One training utterance: stacked target frames and target text.
#[derive(Clone, Debug)]
pub struct TokenizerExample {
    pub input: Tensor,
    pub text: Vec<usize>,
}

impl TokenizerExample {
    pub fn from_manifest(tok: &SpeechTokenizer, m: &Manifest) -> Result<Vec<Self>> {
        m.records
            .iter()
            .map(|r| {
                Ok(Self {
                    input: tok.prepare(&r.tgt_frames)?,
                    text: r.tgt_text.clone(),
                })
            })
            .collect()
    }
}

pub struct TokenizerTask {
    pub model: SpeechTokenizer,
    pub train: Vec<TokenizerExample>,
    pub val: Vec<TokenizerExample>,
    /// Codebook indices re-seeded at each epoch end.
    pub reseeded: Vec<Vec<usize>>,
}

impl TrainTask for TokenizerTask {
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
        self.train[i].input.rows()
    }

    fn example_loss(&self, g: &mut Graph<'_>, i: usize) -> Result<(Var, [f64; 2])> {
        let ex = &self.train[i];
        self.model.loss(g, &ex.input, &ex.text)
    }

    fn validation_loss(&self) -> Result<f64> {
        let set = if self.val.is_empty() { &self.train } else { &self.val };
        let mut total = 0.0;
        for ex in set {
            let mut g = Graph::new(&self.model.store);
            let (l, _) = self.model.loss(&mut g, &ex.input, &ex.text)?;
            total += g.item(l);
        }
        Ok(total / set.len() as f64)
    }

    fn end_of_epoch(&mut self, epoch: usize, adam: &mut Adam) -> Result<()> {
        let inputs: Vec<Tensor> = self.train.iter().map(|e| e.input.clone()).collect();
        let dead = self.model.reseed_dead_codes(&inputs, &epoch.to_string())?;
        adam.reset_rows(self.model.codebook, self.model.cfg.d, &dead);
        if !dead.is_empty() {
            log::debug!("epoch {epoch}: re-seeded {} codebook entries", dead.len());
        }
        self.reseeded.push(dead);
        Ok(())
    }
}

/// Trains a tokenizer on the target side of `train`, validating on `val`.
pub fn train_tokenizer(
    train: &Manifest,
    val: &Manifest,
    cfg: &TokenizerConfig,
    tcfg: &TrainConfig,
) -> Result<(SpeechTokenizer, TrainState)> {
    let mut model = SpeechTokenizer::new(cfg)?;
    let train_ex = TokenizerExample::from_manifest(&model, train)?;
    let val_ex = TokenizerExample::from_manifest(&model, val)?;
    let inputs: Vec<Tensor> = train_ex.iter().map(|e| e.input.clone()).collect();
    model.init_codebook(&inputs)?;
    let mut task = TokenizerTask {
        model,
        train: train_ex,
        val: val_ex,
        reseeded: Vec::new(),
    };
    let state = Trainer::new(tcfg.clone())?.train(&mut task)?;
    Ok((task.model, state))
}

/// Majority-vote map from semantic token to text symbol, built from
/// utterances whose tokens align one-to-one with their symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolTable {
    /// `counts[token][symbol]`.
    pub counts: Vec<Vec<usize>>,
    /// Majority symbol per token; `None` for tokens never observed.
    pub symbol: Vec<Option<usize>>,
}

impl SymbolTable {
    pub fn build(pairs: &[(Vec<usize>, Vec<usize>)], codebook_size: usize, text_vocab: usize) -> Result<Self> {
        let mut counts = vec![vec![0usize; text_vocab]; codebook_size];
        for (tokens, symbols) in pairs {
            if tokens.len() != symbols.len() {
                return Err(Error::dim("symbol alignment", &[tokens.len()], &[symbols.len()]));
            }
            for (&t, &s) in tokens.iter().zip(symbols) {
                if t >= codebook_size || s >= text_vocab {
                    return Err(Error::Index {
                        index: t.max(s),
                        bound: codebook_size.min(text_vocab),
                    });
                }
                counts[t][s] += 1;
            }
        }
        let symbol = counts
            .iter()
            .map(|row| {
                let best = row.iter().enumerate().max_by_key(|&(s, &c)| (c, std::cmp::Reverse(s)))?;
                (*best.1 > 0).then_some(best.0)
            })
            .collect();
        Ok(Self { counts, symbol })
    }

    /// Share of token occurrences whose symbol is their token's majority.
    pub fn purity(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        if total == 0 {
            return 0.0;
        }
        let majority: usize = self.counts.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
        majority as f64 / total as f64
    }

    /// Symbols for tokens; unseen tokens are dropped.
    pub fn transcribe(&self, tokens: &[usize]) -> Vec<usize> {
        tokens
            .iter()
            .filter_map(|&t| self.symbol.get(t).copied().flatten())
            .collect()
    }
}
