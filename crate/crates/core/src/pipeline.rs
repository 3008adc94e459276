//! End-to-end assembly: tokenizer, translation model and vocoder trained on
//! one corpus, plus translation, the token-to-symbol transcriber used for
//! text metrics, and the system checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{cosine_similarity, Manifest, SpeechFrames};
use crate::error::{Error, Result};
use crate::evaluation::{corpus_bleu, corpus_meteor, SystemRow};
use crate::model::{DecodeConfig, LmExample, LmTask, ModelConfig, S2stModel};
use crate::tokenizer::{
    train_text_to_token, train_tokenizer, SpeechTokenizer, SymbolTable, TextToTokenConfig, TextToTokenExample,
    TextToTokenModel, TokenizerConfig,
};
use crate::training::{Checkpoint, TrainConfig, TrainState, Trainer};
use crate::vocoder::{prompt_partners, train_vocoder, TimbreVocoder, VocoderConfig, VocoderExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TrainConfig,
    pub model: ModelConfig,
    pub model_train: TrainConfig,
    pub vocoder: VocoderConfig,
    pub vocoder_train: TrainConfig,
    pub text_to_token: TextToTokenConfig,
    pub text_to_token_train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy(0)
    }
}

fn toy_train(lr: f64, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr,
        warmup_steps: 50,
        max_epochs: epochs,
        validate_every: 63,
        decay_gamma: 0.97,
        patience: 8,
        seed,
        ..TrainConfig::default()
    }
}

impl PipelineConfig {
    /// Settings that learn the toy corpus on one CPU core in minutes.
    pub fn toy(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            tokenizer: TokenizerConfig {
                codebook_size: 32,
                ..TokenizerConfig::default()
            },
            tokenizer_train: toy_train(2e-3, 15, 0),
            model: ModelConfig::toy(),
            model_train: toy_train(3e-3, 60, 0),
            vocoder: VocoderConfig::default(),
            vocoder_train: toy_train(3e-3, 30, 0),
            text_to_token: TextToTokenConfig::default(),
            text_to_token_train: toy_train(2e-3, 30, 0),
            decode: DecodeConfig::default(),
        };
        cfg.set_seed(seed);
        cfg
    }

    /// Derives every component seed from `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        let s = |k: u64| seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);
        self.tokenizer.seed = s(1);
        self.tokenizer_train.seed = s(2);
        self.model.seed = s(3);
        self.model_train.seed = s(4);
        self.vocoder.seed = s(5);
        self.vocoder_train.seed = s(6);
        self.text_to_token.seed = s(7);
        self.text_to_token_train.seed = s(8);
    }

    /// Makes the component dimensions agree with a corpus.
    pub fn fit_to(&mut self, m: &Manifest, text_vocab: usize) -> Result<()> {
        let f = m
            .feature_dim()
            .ok_or_else(|| Error::Contract("cannot size a pipeline from an empty manifest".into()))?;
        self.tokenizer.features = f;
        self.tokenizer.text_vocab = text_vocab;
        self.model.features = f;
        self.model.text_vocab = text_vocab;
        self.model.codebook_size = self.tokenizer.codebook_size;
        self.vocoder.features = f;
        self.vocoder.codebook_size = self.tokenizer.codebook_size;
        self.vocoder.upsample = self.tokenizer.frame_stack;
        self.text_to_token.text_vocab = text_vocab;
        self.text_to_token.codebook_size = self.tokenizer.codebook_size;
        self.text_to_token.speaker_dim = self.vocoder.speaker_dim;
        Ok(())
    }
}

/// Largest symbol id in a manifest plus one.
pub fn text_vocab_of(m: &Manifest) -> usize {
    m.records
        .iter()
        .flat_map(|r| r.src_text.iter().chain(&r.tgt_text))
        .max()
        .map_or(0, |&v| v + 1)
}

/// Semantic tokens of every record's target speech.
pub fn tokenize_targets(tok: &SpeechTokenizer, m: &Manifest) -> Result<Vec<Vec<usize>>> {
    m.records.iter().map(|r| tok.tokenize(&r.tgt_frames)).collect()
}

pub fn symbol_table(tok: &SpeechTokenizer, m: &Manifest, tokens: &[Vec<usize>]) -> Result<SymbolTable> {
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = tokens
        .iter()
        .zip(&m.records)
        .map(|(t, r)| (t.clone(), r.tgt_text.clone()))
        .collect();
    SymbolTable::build(&pairs, tok.cfg.codebook_size, tok.cfg.text_vocab)
}

/// Speaker embedding of each record's prompt partner.
pub fn prompt_embeddings(voc: &TimbreVocoder, m: &Manifest) -> Result<Vec<Vec<f64>>> {
    let partners = prompt_partners(m);
    partners
        .iter()
        .map(|&p| voc.embed_speaker(&m.records[p].tgt_frames))
        .collect()
}

pub fn vocoder_examples(voc: &TimbreVocoder, m: &Manifest, tokens: &[Vec<usize>]) -> Result<Vec<VocoderExample>> {
    let spk = prompt_embeddings(voc, m)?;
    Ok(m.records
        .iter()
        .zip(tokens)
        .zip(spk)
        .map(|((r, t), s)| VocoderExample {
            tokens: t.clone(),
            speaker: s,
            target: r.tgt_frames.clone(),
        })
        .collect())
}

pub fn lm_examples(model: &S2stModel, m: &Manifest, tokens: &[Vec<usize>]) -> Result<Vec<LmExample>> {
    m.records
        .iter()
        .zip(tokens)
        .map(|(r, t)| LmExample::new(model, &r.src_frames, &r.tgt_text, t))
        .collect()
}

/// Trains the translation model on precomputed target tokens.
pub fn train_model(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &Manifest,
    train_tokens: &[Vec<usize>],
    val: &Manifest,
    val_tokens: &[Vec<usize>],
) -> Result<(S2stModel, TrainState)> {
    let model = S2stModel::new(cfg)?;
    let train_ex = lm_examples(&model, train, train_tokens)?;
    let val_ex = lm_examples(&model, val, val_tokens)?;
    let mut task = LmTask {
        model,
        train: train_ex,
        val: val_ex,
        lambda_audio: tcfg.lambda_audio,
        lambda_text: tcfg.lambda_text,
    };
    let state = Trainer::new(tcfg.clone())?.train(&mut task)?;
    Ok((task.model, state))
}

/// Trains the text-to-token model to reproduce speech-derived tokens from
/// target text and a speaker embedding.
pub fn train_text_tokens(
    cfg: &PipelineConfig,
    voc: &TimbreVocoder,
    train: &Manifest,
    train_tokens: &[Vec<usize>],
    val: &Manifest,
    val_tokens: &[Vec<usize>],
) -> Result<(TextToTokenModel, TrainState)> {
    let build = |m: &Manifest, tokens: &[Vec<usize>]| -> Result<Vec<TextToTokenExample>> {
        let spk = prompt_embeddings(voc, m)?;
        Ok(m.records
            .iter()
            .zip(tokens)
            .zip(spk)
            .map(|((r, t), s)| TextToTokenExample {
                text: r.tgt_text.clone(),
                speaker: s,
                tokens: t.clone(),
            })
            .collect())
    };
    train_text_to_token(
        build(train, train_tokens)?,
        build(val, val_tokens)?,
        &cfg.text_to_token,
        &cfg.text_to_token_train,
    )
}

/// Tokens generated from each record's target text.
pub fn text_derived_tokens(t2t: &TextToTokenModel, voc: &TimbreVocoder, m: &Manifest) -> Result<Vec<Vec<usize>>> {
    let spk = prompt_embeddings(voc, m)?;
    m.records
        .iter()
        .zip(spk)
        .map(|(r, s)| Ok(t2t.generate(&r.tgt_text, &s)?.tokens))
        .collect()
}

/// Training-time record of one full pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineLogs {
    pub tokenizer: TrainState,
    pub vocoder: TrainState,
    pub model: TrainState,
}

/// Tokenizer, symbol table and vocoder: everything except the translation
/// model, so several models can share them.
#[derive(Clone, Debug)]
pub struct SharedStages {
    /// Configuration with dimensions fitted to the training corpus.
    pub cfg: PipelineConfig,
    pub tokenizer: SpeechTokenizer,
    pub symbols: SymbolTable,
    pub vocoder: TimbreVocoder,
    pub train_tokens: Vec<Vec<usize>>,
    pub val_tokens: Vec<Vec<usize>>,
    pub tokenizer_log: TrainState,
    pub vocoder_log: TrainState,
}

impl SharedStages {
    pub fn train(cfg: &PipelineConfig, train: &Manifest, val: &Manifest) -> Result<Self> {
        log::info!("training tokenizer");
        let (tok, log) = TokenizerArtifact::train(cfg, train, val)?;
        Self::from_tokenizer(&tok.cfg, tok.tokenizer, tok.symbols, log, train, val)
    }

    /// Trains the vocoder on top of an already trained tokenizer. `cfg` must
    /// already be fitted to the corpus.
    pub fn from_tokenizer(
        cfg: &PipelineConfig,
        tokenizer: SpeechTokenizer,
        symbols: SymbolTable,
        tokenizer_log: TrainState,
        train: &Manifest,
        val: &Manifest,
    ) -> Result<Self> {
        let cfg = cfg.clone();
        if tokenizer.cfg != cfg.tokenizer {
            return Err(Error::Contract("tokenizer does not match the pipeline configuration".into()));
        }
        let train_tokens = tokenize_targets(&tokenizer, train)?;
        let val_tokens = tokenize_targets(&tokenizer, val)?;
        log::info!("token purity {:.4}", symbols.purity());

        log::info!("training vocoder");
        let probe = TimbreVocoder::new(&cfg.vocoder)?;
        let voc_train = vocoder_examples(&probe, train, &train_tokens)?;
        let voc_val = vocoder_examples(&probe, val, &val_tokens)?;
        let (vocoder, vocoder_log) = train_vocoder(voc_train, voc_val, &cfg.vocoder, &cfg.vocoder_train)?;
        Ok(Self {
            cfg,
            tokenizer,
            symbols,
            vocoder,
            train_tokens,
            val_tokens,
            tokenizer_log,
            vocoder_log,
        })
    }

    pub fn with_model(&self, model: S2stModel) -> S2stSystem {
        let mut cfg = self.cfg.clone();
        cfg.model = model.cfg.clone();
        S2stSystem {
            cfg,
            tokenizer: self.tokenizer.clone(),
            symbols: self.symbols.clone(),
            model,
            vocoder: self.vocoder.clone(),
        }
    }
}

/// A trained speech-to-speech system.
#[derive(Clone, Debug)]
pub struct S2stSystem {
    pub cfg: PipelineConfig,
    pub tokenizer: SpeechTokenizer,
    pub symbols: SymbolTable,
    pub model: S2stModel,
    pub vocoder: TimbreVocoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub text: Vec<usize>,
    pub tokens: Vec<usize>,
    pub frames: SpeechFrames,
    pub truncated: bool,
}

/// Per-utterance results and corpus metrics of one evaluation pass.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub bleu: f64,
    pub meteor: f64,
    pub speaker_sim: f64,
    /// Share of utterances whose output is closer to the own speaker's
    /// prompt than to another speaker's.
    pub matched_speaker_rate: f64,
    pub hypotheses: Vec<Vec<usize>>,
    pub references: Vec<Vec<usize>>,
    pub translations: Vec<Translation>,
}

impl EvalOutcome {
    pub fn row(&self, system: &str) -> SystemRow {
        SystemRow {
            system: system.to_string(),
            bleu: self.bleu,
            meteor: self.meteor,
            speaker_sim: Some(self.speaker_sim),
            count: self.hypotheses.len(),
            extra: Default::default(),
        }
    }
}

impl S2stSystem {
    /// Trains tokenizer, vocoder and translation model in that order.
    pub fn train(cfg: &PipelineConfig, train: &Manifest, val: &Manifest) -> Result<(Self, PipelineLogs)> {
        let shared = SharedStages::train(cfg, train, val)?;
        log::info!("training translation model");
        let (model, lm_state) = train_model(
            &shared.cfg.model,
            &shared.cfg.model_train,
            train,
            &shared.train_tokens,
            val,
            &shared.val_tokens,
        )?;
        let logs = PipelineLogs {
            tokenizer: shared.tokenizer_log.clone(),
            vocoder: shared.vocoder_log.clone(),
            model: lm_state,
        };
        Ok((shared.with_model(model), logs))
    }

    /// Source speech in, target text, tokens and speech out, in the voice of
    /// `prompt`.
    pub fn translate(&self, src: &SpeechFrames, prompt: &SpeechFrames) -> Result<Translation> {
        let a_f = self.model.encode_speech(src)?;
        let out = self.model.translate(&a_f, &self.cfg.decode)?;
        let spk = self.vocoder.embed_speaker(prompt)?;
        let frames = self.vocoder.synthesize(&out.audio, &spk)?;
        Ok(Translation {
            text: out.text,
            tokens: out.audio,
            frames,
            truncated: out.truncated,
        })
    }

    /// Symbol sequence recovered from speech by re-tokenizing it.
    pub fn transcribe(&self, frames: &SpeechFrames) -> Result<Vec<usize>> {
        if frames.num_frames() == 0 {
            return Ok(Vec::new());
        }
        Ok(self.symbols.transcribe(&self.tokenizer.tokenize(frames)?))
    }

    /// Translates every record (prompted by another utterance of the same
    /// speaker) and scores the transcribed output against the target text.
    pub fn evaluate(&self, m: &Manifest) -> Result<EvalOutcome> {
        let partners = prompt_partners(m);
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        let mut translations = Vec::new();
        let mut sims = Vec::new();
        let mut matched = 0usize;
        let mut compared = 0usize;
        let emb = &self.vocoder.embedder;
        for (i, r) in m.records.iter().enumerate() {
            let prompt = &m.records[partners[i]].tgt_frames;
            let tr = self.translate(&r.src_frames, prompt)?;
            hyps.push(self.transcribe(&tr.frames)?);
            refs.push(r.tgt_text.clone());
            if tr.frames.num_frames() > 0 {
                let e_gen = emb.embed(&tr.frames)?;
                let e_own = emb.embed(prompt)?;
                sims.push(cosine_similarity(&e_gen, &e_own)?);
                if let Some(other) = other_speaker_record(m, i) {
                    let e_other = emb.embed(&m.records[other].tgt_frames)?;
                    compared += 1;
                    if cosine_similarity(&e_gen, &e_own)? > cosine_similarity(&e_gen, &e_other)? {
                        matched += 1;
                    }
                }
            }
            translations.push(tr);
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Ok(EvalOutcome {
            bleu: corpus_bleu(&hyps, &refs)?,
            meteor: corpus_meteor(&hyps, &refs)?,
            speaker_sim: mean(&sims),
            matched_speaker_rate: if compared == 0 { 0.0 } else { matched as f64 / compared as f64 },
            hypotheses: hyps,
            references: refs,
            translations,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: serde_json::json!({
                "kind": SYSTEM_KIND,
                "pipeline": self.cfg,
                "symbols": self.symbols,
            }),
            step: 0,
            rng_state: self.cfg.seed,
            tensors: Default::default(),
        };
        ck.insert_section("tokenizer.", self.tokenizer.to_named());
        ck.insert_section("lm.", self.model.to_named());
        ck.insert_section("encoder.", self.model.encoder.store.to_named(""));
        ck.insert_section("vocoder.", self.vocoder.to_named());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (cfg, symbols) = checkpoint_header(ck, SYSTEM_KIND)?;
        let mut tokenizer = SpeechTokenizer::new(&cfg.tokenizer)?;
        tokenizer.load_named(&ck.section("tokenizer."))?;
        let mut model = S2stModel::new(&cfg.model)?;
        model.load_named(&ck.section("lm."))?;
        model.encoder.store.load_named(&ck.section("encoder."), "")?;
        let mut vocoder = TimbreVocoder::new(&cfg.vocoder)?;
        vocoder.load_named(&ck.section("vocoder."))?;
        Ok(Self {
            cfg,
            tokenizer,
            symbols,
            model,
            vocoder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

const SYSTEM_KIND: &str = "system";
const TOKENIZER_KIND: &str = "tokenizer";

fn checkpoint_header(ck: &Checkpoint, kind: &str) -> Result<(PipelineConfig, SymbolTable)> {
    let get = |k: &str| {
        ck.config
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("{kind} checkpoint lacks `{k}`")))
    };
    let found = get("kind")?;
    if found != kind {
        return Err(Error::Contract(format!("expected a {kind} checkpoint, found {found}")));
    }
    let bad = |e: serde_json::Error| Error::Contract(format!("{kind} checkpoint config: {e}"));
    let cfg = serde_json::from_value(get("pipeline")?).map_err(bad)?;
    let symbols = serde_json::from_value(get("symbols")?).map_err(bad)?;
    Ok((cfg, symbols))
}

/// Trained tokenizer plus the fitted configuration and symbol table it was
/// built with, as a stand-alone artifact.
#[derive(Clone, Debug)]
pub struct TokenizerArtifact {
    pub cfg: PipelineConfig,
    pub tokenizer: SpeechTokenizer,
    pub symbols: SymbolTable,
}

impl TokenizerArtifact {
    /// Fits `cfg` to the corpus and trains the tokenizer and symbol table.
    pub fn train(cfg: &PipelineConfig, train: &Manifest, val: &Manifest) -> Result<(Self, TrainState)> {
        let mut cfg = cfg.clone();
        cfg.fit_to(train, text_vocab_of(train).max(text_vocab_of(val)).max(cfg.tokenizer.text_vocab))?;
        let (tokenizer, log) = train_tokenizer(train, val, &cfg.tokenizer, &cfg.tokenizer_train)?;
        let symbols = symbol_table(&tokenizer, train, &tokenize_targets(&tokenizer, train)?)?;
        Ok((
            Self {
                cfg,
                tokenizer,
                symbols,
            },
            log,
        ))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: serde_json::json!({
                "kind": TOKENIZER_KIND,
                "pipeline": self.cfg,
                "symbols": self.symbols,
            }),
            step: 0,
            rng_state: self.cfg.seed,
            tensors: Default::default(),
        };
        ck.insert_section("tokenizer.", self.tokenizer.to_named());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (cfg, symbols) = checkpoint_header(ck, TOKENIZER_KIND)?;
        let mut tokenizer = SpeechTokenizer::new(&cfg.tokenizer)?;
        tokenizer.load_named(&ck.section("tokenizer."))?;
        Ok(Self {
            cfg,
            tokenizer,
            symbols,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// First record after `i` (wrapping) whose speaker differs from record `i`.
pub fn other_speaker_record(m: &Manifest, i: usize) -> Option<usize> {
    let n = m.len();
    (1..n)
        .map(|o| (i + o) % n)
        .find(|&j| m.records[j].speaker_id != m.records[i].speaker_id)
}
