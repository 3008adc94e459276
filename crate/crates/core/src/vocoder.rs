//! Speaker embedding and timbre-conditioned frame synthesis from semantic
//! tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, SpeechFrames, DEFAULT_FRAME_RATE};
use crate::error::{Error, Result};
use crate::nn::{Builder, Graph, Mlp, ParamId, ParamStore};
use crate::rng::{derive, normal_vec};
use crate::tensor::{Tensor, Var};
use crate::training::{TrainConfig, TrainState, TrainTask, Trainer};

/// Fixed random pooling network: per-frame linear map, mean and standard
/// deviation over time, linear projection, unit normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedder {
    frame_map: Tensor,
    projection: Tensor,
    /// Scale of the standard-deviation half of the pooled vector.
    pub std_weight: f64,
}

impl SpeakerEmbedder {
    pub fn new(features: usize, hidden: usize, dim: usize, seed: u64) -> Self {
        let mut rng = derive(seed, "speaker_embedder");
        let frame_map = normal_vec(&mut rng, features * hidden, 1.0 / (features as f64).sqrt());
        let projection = normal_vec(&mut rng, 2 * hidden * dim, 1.0 / ((2 * hidden) as f64).sqrt());
        Self {
            frame_map: Tensor::new(vec![features, hidden], frame_map).expect("shape"),
            projection: Tensor::new(vec![2 * hidden, dim], projection).expect("shape"),
            std_weight: 1.0,
        }
    }

    pub fn with_std_weight(mut self, w: f64) -> Self {
        self.std_weight = w;
        self
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn embed(&self, prompt: &SpeechFrames) -> Result<Vec<f64>> {
        let t = prompt.num_frames();
        if t == 0 {
            return Err(Error::InputTooShort { len: 0, min: 1 });
        }
        let (f, h) = (self.frame_map.rows(), self.frame_map.cols());
        if prompt.features() != f {
            return Err(Error::dim("speaker prompt", &[t, prompt.features()], &[t, f]));
        }
        let mut sum = vec![0.0; h];
        let mut sq = vec![0.0; h];
        for i in 0..t {
            let x = prompt.frame(i);
            for j in 0..h {
                let y: f64 = (0..f).map(|k| x[k] * self.frame_map.data()[k * h + j]).sum();
                sum[j] += y;
                sq[j] += y * y;
            }
        }
        let n = t as f64;
        let mut pooled = Vec::with_capacity(2 * h);
        pooled.extend(sum.iter().map(|s| s / n));
        pooled.extend(
            sum.iter()
                .zip(&sq)
                .map(|(s, q)| self.std_weight * (q / n - (s / n) * (s / n)).max(0.0).sqrt()),
        );
        let d = self.dim();
        let mut e = vec![0.0; d];
        for (i, p) in pooled.iter().enumerate() {
            for (j, ej) in e.iter_mut().enumerate() {
                *ej += p * self.projection.data()[i * d + j];
            }
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!("speaker embedding norm is {norm}")));
        }
        Ok(e.into_iter().map(|v| v / norm).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocoderConfig {
    pub codebook_size: usize,
    pub speaker_dim: usize,
    pub speaker_hidden: usize,
    /// Weight of the standard-deviation statistics in the speaker embedding.
    pub speaker_std_weight: f64,
    /// Seed of the fixed speaker embedder, kept apart from `seed` so every
    /// system is scored by the same embedder.
    pub embedder_seed: u64,
    pub features: usize,
    /// Frames generated per token.
    pub upsample: usize,
    pub d_embed: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            speaker_dim: 64,
            speaker_hidden: 128,
            speaker_std_weight: 0.25,
            embedder_seed: 0,
            features: 16,
            upsample: 4,
            d_embed: 32,
            hidden: 128,
            seed: 0,
        }
    }
}

/// Per-token MLP over `[embedding(μ_i); speaker]` producing `U` frames.
#[derive(Clone, Debug)]
pub struct TimbreVocoder {
    pub cfg: VocoderConfig,
    pub store: ParamStore,
    pub embedder: SpeakerEmbedder,
    embed: ParamId,
    mlp: Mlp,
}

impl TimbreVocoder {
    pub fn new(cfg: &VocoderConfig) -> Result<Self> {
        if !(cfg.speaker_std_weight >= 0.0) {
            return Err(Error::Config("speaker_std_weight must be non-negative".into()));
        }
        if [cfg.codebook_size, cfg.speaker_dim, cfg.features, cfg.upsample, cfg.d_embed, cfg.hidden].contains(&0) {
            return Err(Error::Config(format!("invalid vocoder configuration: {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let mut rng = derive(cfg.seed, "vocoder.init");
        let mut b = Builder::new(&mut store, &mut rng);
        let embed = b.normal("embed", &[cfg.codebook_size, cfg.d_embed], 1.0);
        let mlp = Mlp::new(
            &mut b,
            "mlp",
            cfg.d_embed + cfg.speaker_dim,
            cfg.hidden,
            cfg.upsample * cfg.features,
        );
        Ok(Self {
            cfg: cfg.clone(),
            store,
            embedder: SpeakerEmbedder::new(cfg.features, cfg.speaker_hidden, cfg.speaker_dim, cfg.embedder_seed)
                .with_std_weight(cfg.speaker_std_weight),
            embed,
            mlp,
        })
    }

    pub fn embed_speaker(&self, prompt: &SpeechFrames) -> Result<Vec<f64>> {
        self.embedder.embed(prompt)
    }

    fn check(&self, tokens: &[usize], spk: &[f64]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.codebook_size) {
            return Err(Error::Index {
                index: bad,
                bound: self.cfg.codebook_size,
            });
        }
        if spk.len() != self.cfg.speaker_dim {
            return Err(Error::dim("speaker embedding", &[spk.len()], &[self.cfg.speaker_dim]));
        }
        let norm = spk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("speaker embedding must have unit norm, got {norm}")));
        }
        Ok(())
    }

    /// `(U·|μ|) × F` frames on the graph; `tokens` must be non-empty.
    pub fn forward(&self, g: &mut Graph<'_>, tokens: &[usize], spk: &[f64]) -> Result<Var> {
        self.check(tokens, spk)?;
        let n = tokens.len();
        let table = g.param(self.embed);
        let e = g.gather_rows(table, tokens)?;
        let s = g.constant(Tensor::new(vec![n, spk.len()], spk.repeat(n))?);
        let x = g.concat_cols(&[e, s])?;
        let y = self.mlp.forward(g, x)?;
        g.reshape(y, &[n * self.cfg.upsample, self.cfg.features])
    }

    pub fn synthesize(&self, tokens: &[usize], spk: &[f64]) -> Result<SpeechFrames> {
        self.check(tokens, spk)?;
        if tokens.is_empty() {
            return Ok(SpeechFrames::empty(self.cfg.features, DEFAULT_FRAME_RATE));
        }
        let mut g = Graph::new(&self.store);
        let y = self.forward(&mut g, tokens, spk)?;
        SpeechFrames::new(g.tensor(y), DEFAULT_FRAME_RATE)
    }

    pub fn loss(&self, g: &mut Graph<'_>, ex: &VocoderExample) -> Result<Var> {
        let y = self.forward(g, &ex.tokens, &ex.speaker)?;
        let want = ex.target.tensor();
        if g.shape(y) != want.shape() {
            return Err(Error::dim("vocoder target", g.shape(y), want.shape()));
        }
        let t = g.constant(want.clone());
        g.mse(y, t)
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.store.to_named("")
    }

    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        self.store.load_named(named, "")
    }
}

#[derive(Clone, Debug)]
pub struct VocoderExample {
    pub tokens: Vec<usize>,
    pub speaker: Vec<f64>,
    pub target: SpeechFrames,
}

/// For each record, the index of another record by the same speaker (the
/// next one in manifest order, wrapping around); the record itself when
/// its speaker has no other utterance.
pub fn prompt_partners(m: &Manifest) -> Vec<usize> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        by_speaker.entry(&r.speaker_id).or_default().push(i);
    }
    let mut out = vec![0; m.len()];
    for idx in by_speaker.values() {
        for (j, &i) in idx.iter().enumerate() {
            out[i] = idx[(j + 1) % idx.len()];
        }
    }
    out
}

pub struct VocoderTask {
    pub model: TimbreVocoder,
    pub train: Vec<VocoderExample>,
    pub val: Vec<VocoderExample>,
}

impl TrainTask for VocoderTask {
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
        let l = self.model.loss(g, &self.train[i])?;
        Ok((l, [g.item(l), 0.0]))
    }

    fn validation_loss(&self) -> Result<f64> {
        let set = if self.val.is_empty() { &self.train } else { &self.val };
        let mut total = 0.0;
        for ex in set {
            let mut g = Graph::new(&self.model.store);
            let l = self.model.loss(&mut g, ex)?;
            total += g.item(l);
        }
        Ok(total / set.len() as f64)
    }
}

/// Mean squared frame error of `model` over `examples`.
pub fn reconstruction_mse(model: &TimbreVocoder, examples: &[VocoderExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("no examples to score".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new(&model.store);
        let l = model.loss(&mut g, ex)?;
        total += g.item(l);
    }
    Ok(total / examples.len() as f64)
}

pub fn train_vocoder(
    train: Vec<VocoderExample>,
    val: Vec<VocoderExample>,
    cfg: &VocoderConfig,
    tcfg: &TrainConfig,
) -> Result<(TimbreVocoder, TrainState)> {
    let mut task = VocoderTask {
        model: TimbreVocoder::new(cfg)?,
        train,
        val,
    };
    let state = Trainer::new(tcfg.clone())?.train(&mut task)?;
    Ok((task.model, state))
}
