//! Synthetic toy-language parallel corpus.
//!
//! Source sentences are random symbol strings. The target sentence is the
//! reversed source passed through a fixed symbol permutation. Speech for
//! each side renders every symbol as a fixed block of frames; target speech
//! also carries an additive per-speaker offset that plays the role of timbre.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Manifest, ManifestMeta, SpeechFrames, UtterancePair, DEFAULT_FRAME_RATE};
use crate::error::{Error, Result};
use crate::rng::{derive, normal_vec, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub pairs: usize,
    pub speakers: usize,
    pub features: usize,
    pub frames_per_symbol: usize,
    pub noise_std: f64,
    pub speaker_std: f64,
    /// Standard deviation of template entries.
    pub template_std: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            src_vocab: 20,
            tgt_vocab: 20,
            min_len: 3,
            max_len: 8,
            pairs: 550,
            speakers: 8,
            features: 16,
            frames_per_symbol: 4,
            noise_std: 0.05,
            speaker_std: 0.3,
            template_std: 1.0,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return bad("vocabularies must be non-empty");
        }
        if self.src_vocab != self.tgt_vocab {
            return bad("an invertible symbol mapping needs equal source and target vocabularies");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("sentence length range must satisfy 1 <= min_len <= max_len");
        }
        if self.speakers == 0 || self.features == 0 || self.frames_per_symbol == 0 {
            return bad("speakers, features and frames_per_symbol must be positive");
        }
        if !(self.noise_std >= 0.0 && self.speaker_std >= 0.0 && self.template_std > 0.0) {
            return bad("standard deviations must be non-negative (templates positive)");
        }
        Ok(())
    }
}

/// Everything fixed about the toy language for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLanguage {
    pub cfg: ToyCorpusConfig,
    /// `mapping[s]` is the target symbol for source symbol `s`.
    pub mapping: Vec<usize>,
    /// Per source symbol, a `frames_per_symbol × features` block.
    pub src_templates: Vec<Tensor>,
    pub tgt_templates: Vec<Tensor>,
    pub speaker_offsets: Vec<Vec<f64>>,
}

impl ToyLanguage {
    pub fn new(cfg: &ToyCorpusConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(seed, "toy.language");
        let mut mapping: Vec<usize> = (0..cfg.tgt_vocab).collect();
        mapping.shuffle(&mut rng);
        let block = [cfg.frames_per_symbol, cfg.features];
        let templates = |n: usize, rng: &mut SeededRng| -> Vec<Tensor> {
            (0..n)
                .map(|_| {
                    let data = normal_vec(rng, block[0] * block[1], cfg.template_std);
                    Tensor::new(block.to_vec(), data).expect("shape")
                })
                .collect()
        };
        let src_templates = templates(cfg.src_vocab, &mut rng);
        let tgt_templates = templates(cfg.tgt_vocab, &mut rng);
        let speaker_offsets = (0..cfg.speakers)
            .map(|_| normal_vec(&mut rng, cfg.features, cfg.speaker_std))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            mapping,
            src_templates,
            tgt_templates,
            speaker_offsets,
        })
    }

    /// Target sentence for a source sentence.
    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        src.iter().rev().map(|&s| self.mapping[s]).collect()
    }

    pub fn speaker_id(i: usize) -> String {
        format!("spk{i:02}")
    }

    /// Renders `symbols` as frames: template blocks plus `offset` on every
    /// frame plus Gaussian noise (none when `rng` is `None`).
    pub fn render(
        &self,
        symbols: &[usize],
        templates: &[Tensor],
        offset: Option<&[f64]>,
        mut rng: Option<&mut SeededRng>,
    ) -> SpeechFrames {
        let f = self.cfg.features;
        let mut rows = Vec::with_capacity(symbols.len() * self.cfg.frames_per_symbol);
        for &s in symbols {
            let t = &templates[s];
            for r in 0..self.cfg.frames_per_symbol {
                let mut row = t.row(r).to_vec();
                if let Some(o) = offset {
                    row.iter_mut().zip(o).for_each(|(x, y)| *x += y);
                }
                if let Some(rng) = rng.as_deref_mut() {
                    let noise = normal_vec(rng, f, self.cfg.noise_std);
                    row.iter_mut().zip(noise).for_each(|(x, y)| *x += y);
                }
                rows.push(row);
            }
        }
        SpeechFrames::from_rows(&rows, f, DEFAULT_FRAME_RATE).expect("finite frames")
    }

    /// Nearest-template labelling of consecutive symbol blocks.
    pub fn classify_blocks(&self, frames: &SpeechFrames, templates: &[Tensor]) -> Vec<usize> {
        let fps = self.cfg.frames_per_symbol;
        let f = self.cfg.features;
        let data = frames.tensor().data();
        (0..frames.num_frames() / fps)
            .map(|b| {
                let block = &data[b * fps * f..(b + 1) * fps * f];
                let mut best = (f64::INFINITY, 0);
                for (s, t) in templates.iter().enumerate() {
                    let d: f64 = block.iter().zip(t.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                    if d < best.0 {
                        best = (d, s);
                    }
                }
                best.1
            })
            .collect()
    }
}

/// Generates `cfg.pairs` records deterministically from `seed`.
pub fn generate_toy_corpus(cfg: &ToyCorpusConfig, seed: u64) -> Result<Manifest> {
    let lang = ToyLanguage::new(cfg, seed)?;
    let mut rng = derive(seed, "toy.utterances");
    let mut records = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.src_vocab)).collect();
        let tgt = lang.translate(&src);
        let speaker = rng.random_range(0..cfg.speakers);
        let src_frames = lang.render(&src, &lang.src_templates, None, Some(&mut rng));
        let tgt_frames = lang.render(
            &tgt,
            &lang.tgt_templates,
            Some(&lang.speaker_offsets[speaker]),
            Some(&mut rng),
        );
        records.push(UtterancePair {
            id: format!("toy-{i:05}"),
            src_frames,
            src_text: src,
            tgt_text: tgt,
            tgt_frames,
            speaker_id: ToyLanguage::speaker_id(speaker),
            similarity: 1.0,
        });
    }
    Manifest::new(
        ManifestMeta {
            name: "toy".into(),
            src_lang: "toy-src".into(),
            tgt_lang: "toy-tgt".into(),
            frame_rate: DEFAULT_FRAME_RATE,
        },
        records,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pairs_is_empty() {
        let cfg = ToyCorpusConfig {
            pairs: 0,
            ..Default::default()
        };
        assert!(generate_toy_corpus(&cfg, 1).unwrap().is_empty());
    }

    #[test]
    fn invalid_ranges_rejected() {
        for cfg in [
            ToyCorpusConfig { min_len: 5, max_len: 3, ..Default::default() },
            ToyCorpusConfig { min_len: 0, ..Default::default() },
            ToyCorpusConfig { tgt_vocab: 7, ..Default::default() },
            ToyCorpusConfig { speakers: 0, ..Default::default() },
        ] {
            assert!(matches!(generate_toy_corpus(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = ToyCorpusConfig { pairs: 20, ..Default::default() };
        assert_eq!(generate_toy_corpus(&cfg, 7).unwrap(), generate_toy_corpus(&cfg, 7).unwrap());
        assert_ne!(generate_toy_corpus(&cfg, 7).unwrap(), generate_toy_corpus(&cfg, 8).unwrap());
    }

    #[test]
    fn targets_follow_published_mapping() {
        let cfg = ToyCorpusConfig { pairs: 500, ..Default::default() };
        let m = generate_toy_corpus(&cfg, 3).unwrap();
        let lang = ToyLanguage::new(&cfg, 3).unwrap();
        for r in &m.records {
            let expect: Vec<usize> = r.src_text.iter().rev().map(|&s| lang.mapping[s]).collect();
            assert_eq!(r.tgt_text, expect);
            assert!((3..=8).contains(&r.src_text.len()));
            assert_eq!(r.src_frames.num_frames(), 4 * r.src_text.len());
            assert_eq!(r.tgt_frames.num_frames(), 4 * r.tgt_text.len());
            assert_eq!(r.similarity, 1.0);
        }
        let mut sorted = lang.mapping.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn noiseless_blocks_classify_perfectly() {
        let cfg = ToyCorpusConfig::default();
        let lang = ToyLanguage::new(&cfg, 11).unwrap();
        let syms: Vec<usize> = (0..20).chain((0..20).rev()).collect();
        let src = lang.render(&syms, &lang.src_templates, None, None);
        assert_eq!(lang.classify_blocks(&src, &lang.src_templates), syms);
        let tgt = lang.render(&syms, &lang.tgt_templates, None, None);
        assert_eq!(lang.classify_blocks(&tgt, &lang.tgt_templates), syms);
    }
}
