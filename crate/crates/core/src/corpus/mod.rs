//! Parallel speech corpora: records, manifests, similarity filtering and
//! statistics.

mod io;
mod toy;

pub use io::{decode_frames, encode_frames, read_frames, read_manifest, write_frames, write_manifest, FRAME_MAGIC, FRAME_VERSION};
pub use toy::{generate_toy_corpus, ToyCorpusConfig, ToyLanguage};

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nominal feature frame rate in frames per second.
pub const DEFAULT_FRAME_RATE: f64 = 50.0;

/// Default similarity cut for retaining a pair.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.9;

/// A `T × F` matrix of per-frame acoustic features.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFrames {
    frames: Tensor,
    pub frame_rate: f64,
}

impl SpeechFrames {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::dim("speech frames", frames.shape(), &[0, 0]));
        }
        if !frames.is_finite() {
            return Err(Error::Numeric("speech frames contain non-finite values".into()));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn empty(features: usize, frame_rate: f64) -> Self {
        Self {
            frames: Tensor::zeros(&[0, features]),
            frame_rate,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], features: usize, frame_rate: f64) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Self::empty(features, frame_rate));
        }
        Self::new(Tensor::from_rows(rows)?, frame_rate)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_frames() as f64 / self.frame_rate
    }
}

/// One corpus record.
#[derive(Clone, Debug, PartialEq)]
pub struct UtterancePair {
    pub id: String,
    pub src_frames: SpeechFrames,
    pub src_text: Vec<usize>,
    pub tgt_text: Vec<usize>,
    pub tgt_frames: SpeechFrames,
    pub speaker_id: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub name: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub frame_rate: f64,
}

impl Default for ManifestMeta {
    fn default() -> Self {
        Self {
            name: "corpus".into(),
            src_lang: "src".into(),
            tgt_lang: "tgt".into(),
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub records: Vec<UtterancePair>,
}

impl Manifest {
    pub fn new(meta: ManifestMeta, records: Vec<UtterancePair>) -> Result<Self> {
        let m = Self { meta, records };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ids unique, one feature width across every frame matrix.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut width = None;
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Contract(format!("duplicate record id {}", r.id)));
            }
            for f in [&r.src_frames, &r.tgt_frames] {
                match width {
                    None => width = Some(f.features()),
                    Some(w) if w != f.features() => {
                        return Err(Error::dim("manifest feature width", &[w], &[f.features()]))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.src_frames.features())
    }

    /// First `n` records and the remainder, as two manifests with the same
    /// metadata.
    pub fn split_at(&self, n: usize) -> (Manifest, Manifest) {
        let n = n.min(self.records.len());
        let (a, b) = self.records.split_at(n);
        (
            Manifest {
                meta: self.meta.clone(),
                records: a.to_vec(),
            },
            Manifest {
                meta: self.meta.clone(),
                records: b.to_vec(),
            },
        )
    }

    pub fn total_frames(&self) -> (usize, usize) {
        self.records.iter().fold((0, 0), |(s, t), r| {
            (s + r.src_frames.num_frames(), t + r.tgt_frames.num_frames())
        })
    }
}

/// Cosine of the angle between two vectors, clamped to `[-1, 1]`.
///
/// A zero vector against a nonzero one scores 0; two zero vectors are an
/// error.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Keeps records whose similarity is strictly above `threshold`, in order.
pub fn filter_by_similarity(m: &Manifest, threshold: f64) -> Manifest {
    Manifest {
        meta: m.meta.clone(),
        records: m
            .records
            .iter()
            .filter(|r| r.similarity > threshold)
            .cloned()
            .collect(),
    }
}

/// Source of cross-lingual sentence embeddings for similarity scoring of real
/// data. The toy generator bypasses this and writes similarity 1.0.
pub trait EmbeddingAdapter {
    fn embed_source(&self, pair: &UtterancePair) -> Vec<f64>;
    fn embed_target(&self, pair: &UtterancePair) -> Vec<f64>;
}

/// Fills every record's similarity with the cosine of its two embeddings.
pub fn score_similarity(m: &Manifest, adapter: &dyn EmbeddingAdapter) -> Result<Manifest> {
    let mut out = m.clone();
    for r in &mut out.records {
        r.similarity = cosine_similarity(&adapter.embed_source(r), &adapter.embed_target(r))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StatsReport {
    pub name: String,
    pub records: usize,
    pub src_frames: usize,
    pub tgt_frames: usize,
    pub src_seconds: f64,
    pub tgt_seconds: f64,
    pub per_speaker: BTreeMap<String, usize>,
}

pub fn corpus_stats(m: &Manifest) -> StatsReport {
    let (src_frames, tgt_frames) = m.total_frames();
    let mut per_speaker = BTreeMap::new();
    for r in &m.records {
        *per_speaker.entry(r.speaker_id.clone()).or_insert(0) += 1;
    }
    let rate = m.meta.frame_rate;
    StatsReport {
        name: m.meta.name.clone(),
        records: m.len(),
        src_frames,
        tgt_frames,
        src_seconds: if m.is_empty() { 0.0 } else { src_frames as f64 / rate },
        tgt_seconds: if m.is_empty() { 0.0 } else { tgt_frames as f64 / rate },
        per_speaker,
    }
}

impl StatsReport {
    /// Sentences in thousands and duration in hours, one row per side.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>14}", "corpus", "sentences(K)", "side", "duration(h)");
        for (side, secs) in [("source", self.src_seconds), ("target", self.tgt_seconds)] {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>12} {:>14.2}",
                self.name,
                format!("{:.1}K", self.records as f64 / 1000.0),
                side,
                secs / 3600.0
            );
        }
        for (spk, n) in &self.per_speaker {
            let _ = writeln!(s, "  speaker {spk:<12} {n:>8}");
        }
        s
    }

    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name={}", self.name);
        let _ = writeln!(s, "records={}", self.records);
        let _ = writeln!(s, "src_frames={}", self.src_frames);
        let _ = writeln!(s, "tgt_frames={}", self.tgt_frames);
        let _ = writeln!(s, "src_seconds={}", self.src_seconds);
        let _ = writeln!(s, "tgt_seconds={}", self.tgt_seconds);
        for (spk, n) in &self.per_speaker {
            let _ = writeln!(s, "speaker.{spk}={n}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, sim: f64, frames: usize) -> UtterancePair {
        let f = SpeechFrames::new(Tensor::zeros(&[frames, 2]), DEFAULT_FRAME_RATE).unwrap();
        UtterancePair {
            id: id.into(),
            src_frames: f.clone(),
            src_text: vec![1],
            tgt_text: vec![2],
            tgt_frames: f,
            speaker_id: "s0".into(),
            similarity: sim,
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::UndefinedSimilarity)
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn filter_keeps_strictly_above_threshold_in_order() {
        let m = Manifest::new(
            ManifestMeta::default(),
            vec![pair("a", 1.0, 1), pair("b", 0.0, 1), pair("c", 0.9, 1), pair("d", 0.95, 1)],
        )
        .unwrap();
        let f = filter_by_similarity(&m, DEFAULT_SIMILARITY_THRESHOLD);
        let ids: Vec<_> = f.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "d"]);
        assert_eq!(filter_by_similarity(&f, 0.9), f);
        assert_eq!(m.len(), 4);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(Manifest::new(ManifestMeta::default(), vec![pair("a", 1.0, 1), pair("a", 1.0, 1)]).is_err());
    }

    #[test]
    fn stats_arithmetic() {
        let empty = corpus_stats(&Manifest::default());
        assert_eq!(empty.records, 0);
        assert_eq!(empty.src_seconds, 0.0);
        assert_eq!(empty.tgt_frames, 0);

        let m = Manifest::new(ManifestMeta::default(), vec![pair("a", 1.0, 100), pair("b", 1.0, 100)]).unwrap();
        let s = corpus_stats(&m);
        assert_eq!(s.src_frames, 200);
        assert_eq!(s.src_seconds, 4.0);
        assert_eq!(s.per_speaker["s0"], 2);
    }

    #[test]
    fn stats_table_renders_large_corpora() {
        let s = StatsReport {
            name: "large".into(),
            records: 833_000,
            src_seconds: 1000.0 * 3600.0,
            tgt_seconds: 1000.0 * 3600.0,
            ..Default::default()
        };
        let t = s.render_table();
        assert!(t.contains("833.0K"), "{t}");
        assert!(t.contains("1000.00"), "{t}");
    }
}
