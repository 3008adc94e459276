use std::collections::HashMap;
use std::hash::Hash;

use crate::corpus::{cosine_similarity, SpeechFrames};
use crate::error::{Error, Result};
use crate::vocoder::SpeakerEmbedder;

pub const BLEU_MAX_ORDER: usize = 4;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram count, per order `1..=4`,
/// summed over the corpus.
pub fn bleu_statistics<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> ([usize; BLEU_MAX_ORDER], [usize; BLEU_MAX_ORDER]) {
    let mut matches = [0; BLEU_MAX_ORDER];
    let mut totals = [0; BLEU_MAX_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=BLEU_MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    (matches, totals)
}

/// Corpus BLEU in `[0, 100]`: geometric mean of clipped n-gram precisions
/// for n = 1..4 (add-one smoothing for n ≥ 2) times the brevity penalty.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::dim("corpus_bleu", &[hyps.len()], &[refs.len()]));
    }
    if hyps.is_empty() {
        return Err(Error::Contract("BLEU of an empty corpus is undefined".into()));
    }
    let (matches, totals) = bleu_statistics(hyps, refs);
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..BLEU_MAX_ORDER {
        log_sum += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok((100.0 * bp * (log_sum / BLEU_MAX_ORDER as f64).exp()).clamp(0.0, 100.0))
}

/// Exact-match alignment of hypothesis positions to reference positions.
/// Each hypothesis token takes the reference position right after the
/// previous match when it fits, otherwise the leftmost unused one.
pub fn meteor_alignment<T: Eq>(hyp: &[T], r: &[T]) -> Vec<(usize, usize)> {
    let mut used = vec![false; r.len()];
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, h) in hyp.iter().enumerate() {
        let next = out.last().map(|&(_, j)| j + 1);
        let pick = match next {
            Some(j) if j < r.len() && !used[j] && r[j] == *h => Some(j),
            _ => (0..r.len()).find(|&j| !used[j] && r[j] == *h),
        };
        if let Some(j) = pick {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Number of runs of the alignment that are contiguous in both sequences.
pub fn meteor_chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// Exact-match METEOR: `F_mean · (1 − γ·(chunks/m)^β)` with
/// `F_mean = P·R / (α·P + (1−α)·R)`.
pub fn meteor_lite<T: Eq>(hyp: &[T], r: &[T]) -> f64 {
    let a = meteor_alignment(hyp, r);
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = p * rc / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rc);
    let penalty = METEOR_GAMMA * (meteor_chunks(&a) as f64 / m as f64).powf(METEOR_BETA);
    (f * (1.0 - penalty)).clamp(0.0, 1.0)
}

/// Mean sentence-level METEOR over a corpus.
pub fn corpus_meteor<T: Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::dim("corpus_meteor", &[hyps.len()], &[refs.len()]));
    }
    if hyps.is_empty() {
        return Err(Error::Contract("METEOR of an empty corpus is undefined".into()));
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| meteor_lite(h, r)).sum::<f64>() / hyps.len() as f64)
}

/// Cosine between the speaker embeddings of generated speech and a prompt.
pub fn speaker_similarity(gen: &SpeechFrames, prompt: &SpeechFrames, embedder: &SpeakerEmbedder) -> Result<f64> {
    cosine_similarity(&embedder.embed(gen)?, &embedder.embed(prompt)?)
}

/// Hook for learned metrics (BLEURT, COMET, ...) computed outside this
/// crate: hypothesis/reference strings in, one score per pair out.
pub trait ExternalScorer {
    fn name(&self) -> &str;
    fn score(&self, hyps: &[String], refs: &[String]) -> Result<Vec<f64>>;
}
