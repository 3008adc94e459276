//! Corpus BLEU, exact-match METEOR, speaker similarity, report rendering
//! and the ablation suites.

mod ablation;
mod metrics;

pub use ablation::{
    run_ablation, AblationReport, AblationSuite, VariantResult, VariantStatus, EARLY_STEPS_FRACTION,
    PROJECTOR_VARIANTS,
};
pub use metrics::{
    bleu_statistics, corpus_bleu, corpus_meteor, meteor_alignment, meteor_chunks, meteor_lite,
    speaker_similarity, ExternalScorer, BLEU_MAX_ORDER, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: String,
    pub bleu: f64,
    pub meteor: f64,
    pub speaker_sim: Option<f64>,
    pub count: usize,
    /// Scores from external scorers, by scorer name.
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub rows: Vec<SystemRow>,
}

impl EvalReport {
    pub fn new(corpus: impl Into<String>) -> Self {
        Self {
            corpus: corpus.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: SystemRow) -> Result<()> {
        let ok = (0.0..=100.0).contains(&row.bleu)
            && (0.0..=1.0).contains(&row.meteor)
            && row.speaker_sim.is_none_or(|s| (-1.0..=1.0).contains(&s));
        if !ok {
            return Err(Error::Contract(format!("metric out of range in row {row:?}")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Aligned text table, one row per system.
    pub fn render_table(&self) -> String {
        let extra: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.extra.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let width = self.rows.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "corpus: {}", self.corpus);
        let _ = write!(out, "{:<width$}  {:>7}  {:>7}  {:>7}", "System", "BLEU", "METEOR", "SIM");
        for e in &extra {
            let _ = write!(out, "  {e:>8}");
        }
        let _ = writeln!(out, "  {:>6}", "N");
        for r in &self.rows {
            let sim = r.speaker_sim.map_or_else(|| "-".to_string(), |s| format!("{s:.3}"));
            let _ = write!(out, "{:<width$}  {:>7.2}  {:>7.4}  {:>7}", r.system, r.bleu, r.meteor, sim);
            for e in &extra {
                let v = r.extra.get(e).map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                let _ = write!(out, "  {v:>8}");
            }
            let _ = writeln!(out, "  {:>6}", r.count);
        }
        out
    }

    /// `key=value` lines, keys `<system>.<metric>`.
    pub fn render_kv(&self) -> String {
        let mut out = format!("corpus={}\n", self.corpus);
        for r in &self.rows {
            let s = &r.system;
            let _ = writeln!(out, "{s}.bleu={}", r.bleu);
            let _ = writeln!(out, "{s}.meteor={}", r.meteor);
            if let Some(sim) = r.speaker_sim {
                let _ = writeln!(out, "{s}.speaker_sim={sim}");
            }
            let _ = writeln!(out, "{s}.count={}", r.count);
            for (k, v) in &r.extra {
                let _ = writeln!(out, "{s}.{k}={v}");
            }
        }
        out
    }
}

/// Relative change of `variant` against `baseline`, in percent; negative
/// when the variant is worse.
pub fn relative_delta_percent(baseline: f64, variant: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (variant - baseline) / baseline)
}
