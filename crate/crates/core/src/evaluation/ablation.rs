//! Projector and token-source ablations: several translation models
//! trained under one seed on shared tokenizer and vocoder.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::relative_delta_percent;
use crate::corpus::Manifest;
use crate::error::Result;
use crate::model::{ModelConfig, ProjectorKind};
use crate::pipeline::{text_derived_tokens, train_model, train_text_tokens, SharedStages};
use crate::training::{LossRecord, ValRecord};

/// Share of the shortest run's steps treated as "early" when comparing
/// convergence speed.
pub const EARLY_STEPS_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    /// Linear, Conv1D-Linear, Q-Former(2), Q-Former(4).
    Projectors,
    /// Speech-derived against text-derived semantic tokens.
    TokenSource,
}

impl AblationSuite {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Projectors => "projectors",
            Self::TokenSource => "token-source",
        }
    }
}

impl std::str::FromStr for AblationSuite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "projectors" => Ok(Self::Projectors),
            "token-source" | "token_source" | "tokens" => Ok(Self::TokenSource),
            _ => Err(format!("unknown ablation suite `{s}` (projectors, token-source)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum VariantStatus {
    Completed,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub status: VariantStatus,
    pub steps: u64,
    pub losses: Vec<LossRecord>,
    pub validations: Vec<ValRecord>,
    /// Mean training loss over the early window.
    pub early_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub bleu: Option<f64>,
    pub meteor: Option<f64>,
}

impl VariantResult {
    fn failed(name: String, reason: String) -> Self {
        Self {
            name,
            status: VariantStatus::Failed(reason),
            steps: 0,
            losses: Vec::new(),
            validations: Vec::new(),
            early_loss: None,
            best_val_loss: None,
            bleu: None,
            meteor: None,
        }
    }

    pub fn completed(&self) -> bool {
        self.status == VariantStatus::Completed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub seed: u64,
    /// Steps counted as early for every variant.
    pub early_steps: u64,
    pub variants: Vec<VariantResult>,
    /// Projectors: every higher-capacity projector reached a lower early
    /// training loss than Linear. `None` when a variant failed.
    pub faster_convergence_observed: Option<bool>,
    /// Token source: BLEU change of text-derived tokens relative to
    /// speech-derived tokens, in percent.
    pub relative_bleu_delta: Option<f64>,
}

impl AblationReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ablation: {} (seed {})", self.suite.name(), self.seed);
        let _ = writeln!(
            out,
            "{:<16}  {:>7}  {:>7}  {:>10}  {:>9}  {:>6}  status",
            "Variant", "BLEU", "METEOR", "early-loss", "best-val", "steps"
        );
        let f = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.p$}"));
        for v in &self.variants {
            let status = match &v.status {
                VariantStatus::Completed => "ok".to_string(),
                VariantStatus::Failed(r) => format!("failed: {r}"),
            };
            let _ = writeln!(
                out,
                "{:<16}  {:>7}  {:>7}  {:>10}  {:>9}  {:>6}  {status}",
                v.name,
                f(v.bleu, 2),
                f(v.meteor, 4),
                f(v.early_loss, 4),
                f(v.best_val_loss, 4),
                v.steps
            );
        }
        let _ = writeln!(out, "early window: first {} steps", self.early_steps);
        if self.suite == AblationSuite::Projectors {
            let flag = match self.faster_convergence_observed {
                Some(true) => "observed",
                Some(false) => "not observed",
                None => "undetermined",
            };
            let _ = writeln!(out, "faster early convergence of higher-capacity projectors: {flag}");
        }
        if let Some(d) = self.relative_bleu_delta {
            let word = if d <= 0.0 { "degradation" } else { "improvement" };
            let _ = writeln!(out, "relative BLEU {word} (text-derived vs speech-derived): {:.2}%", d.abs());
        }
        out
    }

    pub fn render_kv(&self) -> String {
        let mut out = format!("suite={}\nseed={}\nearly_steps={}\n", self.suite.name(), self.seed, self.early_steps);
        for v in &self.variants {
            let n = &v.name;
            let _ = writeln!(out, "{n}.completed={}", v.completed());
            let _ = writeln!(out, "{n}.steps={}", v.steps);
            for (k, x) in [
                ("bleu", v.bleu),
                ("meteor", v.meteor),
                ("early_loss", v.early_loss),
                ("best_val_loss", v.best_val_loss),
            ] {
                if let Some(x) = x {
                    let _ = writeln!(out, "{n}.{k}={x}");
                }
            }
        }
        if let Some(b) = self.faster_convergence_observed {
            let _ = writeln!(out, "faster_convergence_observed={b}");
        }
        if let Some(d) = self.relative_bleu_delta {
            let _ = writeln!(out, "relative_bleu_delta_percent={d}");
        }
        out
    }
}

pub const PROJECTOR_VARIANTS: [ProjectorKind; 4] = [
    ProjectorKind::Linear,
    ProjectorKind::Conv1dLinear,
    ProjectorKind::QFormer { layers: 2 },
    ProjectorKind::QFormer { layers: 4 },
];

/// Trains one translation model on `tokens` and scores it on `val`.
fn run_variant(
    shared: &SharedStages,
    name: String,
    model_cfg: &ModelConfig,
    train: &Manifest,
    train_tokens: &[Vec<usize>],
    val: &Manifest,
    val_tokens: &[Vec<usize>],
) -> VariantResult {
    log::info!("ablation variant {name}");
    let trained = train_model(model_cfg, &shared.cfg.model_train, train, train_tokens, val, val_tokens)
        .and_then(|(model, state)| {
            let outcome = shared.with_model(model).evaluate(val)?;
            Ok((state, outcome))
        });
    match trained {
        Ok((state, outcome)) => VariantResult {
            name,
            status: VariantStatus::Completed,
            steps: state.step(),
            best_val_loss: state.best_val(),
            losses: state.losses,
            validations: state.validations,
            early_loss: None,
            bleu: Some(outcome.bleu),
            meteor: Some(outcome.meteor),
        },
        Err(e) => {
            log::warn!("ablation variant {name} failed: {e}");
            VariantResult::failed(name, e.to_string())
        }
    }
}

fn fill_early_losses(variants: &mut [VariantResult]) -> u64 {
    let shortest = variants
        .iter()
        .filter(|v| v.completed())
        .map(|v| v.steps)
        .min()
        .unwrap_or(0);
    let early = ((shortest as f64 * EARLY_STEPS_FRACTION).ceil() as u64).max(1);
    for v in variants.iter_mut().filter(|v| v.completed()) {
        let window: Vec<f64> = v.losses.iter().filter(|l| l.step <= early).map(|l| l.loss).collect();
        if !window.is_empty() {
            v.early_loss = Some(window.iter().sum::<f64>() / window.len() as f64);
        }
    }
    early
}

/// Runs every variant of `suite` on shared tokenizer and vocoder. A variant
/// that fails is reported as failed; the others still run.
pub fn run_ablation(
    suite: AblationSuite,
    shared: &SharedStages,
    train: &Manifest,
    val: &Manifest,
) -> Result<AblationReport> {
    let mut variants = Vec::new();
    match suite {
        AblationSuite::Projectors => {
            for kind in PROJECTOR_VARIANTS {
                let cfg = ModelConfig {
                    projector: kind,
                    ..shared.cfg.model.clone()
                };
                variants.push(run_variant(
                    shared,
                    kind.label(),
                    &cfg,
                    train,
                    &shared.train_tokens,
                    val,
                    &shared.val_tokens,
                ));
            }
        }
        AblationSuite::TokenSource => {
            variants.push(run_variant(
                shared,
                "speech-derived".into(),
                &shared.cfg.model,
                train,
                &shared.train_tokens,
                val,
                &shared.val_tokens,
            ));
            log::info!("training text-to-token model");
            let text_tokens = train_text_tokens(
                &shared.cfg,
                &shared.vocoder,
                train,
                &shared.train_tokens,
                val,
                &shared.val_tokens,
            )
            .and_then(|(t2t, _)| {
                Ok((
                    text_derived_tokens(&t2t, &shared.vocoder, train)?,
                    text_derived_tokens(&t2t, &shared.vocoder, val)?,
                ))
            });
            variants.push(match text_tokens {
                Ok((tr, va)) => run_variant(shared, "text-derived".into(), &shared.cfg.model, train, &tr, val, &va),
                Err(e) => VariantResult::failed("text-derived".into(), e.to_string()),
            });
        }
    }
    let early_steps = fill_early_losses(&mut variants);
    let faster_convergence_observed = match suite {
        AblationSuite::Projectors => {
            let early: Option<Vec<f64>> = variants.iter().map(|v| v.early_loss).collect();
            early.map(|e| e[1..].iter().all(|&x| x < e[0]))
        }
        AblationSuite::TokenSource => None,
    };
    let relative_bleu_delta = match suite {
        AblationSuite::TokenSource => match (variants[0].bleu, variants[1].bleu) {
            (Some(speech), Some(text)) => relative_delta_percent(speech, text),
            _ => None,
        },
        AblationSuite::Projectors => None,
    };
    Ok(AblationReport {
        suite,
        seed: shared.cfg.seed,
        early_steps,
        variants,
        faster_convergence_observed,
        relative_bleu_delta,
    })
}
