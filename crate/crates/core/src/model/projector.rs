use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{BlockDims, Builder, Graph, Linear, Mlp, ParamId, Stack};
use crate::tensor::{Mask, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProjectorKind {
    Linear,
    Conv1dLinear,
    QFormer { layers: usize },
}

impl ProjectorKind {
    pub fn label(&self) -> String {
        match self {
            Self::Linear => "Linear".into(),
            Self::Conv1dLinear => "Conv1D-Linear".into(),
            Self::QFormer { layers } => format!("Q-Former({layers})"),
        }
    }
}

/// Maps encoder features `T_e × d_e` into decoder embeddings `T_p × d`.
#[derive(Clone, Debug)]
pub enum Projector {
    /// MLP over the concatenation of every `k` consecutive frames.
    Linear { k: usize, mlp: Mlp },
    /// Convolution with kernel and stride `k`, then an MLP.
    Conv1dLinear { k: usize, conv: Linear, mlp: Mlp },
    /// Learned queries that self-attend and cross-attend to the encoder
    /// output, then a projection to the decoder width.
    QFormer {
        queries: ParamId,
        n_q: usize,
        blocks: Stack,
        out: Linear,
    },
}

impl Projector {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let mut s = b.scope("projector");
        let (de, d, k) = (cfg.encoder_dim, cfg.d, cfg.k);
        match cfg.projector {
            ProjectorKind::Linear => Self::Linear {
                k,
                mlp: Mlp::new(&mut s, "mlp", k * de, d, d),
            },
            ProjectorKind::Conv1dLinear => Self::Conv1dLinear {
                k,
                conv: Linear::new(&mut s, "conv", k * de, de),
                mlp: Mlp::new(&mut s, "mlp", de, d, d),
            },
            ProjectorKind::QFormer { layers } => Self::QFormer {
                queries: s.normal("queries", &[cfg.n_q, cfg.d_q], 1.0),
                n_q: cfg.n_q,
                blocks: Stack::new(
                    &mut s,
                    "blocks",
                    layers,
                    BlockDims {
                        d: cfg.d_q,
                        heads: cfg.heads,
                        d_ff: 2 * cfg.d_q,
                        d_cross: Some(de),
                    },
                ),
                out: Linear::new(&mut s, "out", cfg.d_q, d),
            },
        }
    }

    /// Output length for an encoder output of `t_e` rows.
    pub fn output_len(&self, t_e: usize) -> Result<usize> {
        match self {
            Self::Linear { k, .. } | Self::Conv1dLinear { k, .. } => {
                if t_e < *k {
                    Err(Error::InputTooShort { len: t_e, min: *k })
                } else {
                    Ok(t_e / k)
                }
            }
            Self::QFormer { n_q, .. } => Ok(*n_q),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, a_f: Var) -> Result<Var> {
        let (t_e, de) = (g.rows(a_f), g.cols(a_f));
        match self {
            Self::Linear { k, mlp } => {
                let grouped = group_rows(g, a_f, *k, t_e, de)?;
                mlp.forward(g, grouped)
            }
            Self::Conv1dLinear { k, conv, mlp } => {
                let grouped = group_rows(g, a_f, *k, t_e, de)?;
                let c = conv.forward(g, grouped)?;
                mlp.forward(g, c)
            }
            Self::QFormer { queries, blocks, out, .. } => {
                let q = g.param(*queries);
                let h = blocks.forward(g, q, Some(a_f), Mask::None)?;
                out.forward(g, h)
            }
        }
    }
}

/// `⌊t/k⌋ × (k·d)`: each row is `k` consecutive rows side by side; a
/// remainder shorter than `k` is dropped.
fn group_rows(g: &mut Graph<'_>, x: Var, k: usize, t: usize, d: usize) -> Result<Var> {
    if t < k {
        return Err(Error::InputTooShort { len: t, min: k });
    }
    let n = t / k;
    let x = if n * k == t { x } else { g.slice_rows(x, 0, n * k)? };
    g.reshape(x, &[n, k * d])
}
