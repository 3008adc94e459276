use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::corpus::SpeechFrames;
use crate::error::{Error, Result};
use crate::nn::{add_positions, BlockDims, Builder, Graph, Linear, ParamStore, Stack};
use crate::rng::derive;
use crate::tensor::{Mask, Tensor};

/// Where zero frames go when an input is shorter than the fixed length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadSide {
    /// Zeros first, so the utterance ends at the last encoder position.
    Start,
    End,
}

/// Seeded transformer encoder whose weights never change.
#[derive(Clone, Debug)]
pub struct FrozenSpeechEncoder {
    pub store: ParamStore,
    input: Linear,
    blocks: Stack,
    pub features: usize,
    pub fixed_input_len: usize,
    pub pad_side: PadSide,
    pub dim: usize,
}

impl FrozenSpeechEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = derive(cfg.seed, "encoder.init");
        let mut b = Builder::new(&mut store, &mut rng).frozen();
        let input = Linear::new(&mut b, "input", cfg.features, cfg.encoder_dim);
        let blocks = Stack::new(
            &mut b,
            "blocks",
            cfg.encoder_layers,
            BlockDims {
                d: cfg.encoder_dim,
                heads: cfg.encoder_heads,
                d_ff: 2 * cfg.encoder_dim,
                d_cross: None,
            },
        );
        Self {
            store,
            input,
            blocks,
            features: cfg.features,
            fixed_input_len: cfg.fixed_input_len,
            pad_side: cfg.pad_side,
            dim: cfg.encoder_dim,
        }
    }

    /// Zero-pads or truncates to `fixed_input_len` frames.
    pub fn pad(&self, s: &SpeechFrames) -> Result<Tensor> {
        if s.features() != self.features {
            return Err(Error::dim(
                "speech encoder input",
                &[s.num_frames(), s.features()],
                &[s.num_frames(), self.features],
            ));
        }
        let f = self.features;
        let n = self.fixed_input_len;
        let t = s.num_frames().min(n);
        let src = s.tensor().data();
        let mut data = vec![0.0; n * f];
        match self.pad_side {
            PadSide::End => data[..t * f].copy_from_slice(&src[..t * f]),
            // keep the tail when truncating so the end stays aligned
            PadSide::Start => {
                let skip = s.num_frames() - t;
                data[(n - t) * f..].copy_from_slice(&src[skip * f..]);
            }
        }
        Tensor::new(vec![n, f], data)
    }

    /// A_f for one utterance, `fixed_input_len × dim`.
    pub fn encode(&self, s: &SpeechFrames) -> Result<Tensor> {
        let x = self.pad(s)?;
        let mut g = Graph::new(&self.store);
        let x = g.constant(x);
        let h = self.input.forward(&mut g, x)?;
        let h = add_positions(&mut g, h)?;
        let h = self.blocks.forward(&mut g, h, None, Mask::None)?;
        Ok(g.tensor(h))
    }
}
