//! Supervised semantic tokenization: a split transformer encoder with a
//! vector quantizer between its halves, trained through an ASR decoder, and
//! a text-to-token model that produces the same tokens from text.

mod speech;
mod text_to_token;

pub use speech::{
    train_tokenizer, SpeechTokenizer, SymbolTable, TokenizerConfig, TokenizerExample, TokenizerTask,
};
pub use text_to_token::{
    text_to_tokens, train_text_to_token, TextToTokenConfig, TextToTokenExample, TextToTokenModel,
    TextToTokenTask, TokenGeneration,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|C| × d` quantizer table.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() == 0 {
            return Err(Error::Contract("a codebook needs at least one entry".into()));
        }
        if !entries.is_finite() {
            return Err(Error::Numeric("codebook contains non-finite entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        self.entries.row(i)
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }
}

/// Index of the nearest codebook entry for every row of `h` (squared
/// Euclidean distance, ties to the lowest index).
pub fn quantize(h: &Tensor, cb: &Codebook) -> Result<Vec<usize>> {
    if h.shape().len() != 2 || h.cols() != cb.dim() {
        return Err(Error::dim("quantize", h.shape(), cb.entries.shape()));
    }
    Ok((0..h.rows()).map(|i| nearest(h.row(i), cb)).collect())
}

fn nearest(x: &[f64], cb: &Codebook) -> usize {
    let mut best = (f64::INFINITY, 0);
    for n in 0..cb.size() {
        let d: f64 = x.iter().zip(cb.entry(n)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, n);
        }
    }
    best.1
}

/// Rows of the codebook selected by `tokens`.
pub fn dequantize(tokens: &[usize], cb: &Codebook) -> Result<Tensor> {
    let d = cb.dim();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t >= cb.size() {
            return Err(Error::Index {
                index: t,
                bound: cb.size(),
            });
        }
        data.extend_from_slice(cb.entry(t));
    }
    Tensor::new(vec![tokens.len(), d], data)
}

/// Concatenates every `k` consecutive frames into one row, zero-padding the
/// tail to a multiple of `k`.
pub fn stack_frames(frames: &Tensor, k: usize) -> Tensor {
    let (t, f) = (frames.rows(), frames.cols());
    let rows = t.div_ceil(k);
    let mut data = frames.data().to_vec();
    data.resize(rows * k * f, 0.0);
    Tensor::new(vec![rows, k * f], data).expect("stacked shape")
}
