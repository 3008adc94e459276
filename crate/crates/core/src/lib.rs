pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod vocoder;

pub use error::{Error, Result};
pub use tensor::{Mask, Tape, Tensor, Var};
