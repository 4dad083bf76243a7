//! Desk-scale text generation pipeline: a causal transformer language model
//! trained by maximum likelihood, a discrete-sequence GAN trained through the
//! Gumbel-Softmax relaxation, and language-model fine-tuning on real text
//! augmented with GAN samples.

pub mod augment;
pub mod data;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod gumbel;
pub mod io;
pub mod lm;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
