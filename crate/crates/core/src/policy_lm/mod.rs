//! Tiny autoregressive policy language model: char tokenizer, causal
//! transformer, seeded sampling, and hidden-state export for the
//! connector.

mod model;
mod vocab;

pub use model::{InferSession, LmConfig, PolicyError, PolicyModel};
pub(crate) use model::{blocks_forward, init_blocks};
pub use vocab::{
    TokenSequence, Vocab, VocabError, ANSWER, ANSWER_END, BOS, EOS, IMG, PAD, THINK, THINK_END,
};
