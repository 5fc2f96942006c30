//! Frozen stand-in encoders, prompts, and probabilistic adapters.

mod adapter;
mod frozen;
mod prompt;

pub use adapter::{
    adapter_loss, embed_pairs, train_adapters, AdapterEpoch, AdapterTrainConfig, AdapterTrainLog, AdapterVars,
    EmbeddingPair, ProbAdapter, ALPHA_FLOOR, BETA_FLOOR, DEFAULT_DROPOUT,
};
pub use frozen::{EncoderConfig, FrozenEncoder, FEATURE_TAP};
pub use prompt::{tokenize, Prompt, DEFAULT_TEMPLATE, VOCAB_SIZE};
