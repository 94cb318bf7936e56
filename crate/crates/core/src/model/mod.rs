//! Deterministic toy decoder-only transformer.

mod config;
mod forward;
mod kv;
mod layer;
mod rope;
mod tensor;
mod weights;

pub use config::ModelConfig;
pub use forward::{Forward, Model};
pub use kv::{HiddenStates, KvCache, LayerKv, TokenSeq};
pub use layer::{attention_forward, attention_weights, ffn_forward, gelu, layer_norm, project_hidden_to_kv};
pub use rope::apply_rope;
pub use tensor::{dot, flops, linear, max_abs_diff, FlopCounter, Matrix};
pub use weights::{LayerWeights, WeightSet};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("KV cache is full at {0} tokens")]
    KvFull(usize),
    #[error("bad weight file: {0}")]
    BadFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
