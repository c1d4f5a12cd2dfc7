//! Layer-stacked transformer retriever: prompt framing, forward to any depth,
//! [RET] read-out, prefix pruning and FLOP accounting.

mod flops;
mod model;
pub mod prompt;

pub use flops::{estimate_flops, layer_flops, layer_ratio, FlopEstimate};
pub use model::{
    extract_ret_embedding, prune, Embedding, Encoder, EncoderConfig, EncoderVars, LayerWeights,
    TENSORS_PER_LAYER,
};
pub use prompt::{assemble_prompt, vocab, Side, TokenSequence};
